//! Network topology and learnable parameters.
//!
//! A network has `N >= 1` hidden layers. Layer 1 reads the input through
//! `F¹` and, when feedback is enabled, the last hidden layer through the
//! feedback operator `W¹`. Layer `l >= 2` reads layer `l - 1` through `Fˡ`.
//! A non-spiking readout `o = Wᵒ α^N + bᵒ` sits on top. Dropping `W¹` turns
//! the model into a plain feedforward network.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{check_dim, Result, SpideError};
use crate::neuron::NeuronHyper;
use crate::rng;

/// Dense linear operator `y = W x` with out×in weight storage.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOp {
    weight: Array2<f64>,
}

impl LinearOp {
    pub fn new(weight: Array2<f64>) -> Self {
        // row-major storage is assumed by the event-driven kernels
        let weight = if weight.is_standard_layout() {
            weight
        } else {
            weight.as_standard_layout().into_owned()
        };
        Self { weight }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self::new(Array2::zeros((out_dim, in_dim)))
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weight
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_dim("LinearOp::apply", self.in_dim(), x.len())?;
        Ok(self.weight.dot(&x))
    }

    pub fn apply_transpose(&self, y: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_dim("LinearOp::apply_transpose", self.out_dim(), y.len())?;
        Ok(self.weight.t().dot(&y))
    }

    /// `out += Σ_{j ∈ active} W[:, j]` (binary spikes).
    pub(crate) fn accumulate_columns(&self, active: &[usize], out: &mut [f64]) {
        if active.is_empty() {
            return;
        }
        let cols = self.in_dim();
        let data = self.weight.as_slice().expect("standard layout");
        for (row, acc) in data.chunks_exact(cols).zip(out.iter_mut()) {
            let mut s = 0.0;
            for &j in active {
                s += row[j];
            }
            *acc += s;
        }
    }

    /// `out += Σ_j c_j W[j, :]` (transposed application of signed, weighted spikes).
    pub(crate) fn accumulate_rows_weighted(&self, rows: &[(usize, f64)], out: &mut [f64]) {
        let cols = self.in_dim();
        let data = self.weight.as_slice().expect("standard layout");
        for &(j, c) in rows {
            let row = &data[j * cols..(j + 1) * cols];
            for (acc, &w) in out.iter_mut().zip(row) {
                *acc += c * w;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.weight.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Induced ∞-norm of the transpose, i.e. the largest absolute column sum.
    pub fn transpose_inf_norm(&self) -> f64 {
        (0..self.in_dim())
            .map(|j| self.weight.column(j).iter().map(|w| w.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// One hidden layer: input operator and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: LinearOp,
    pub bias: Array1<f64>,
}

/// Borrowed view of one named parameter tensor.
#[derive(Debug)]
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Mutable view of one named parameter tensor.
#[derive(Debug)]
pub struct TensorViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub(crate) fn view2<'a>(name: String, a: &'a Array2<f64>) -> TensorView<'a> {
    TensorView {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    }
}

pub(crate) fn view1<'a>(name: String, a: &'a Array1<f64>) -> TensorView<'a> {
    TensorView {
        name,
        shape: vec![a.len()],
        data: a.as_slice().expect("standard layout"),
    }
}

pub(crate) fn view2_mut<'a>(name: String, a: &'a mut Array2<f64>) -> TensorViewMut<'a> {
    TensorViewMut {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice_mut().expect("standard layout"),
    }
}

pub(crate) fn view1_mut<'a>(name: String, a: &'a mut Array1<f64>) -> TensorViewMut<'a> {
    TensorViewMut {
        name,
        shape: vec![a.len()],
        data: a.as_slice_mut().expect("standard layout"),
    }
}

pub fn layer_weight_name(l: usize) -> String {
    format!("layer{l}.weight")
}

pub fn layer_bias_name(l: usize) -> String {
    format!("layer{l}.bias")
}

pub const FEEDBACK_NAME: &str = "feedback.weight";
pub const READOUT_WEIGHT_NAME: &str = "readout.weight";
pub const READOUT_BIAS_NAME: &str = "readout.bias";

/// All learnable tensors of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
    /// `W¹`, from the last hidden layer back to the first. `None` for
    /// feedforward networks.
    pub feedback: Option<LinearOp>,
    pub readout: LinearOp,
    pub readout_bias: Array1<f64>,
}

impl NetworkParams {
    pub fn new(
        layers: Vec<Layer>,
        feedback: Option<LinearOp>,
        readout: LinearOp,
        readout_bias: Array1<f64>,
    ) -> Result<Self> {
        let params = Self {
            layers,
            feedback,
            readout,
            readout_bias,
        };
        params.validate()?;
        Ok(params)
    }

    /// Check the dimensional chain between all operators.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(SpideError::Config("network needs at least one layer".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            check_dim(&format!("layer {l} bias"), layer.weight.out_dim(), layer.bias.len())?;
            if i > 0 {
                check_dim(
                    &format!("layer {l} input"),
                    self.layers[i - 1].weight.out_dim(),
                    layer.weight.in_dim(),
                )?;
            }
        }
        let first = self.layers[0].weight.out_dim();
        let last = self.last_width();
        if let Some(fb) = &self.feedback {
            check_dim("feedback output", first, fb.out_dim())?;
            check_dim("feedback input", last, fb.in_dim())?;
        }
        check_dim("readout input", last, self.readout.in_dim())?;
        check_dim("readout bias", self.readout.out_dim(), self.readout_bias.len())?;
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.readout.out_dim()
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weight.out_dim()).collect()
    }

    pub fn last_width(&self) -> usize {
        self.layers.last().expect("non-empty").weight.out_dim()
    }

    pub fn has_feedback(&self) -> bool {
        self.feedback.is_some()
    }

    pub fn total_neurons(&self) -> usize {
        self.layer_widths().iter().sum()
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(view2(layer_weight_name(i + 1), layer.weight.weight()));
            out.push(view1(layer_bias_name(i + 1), &layer.bias));
        }
        if let Some(fb) = &self.feedback {
            out.push(view2(FEEDBACK_NAME.into(), fb.weight()));
        }
        out.push(view2(READOUT_WEIGHT_NAME.into(), self.readout.weight()));
        out.push(view1(READOUT_BIAS_NAME.into(), &self.readout_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push(view2_mut(layer_weight_name(i + 1), layer.weight.weight_mut()));
            out.push(view1_mut(layer_bias_name(i + 1), &mut layer.bias));
        }
        if let Some(fb) = &mut self.feedback {
            out.push(view2_mut(FEEDBACK_NAME.into(), fb.weight_mut()));
        }
        out.push(view2_mut(READOUT_WEIGHT_NAME.into(), self.readout.weight_mut()));
        out.push(view1_mut(READOUT_BIAS_NAME.into(), &mut self.readout_bias));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Draw an out×in matrix: uniform [0, 1) entries, each row centred to zero
/// mean and scaled to unit L2 norm.
fn init_rows(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut w = Array2::zeros((out_dim, in_dim));
    for mut row in w.rows_mut() {
        for v in row.iter_mut() {
            *v = rng.random::<f64>();
        }
        let mean = row.sum() / in_dim as f64;
        row.mapv_inplace(|v| v - mean);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    w
}

/// Build a network. `sizes[0]` is the input dimension and `sizes[1..]` are
/// the hidden layer widths.
pub fn build_network(sizes: &[usize], num_classes: usize, feedback: bool, seed: u64) -> Result<NetworkParams> {
    if sizes.len() < 2 {
        return Err(SpideError::Config(
            "layer spec needs an input size and at least one hidden layer".into(),
        ));
    }
    if sizes.contains(&0) || num_classes == 0 {
        return Err(SpideError::Config("layer sizes must be positive".into()));
    }
    let mut rng = rng::stream(seed, rng::DOMAIN_INIT, 0, 0);
    let layers = sizes
        .windows(2)
        .map(|w| Layer {
            weight: LinearOp::new(init_rows(w[1], w[0], &mut rng)),
            bias: Array1::zeros(w[1]),
        })
        .collect::<Vec<_>>();
    let first = sizes[1];
    let last = *sizes.last().unwrap();
    let fb = feedback.then(|| LinearOp::new(init_rows(first, last, &mut rng)));
    let readout = LinearOp::new(init_rows(num_classes, last, &mut rng));
    NetworkParams::new(layers, fb, readout, Array1::zeros(num_classes))
}

/// Largest singular value by power iteration on `WᵀW`.
pub fn spectral_norm(w: &Array2<f64>, iters: usize) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    // fixed pseudo-random start; an all-ones start is orthogonal to the
    // leading singular vector of row-centred matrices
    let mut start = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Array1<f64> = (0..w.ncols()).map(|_| start.random::<f64>() - 0.5).collect();
    let n = v.dot(&v).sqrt();
    v /= n;
    for _ in 0..iters {
        let z = w.t().dot(&w.dot(&v));
        let zn = z.dot(&z).sqrt();
        if zn == 0.0 {
            return 0.0;
        }
        v = z / zn;
    }
    let wv = w.dot(&v);
    wv.dot(&wv).sqrt()
}

/// Diagnostic for the forward convergence condition
/// `‖W¹‖₂ ∏_{l≥2} ‖Fˡ‖₂ ≤ γ (v_th − u_reset)^N` with `γ < 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceCertificate {
    /// Product of spectral norms around the feedback loop.
    pub spectral_bound: f64,
    /// `spectral_bound / v_u^N`, γ.
    pub contraction_ratio: f64,
    pub satisfied: bool,
    /// `max(‖W¹ᵀ‖∞, ‖Fˡᵀ‖∞) / v_u`, the ∞-norm analogue used by the
    /// backward consistency bound.
    pub inf_norm_ratio: f64,
}

pub fn certify_convergence(params: &NetworkParams, hyper: &NeuronHyper, power_iters: usize) -> Result<ConvergenceCertificate> {
    if power_iters < 10 {
        return Err(SpideError::Config(format!(
            "power_iters must be at least 10, got {power_iters}"
        )));
    }
    let v_u = hyper.v_u();
    let n = params.num_layers() as i32;
    let Some(fb) = &params.feedback else {
        return Ok(ConvergenceCertificate {
            spectral_bound: 0.0,
            contraction_ratio: 0.0,
            satisfied: true,
            inf_norm_ratio: params.layers[1..]
                .iter()
                .map(|l| l.weight.transpose_inf_norm() / v_u)
                .fold(0.0, f64::max),
        });
    };
    let mut bound = spectral_norm(fb.weight(), power_iters);
    for layer in &params.layers[1..] {
        bound *= spectral_norm(layer.weight.weight(), power_iters);
    }
    let ratio = bound / v_u.powi(n);
    let inf = params.layers[1..]
        .iter()
        .map(|l| l.weight.transpose_inf_norm())
        .fold(fb.transpose_inf_norm(), f64::max)
        / v_u;
    Ok(ConvergenceCertificate {
        spectral_bound: bound,
        contraction_ratio: ratio,
        satisfied: ratio < 1.0,
        inf_norm_ratio: inf,
    })
}

/// Variational dropout masks, fixed for every time step of one sample.
///
/// Entries are `0` or `1 / (1 − rate)` (inverted dropout). `layers[l]` scales
/// the feedforward drive of hidden layer `l + 1`; `feedback` scales the
/// feedback drive of layer 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    pub layers: Vec<Array1<f64>>,
    pub feedback: Array1<f64>,
    pub rate: f64,
}

impl DropoutMasks {
    /// All-ones masks (dropout disabled).
    pub fn identity(widths: &[usize]) -> Self {
        Self {
            layers: widths.iter().map(|&n| Array1::ones(n)).collect(),
            feedback: Array1::ones(widths[0]),
            rate: 0.0,
        }
    }

    pub fn identity_for(params: &NetworkParams) -> Self {
        Self::identity(&params.layer_widths())
    }

    pub fn check_shapes(&self, params: &NetworkParams) -> Result<()> {
        let widths = params.layer_widths();
        check_dim("dropout mask count", widths.len(), self.layers.len())?;
        for (l, (m, &n)) in self.layers.iter().zip(&widths).enumerate() {
            check_dim(&format!("dropout mask {}", l + 1), n, m.len())?;
        }
        check_dim("feedback dropout mask", widths[0], self.feedback.len())
    }
}

pub fn make_dropout_masks<R: Rng + ?Sized>(widths: &[usize], rate: f64, rng: &mut R) -> Result<DropoutMasks> {
    if !(0.0..1.0).contains(&rate) {
        return Err(SpideError::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if widths.is_empty() {
        return Err(SpideError::Config("dropout masks need at least one layer".into()));
    }
    if rate == 0.0 {
        return Ok(DropoutMasks::identity(widths));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut draw = |n: usize| -> Array1<f64> {
        (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect()
    };
    let layers = widths.iter().map(|&n| draw(n)).collect();
    let feedback = draw(widths[0]);
    Ok(DropoutMasks {
        layers,
        feedback,
        rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_net(w: f64) -> NetworkParams {
        NetworkParams::new(
            vec![Layer {
                weight: LinearOp::new(array![[1.0]]),
                bias: array![0.0],
            }],
            Some(LinearOp::new(array![[w]])),
            LinearOp::new(array![[1.0]]),
            array![0.0],
        )
        .unwrap()
    }

    #[test]
    fn build_shapes() {
        let p = build_network(&[784, 256, 256], 10, true, 1).unwrap();
        assert_eq!(p.layers[0].weight.weight().dim(), (256, 784));
        assert_eq!(p.layers[1].weight.weight().dim(), (256, 256));
        assert_eq!(p.feedback.as_ref().unwrap().weight().dim(), (256, 256));
        assert_eq!(p.readout.weight().dim(), (10, 256));
        assert!(p.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn rows_have_unit_norm() {
        let p = build_network(&[784, 64], 10, true, 3).unwrap();
        for row in p.layers[0].weight.weight().rows() {
            let n = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            assert!(row.sum().abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = build_network(&[20, 8, 8], 3, true, 42).unwrap();
        let b = build_network(&[20, 8, 8], 3, true, 42).unwrap();
        let c = build_network(&[20, 8, 8], 3, true, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_spec_is_config_error() {
        assert!(matches!(build_network(&[], 10, true, 0), Err(SpideError::Config(_))));
        assert!(matches!(build_network(&[784], 10, true, 0), Err(SpideError::Config(_))));
        assert!(build_network(&[784, 0], 10, true, 0).is_err());
    }

    #[test]
    fn shape_chain_is_checked() {
        let bad = NetworkParams::new(
            vec![Layer {
                weight: LinearOp::zeros(3, 2),
                bias: Array1::zeros(3),
            }],
            Some(LinearOp::zeros(3, 4)),
            LinearOp::zeros(2, 3),
            Array1::zeros(2),
        );
        assert!(matches!(bad, Err(SpideError::DimensionMismatch { .. })));
    }

    #[test]
    fn certificate_examples() {
        let h = NeuronHyper::forward_default();
        let c = certify_convergence(&scalar_net(0.0), &h, 50).unwrap();
        assert_eq!(c.contraction_ratio, 0.0);
        assert!(c.satisfied);
        let c = certify_convergence(&scalar_net(1.5), &h, 50).unwrap();
        assert!((c.contraction_ratio - 0.75).abs() < 1e-12);
        assert!(c.satisfied);
        let c = certify_convergence(&scalar_net(2.5), &h, 50).unwrap();
        assert!((c.contraction_ratio - 1.25).abs() < 1e-12);
        assert!(!c.satisfied);
        assert!(certify_convergence(&scalar_net(1.0), &h, 5).is_err());
    }

    #[test]
    fn feedforward_certificate_is_trivial() {
        let p = build_network(&[5, 4, 3], 2, false, 0).unwrap();
        let c = certify_convergence(&p, &NeuronHyper::forward_default(), 50).unwrap();
        assert_eq!(c.spectral_bound, 0.0);
        assert!(c.satisfied);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let w = array![[3.0, 0.0], [0.0, -5.0]];
        assert!((spectral_norm(&w, 100) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn event_kernels_match_dense() {
        let p = build_network(&[6, 5], 2, true, 9).unwrap();
        let op = &p.layers[0].weight;
        let mut out = vec![0.0; 5];
        op.accumulate_columns(&[1, 4], &mut out);
        let dense = op.apply(array![0.0, 1.0, 0.0, 0.0, 1.0, 0.0].view()).unwrap();
        for (a, b) in out.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut out = vec![0.0; 6];
        op.accumulate_rows_weighted(&[(0, 0.5), (3, -2.0)], &mut out);
        let dense = op.apply_transpose(array![0.5, 0.0, 0.0, -2.0, 0.0].view()).unwrap();
        for (a, b) in out.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = make_dropout_masks(&[3, 4], 0.0, &mut rng).unwrap();
        assert_eq!(m, DropoutMasks::identity(&[3, 4]));
        assert!(make_dropout_masks(&[3], 1.0, &mut rng).is_err());
        assert!(make_dropout_masks(&[3], -0.1, &mut rng).is_err());
    }

    #[test]
    fn dropout_zero_fraction_matches_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = make_dropout_masks(&[1_000_000], 0.5, &mut rng).unwrap();
        let zeros = m.layers[0].iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.5).abs() < 0.01, "{zeros}");
        assert!(m.layers[0].iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = m.layers[0].mean().unwrap();
        assert!((mean - 1.0).abs() < 0.01);
    }
}
