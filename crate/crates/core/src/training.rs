//! Loss, gradient assembly from rates, optimizer step and feedback-norm
//! restriction.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::backward::{BackwardRecord, LossGrad};
use crate::error::{check_dim, Result, SpideError};
use crate::forward::ForwardRecord;
use crate::network::{
    layer_bias_name, layer_weight_name, view1, view1_mut, view2, view2_mut, DropoutMasks, NetworkParams, TensorView,
    TensorViewMut, FEEDBACK_NAME, READOUT_BIAS_NAME, READOUT_WEIGHT_NAME,
};
use crate::oracle::{self, EquilibriumOptions, ImplicitOptions};

/// `L = s_l · CE(softmax(o), y)` and `∂L/∂o = s_l (softmax(o) − y)`.
pub fn loss_and_grad(o: ArrayView1<f64>, y: ArrayView1<f64>, loss_scale: f64) -> Result<(f64, LossGrad)> {
    check_dim("target", o.len(), y.len())?;
    let max = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = o.iter().map(|v| (v - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = -loss_scale * o.iter().zip(y.iter()).map(|(oi, yi)| yi * (oi - log_z)).sum::<f64>();
    let grad = o
        .iter()
        .zip(y.iter())
        .map(|(oi, yi)| loss_scale * ((oi - log_z).exp() - yi))
        .collect();
    Ok((loss, LossGrad::new(grad)?))
}

pub fn one_hot(label: usize, classes: usize) -> Array1<f64> {
    let mut y = Array1::zeros(classes);
    y[label] = 1.0;
    y
}

/// Gradients of every learnable tensor, shaped like [`NetworkParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layer_weights: Vec<Array2<f64>>,
    pub layer_biases: Vec<Array1<f64>>,
    pub feedback: Option<Array2<f64>>,
    /// out×in, like the readout weight.
    pub readout: Array2<f64>,
    pub readout_bias: Array1<f64>,
}

impl GradientSet {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layer_weights: params.layers.iter().map(|l| Array2::zeros(l.weight.weight().dim())).collect(),
            layer_biases: params.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
            feedback: params.feedback.as_ref().map(|w| Array2::zeros(w.weight().dim())),
            readout: Array2::zeros(params.readout.weight().dim()),
            readout_bias: Array1::zeros(params.readout_bias.len()),
        }
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layer_weights.iter().zip(&self.layer_biases).enumerate() {
            out.push(view2(layer_weight_name(i + 1), w));
            out.push(view1(layer_bias_name(i + 1), b));
        }
        if let Some(fb) = &self.feedback {
            out.push(view2(FEEDBACK_NAME.into(), fb));
        }
        out.push(view2(READOUT_WEIGHT_NAME.into(), &self.readout));
        out.push(view1(READOUT_BIAS_NAME.into(), &self.readout_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layer_weights.iter_mut().zip(&mut self.layer_biases).enumerate() {
            out.push(view2_mut(layer_weight_name(i + 1), w));
            out.push(view1_mut(layer_bias_name(i + 1), b));
        }
        if let Some(fb) = &mut self.feedback {
            out.push(view2_mut(FEEDBACK_NAME.into(), fb));
        }
        out.push(view2_mut(READOUT_WEIGHT_NAME.into(), &mut self.readout));
        out.push(view1_mut(READOUT_BIAS_NAME.into(), &mut self.readout_bias));
        out
    }

    /// Multiplies every entry by `k`.
    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn check_shapes(&self, params: &NetworkParams) -> Result<()> {
        let mine = self.tensors();
        let theirs = params.tensors();
        if mine.len() != theirs.len() {
            return Err(SpideError::Contract(format!(
                "gradient set has {} tensors, parameters have {}",
                mine.len(),
                theirs.len()
            )));
        }
        for (a, b) in mine.iter().zip(&theirs) {
            if a.name != b.name || a.shape != b.shape {
                return Err(SpideError::ShapeConflict {
                    name: b.name.clone(),
                    expected: b.shape.clone(),
                    found: a.shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// Largest absolute entry over all tensors.
    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference to `other` (same layout).
    pub fn max_abs_diff(&self, other: &GradientSet) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors().iter())
            .flat_map(|(a, b)| a.data.iter().zip(b.data.iter()))
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    /// `max |a − b| / max |b|`, the error relative to the scale of `reference`.
    pub fn relative_error(&self, reference: &GradientSet) -> f64 {
        let scale = reference.max_abs();
        if scale == 0.0 {
            self.max_abs()
        } else {
            self.max_abs_diff(reference) / scale
        }
    }

    /// Same as [`relative_error`](Self::relative_error) restricted to the
    /// hidden-layer and feedback tensors, which are the ones stage 2 feeds.
    pub fn hidden_relative_error(&self, reference: &GradientSet) -> f64 {
        let pick = |g: &GradientSet| -> Vec<f64> {
            let mut v = Vec::new();
            for t in g.tensors() {
                if t.name != READOUT_WEIGHT_NAME && t.name != READOUT_BIAS_NAME {
                    v.extend_from_slice(t.data);
                }
            }
            v
        };
        let a = pick(self);
        let b = pick(reference);
        let scale = b.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let diff = a.iter().zip(&b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Per-sample quantities needed to assemble a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRates {
    pub x_bar: Array1<f64>,
    pub alpha: Vec<Array1<f64>>,
    pub beta: Vec<Array1<f64>>,
    pub masks: Vec<Array1<f64>>,
    pub dropout: DropoutMasks,
    pub dl_do: Array1<f64>,
}

impl SampleRates {
    pub fn from_records(fwd: &ForwardRecord, bwd: &BackwardRecord, g: &LossGrad, dropout: &DropoutMasks) -> Self {
        Self {
            x_bar: fwd.x_bar.clone(),
            alpha: fwd.alpha.clone(),
            beta: bwd.beta.clone(),
            masks: fwd.masks.clone(),
            dropout: dropout.clone(),
            dl_do: g.dl_do.clone(),
        }
    }

    /// `δˡ = Dˡ⊙mˡ⊙βˡ / V_u` for each layer, and `δᶠ = Dᶠ⊙m¹⊙β¹ / V_u`.
    fn deltas(&self, v_u: f64) -> (Vec<Array1<f64>>, Array1<f64>) {
        let layers = (0..self.alpha.len())
            .map(|l| &self.dropout.layers[l] * &self.masks[l] * &self.beta[l] / v_u)
            .collect();
        let fb = &self.dropout.feedback * &self.masks[0] * &self.beta[0] / v_u;
        (layers, fb)
    }

    fn check(&self, params: &NetworkParams) -> Result<()> {
        let widths = params.layer_widths();
        for (name, v) in [("alpha", &self.alpha), ("beta", &self.beta), ("masks", &self.masks)] {
            if v.len() != widths.len() {
                return Err(SpideError::Contract(format!(
                    "{name} has {} layers, network has {}",
                    v.len(),
                    widths.len()
                )));
            }
            for (l, (a, &n)) in v.iter().zip(&widths).enumerate() {
                check_dim(&format!("{name} layer {}", l + 1), n, a.len())?;
            }
        }
        check_dim("x_bar", params.input_dim(), self.x_bar.len())?;
        check_dim("dl_do", params.output_dim(), self.dl_do.len())?;
        self.dropout.check_shapes(params)
    }
}

/// Gradient of one sample from its rates:
/// `∇Fˡ = δˡ α^{l−1}ᵀ` (with `α⁰ = x̄`), `∇bˡ = δˡ`, `∇W¹ = δᶠ α^Nᵀ`,
/// `∇Wᵒ = (∂L/∂o) α^Nᵀ`, `∇bᵒ = ∂L/∂o`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_from_rates(
    params: &NetworkParams,
    alpha: &[Array1<f64>],
    x_bar: ArrayView1<f64>,
    beta: &[Array1<f64>],
    masks: &[Array1<f64>],
    dropout: &DropoutMasks,
    dl_do: &Array1<f64>,
    v_u: f64,
) -> Result<GradientSet> {
    let sample = SampleRates {
        x_bar: x_bar.to_owned(),
        alpha: alpha.to_vec(),
        beta: beta.to_vec(),
        masks: masks.to_vec(),
        dropout: dropout.clone(),
        dl_do: dl_do.clone(),
    };
    assemble_batch(params, std::slice::from_ref(&sample), v_u)
}

/// Gradient of one sample from its two stage records.
pub fn assemble_gradients(
    params: &NetworkParams,
    fwd: &ForwardRecord,
    bwd: &BackwardRecord,
    g: &LossGrad,
    dropout: &DropoutMasks,
) -> Result<GradientSet> {
    assemble_batch(params, &[SampleRates::from_records(fwd, bwd, g, dropout)], fwd.v_u)
}

/// Mean gradient over a batch, as stacked outer products (`Δᵀ A / B`).
pub fn assemble_batch(params: &NetworkParams, samples: &[SampleRates], v_u: f64) -> Result<GradientSet> {
    if samples.is_empty() {
        return Err(SpideError::Contract("empty batch".into()));
    }
    for s in samples {
        s.check(params)?;
    }
    let b = samples.len();
    let inv_b = 1.0 / b as f64;
    let n_layers = params.num_layers();
    let deltas: Vec<_> = samples.iter().map(|s| s.deltas(v_u)).collect();

    let stack = |rows: &mut dyn Iterator<Item = ArrayView1<f64>>, width: usize| -> Array2<f64> {
        let mut m = Array2::zeros((b, width));
        for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
            dst.assign(&src);
        }
        m
    };

    let mut grads = GradientSet::zeros_like(params);
    for l in 0..n_layers {
        let n = params.layers[l].weight.out_dim();
        let d = stack(&mut deltas.iter().map(|(dl, _)| dl[l].view()), n);
        let a = if l == 0 {
            stack(&mut samples.iter().map(|s| s.x_bar.view()), params.input_dim())
        } else {
            stack(&mut samples.iter().map(|s| s.alpha[l - 1].view()), params.layers[l - 1].weight.out_dim())
        };
        grads.layer_weights[l] = d.t().dot(&a) * inv_b;
        grads.layer_biases[l] = d.sum_axis(Axis(0)) * inv_b;
    }
    let last = params.last_width();
    let a_n = stack(&mut samples.iter().map(|s| s.alpha[n_layers - 1].view()), last);
    if let Some(fb) = &mut grads.feedback {
        let d = stack(&mut deltas.iter().map(|(_, f)| f.view()), params.layers[0].weight.out_dim());
        *fb = d.t().dot(&a_n) * inv_b;
    }
    let go = stack(&mut samples.iter().map(|s| s.dl_do.view()), params.output_dim());
    grads.readout = go.t().dot(&a_n) * inv_b;
    grads.readout_bias = go.sum_axis(Axis(0)) * inv_b;
    Ok(grads)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: GradientSet,
    pub hyper: SgdHyper,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams, hyper: SgdHyper) -> Self {
        Self {
            momentum: GradientSet::zeros_like(params),
            hyper,
        }
    }
}

/// `M ← αM + (1−α)∇`, then `θ ← (1−μ)θ − (η/s_l) M` for every tensor.
pub fn sgd_step(params: &mut NetworkParams, grads: &GradientSet, state: &mut OptimizerState) -> Result<()> {
    grads.check_shapes(params)?;
    state.momentum.check_shapes(params)?;
    let SgdHyper {
        lr,
        momentum,
        weight_decay,
        loss_scale,
    } = state.hyper;
    if !(loss_scale > 0.0) {
        return Err(SpideError::Config("loss scale must be positive".into()));
    }
    let step = lr / loss_scale;
    let decay = 1.0 - weight_decay;
    let g_views = grads.tensors();
    for ((p, m), g) in params
        .tensors_mut()
        .into_iter()
        .zip(state.momentum.tensors_mut())
        .zip(&g_views)
    {
        for ((pi, mi), &gi) in p.data.iter_mut().zip(m.data.iter_mut()).zip(g.data) {
            *mi = momentum * *mi + (1.0 - momentum) * gi;
            *pi = decay * *pi - step * *mi;
        }
    }
    Ok(())
}

/// Hutchinson estimate of `‖W‖_F`: `sqrt(mean_k ‖εₖᵀ W‖²)` over standard
/// normal probes `εₖ`.
pub fn hutchinson_frobenius<R: Rng + ?Sized>(w: &Array2<f64>, samples: usize, rng: &mut R) -> f64 {
    if samples == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut eps = Array1::<f64>::zeros(w.nrows());
    for _ in 0..samples {
        eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
        let v = w.t().dot(&eps);
        total += v.dot(&v);
    }
    (total / samples as f64).sqrt()
}

fn rescale_to(w: &mut Array2<f64>, c: f64, est: f64) -> f64 {
    if est == 0.0 || !est.is_finite() {
        return 1.0;
    }
    let factor = c.min(est) / est;
    if factor != 1.0 {
        w.mapv_inplace(|v| v * factor);
    }
    factor
}

/// `W ← min(c, est)·W / est` with a Hutchinson estimate. Returns the
/// applied factor (1 when unchanged).
pub fn restrict_frobenius<R: Rng + ?Sized>(w: &mut Array2<f64>, c: f64, samples: usize, rng: &mut R) -> Result<f64> {
    if !(c > 0.0) {
        return Err(SpideError::Config(format!("norm bound must be positive, got {c}")));
    }
    let est = hutchinson_frobenius(w, samples, rng);
    Ok(rescale_to(w, c, est))
}

/// Same as [`restrict_frobenius`] with the exact Frobenius norm.
pub fn restrict_frobenius_exact(w: &mut Array2<f64>, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(SpideError::Config(format!("norm bound must be positive, got {c}")));
    }
    let est = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(rescale_to(w, c, est))
}

/// Outcome of comparing assembled oracle gradients against central
/// differences of the oracle loss.
#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub analytic: GradientSet,
    pub numeric: GradientSet,
    /// Largest `|a − n| / max(|a|, |n|, 1e-6)` over compared coordinates.
    pub max_rel_err: f64,
    pub compared: usize,
    /// Coordinates whose perturbation moves an equilibrium entry across a
    /// clip boundary.
    pub excluded: usize,
    /// Equilibrium entries sitting exactly on a clip boundary.
    pub boundary: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiniteDiffConfig {
    pub eps: f64,
    pub loss_scale: f64,
    pub v_u: f64,
}

fn oracle_loss(
    params: &NetworkParams,
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    cfg: &FiniteDiffConfig,
    dropout: &DropoutMasks,
    opts: &EquilibriumOptions,
) -> Result<(f64, Vec<Array1<f64>>)> {
    let eq = oracle::solve_equilibrium(params, x, dropout, cfg.v_u, opts)?;
    let o = params.readout.apply(eq.alpha_last().view())? + &params.readout_bias;
    let (loss, _) = loss_and_grad(o.view(), y, cfg.loss_scale)?;
    Ok((loss, eq.masks()))
}

/// Check assembled oracle gradients against central differences of
/// `L(α*(θ))` on a tiny network.
pub fn finite_diff_check(
    params: &NetworkParams,
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    cfg: &FiniteDiffConfig,
) -> Result<FiniteDiffReport> {
    if params.total_neurons() > 50 {
        return Err(SpideError::Config(format!(
            "finite differences need at most 50 neurons, network has {}",
            params.total_neurons()
        )));
    }
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(SpideError::Config(format!("eps must lie in [1e-6, 1e-3], got {}", cfg.eps)));
    }
    let dropout = DropoutMasks::identity_for(params);
    let eq_opts = EquilibriumOptions {
        tol: 1e-15,
        max_iter: 2_000_000,
        damping: 0.5,
    };
    let eq = oracle::solve_equilibrium(params, x, &dropout, cfg.v_u, &eq_opts)?;
    let masks = eq.masks();
    let o = params.readout.apply(eq.alpha_last().view())? + &params.readout_bias;
    let (_, g) = loss_and_grad(o.view(), y, cfg.loss_scale)?;
    let current = g.to_alpha_space(params)?;
    let imp = oracle::solve_implicit(
        params,
        &eq,
        &dropout,
        cfg.v_u,
        &current,
        &ImplicitOptions {
            tol: 1e-15,
            ..Default::default()
        },
    )?;
    let analytic = oracle::oracle_gradients(params, &eq, &imp, x, &g.dl_do, &dropout, cfg.v_u)?;

    let mut numeric = GradientSet::zeros_like(params);
    let mut compared = 0;
    let mut excluded = 0;
    let mut max_rel_err: f64 = 0.0;
    let analytic_views = analytic.tensors();
    let n_tensors = analytic_views.len();
    for ti in 0..n_tensors {
        let len = analytic_views[ti].data.len();
        for ci in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data[ci] += cfg.eps;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data[ci] -= cfg.eps;
            let (lp, mp) = oracle_loss(&plus, x, y, cfg, &dropout, &eq_opts)?;
            let (lm, mm) = oracle_loss(&minus, x, y, cfg, &dropout, &eq_opts)?;
            let fd = (lp - lm) / (2.0 * cfg.eps);
            numeric.tensors_mut()[ti].data[ci] = fd;
            if mp != masks || mm != masks {
                excluded += 1;
                continue;
            }
            let a = analytic_views[ti].data[ci];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            compared += 1;
        }
    }
    Ok(FiniteDiffReport {
        analytic,
        numeric,
        max_rel_err,
        compared,
        excluded,
        boundary: eq.boundary_count(),
    })
}
