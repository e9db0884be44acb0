//! Stage 1: simulate the spiking network and record equilibrium statistics.

use ndarray::{Array1, ArrayView1};

use crate::error::{check_dim, Result, SpideError};
use crate::network::{DropoutMasks, NetworkParams};
use crate::neuron::{if_lif_update, NeuronHyper};
use crate::rates::RateAccumulator;

pub use crate::rates::lif_rates;

/// Input currents presented to layer 1.
#[derive(Clone, Debug, PartialEq)]
pub enum InputStream {
    /// The same vector at every step.
    Constant(Array1<f64>),
    /// One vector per step; must cover every simulated step.
    Sequence(Vec<Array1<f64>>),
}

impl InputStream {
    pub fn dim(&self) -> usize {
        match self {
            InputStream::Constant(x) => x.len(),
            InputStream::Sequence(xs) => xs.first().map_or(0, |x| x.len()),
        }
    }

    /// Input at step `t` (0-based).
    pub fn at(&self, t: usize) -> ArrayView1<'_, f64> {
        match self {
            InputStream::Constant(x) => x.view(),
            InputStream::Sequence(xs) => xs[t].view(),
        }
    }

    fn check(&self, input_dim: usize, steps: usize) -> Result<()> {
        match self {
            InputStream::Constant(x) => check_dim("input", input_dim, x.len()),
            InputStream::Sequence(xs) => {
                if xs.len() < steps {
                    return Err(SpideError::Contract(format!(
                        "input sequence has {} steps, simulation needs {steps}",
                        xs.len()
                    )));
                }
                for x in &xs[..steps] {
                    check_dim("input", input_dim, x.len())?;
                }
                Ok(())
            }
        }
    }
}

/// Present a static vector as a constant current.
pub fn encode_constant(x: ArrayView1<f64>) -> InputStream {
    InputStream::Constant(x.to_owned())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardConfig {
    pub t_f: usize,
    pub hyper: NeuronHyper,
}

/// Output of stage 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord {
    /// Readout, time-averaged with the same weighting as the rates.
    pub o: Array1<f64>,
    /// (Weighted) average firing rate of every hidden layer.
    pub alpha: Vec<Array1<f64>>,
    /// `1` where `0 < α < 1`, else `0`.
    pub masks: Vec<Array1<f64>>,
    /// (Weighted) average input.
    pub x_bar: Array1<f64>,
    /// Total spikes emitted by each layer.
    pub spike_counts: Vec<u64>,
    pub t_f: usize,
    /// `v_th − u_reset` of the forward neurons.
    pub v_u: f64,
}

impl ForwardRecord {
    pub fn alpha_last(&self) -> &Array1<f64> {
        self.alpha.last().expect("at least one layer")
    }

    pub fn total_spikes(&self) -> u64 {
        self.spike_counts.iter().sum()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(self.o.view())
    }
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Interiority masks of a rate vector.
pub fn interior_mask(alpha: &Array1<f64>) -> Array1<f64> {
    alpha.mapv(|a| if a > 0.0 && a < 1.0 { 1.0 } else { 0.0 })
}

/// `o = Wᵒ α + bᵒ`.
pub fn readout(alpha_n: ArrayView1<f64>, params: &NetworkParams) -> Result<Array1<f64>> {
    Ok(params.readout.apply(alpha_n)? + &params.readout_bias)
}

fn check_finite(drive: &[f64], layer: usize, step: usize) -> Result<()> {
    if drive.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SpideError::NonFinite { layer, step })
    }
}

/// Run the network for `t_f` steps from zero membrane potentials.
///
/// Layer 1 receives `D¹⊙(F¹x[t] + b¹)` plus, from the second step on,
/// `Dᶠ⊙(W¹ s^N[t−1])`; layer `l ≥ 2` receives `Dˡ⊙(Fˡ s^{l−1}[t] + bˡ)`.
/// Spikes are propagated event-driven: only the columns of active
/// presynaptic neurons are summed. The convergence certificate is not
/// checked here; callers that care compute it once per parameter set.
pub fn forward_stage(
    params: &NetworkParams,
    input: &InputStream,
    cfg: &ForwardConfig,
    dropout: &DropoutMasks,
) -> Result<ForwardRecord> {
    if cfg.t_f == 0 {
        return Err(SpideError::Contract("t_f must be at least 1".into()));
    }
    cfg.hyper.validate()?;
    input.check(params.input_dim(), cfg.t_f)?;
    dropout.check_shapes(params)?;

    let hyper = &cfg.hyper;
    let widths = params.layer_widths();
    let n_layers = widths.len();
    let leak = hyper.leak;

    let mut u: Vec<Vec<f64>> = widths.iter().map(|&n| vec![0.0; n]).collect();
    let mut active: Vec<Vec<usize>> = widths.iter().map(|&n| Vec::with_capacity(n)).collect();
    let mut rates: Vec<RateAccumulator> = widths.iter().map(|&n| RateAccumulator::new(n, leak)).collect();
    let mut x_acc = RateAccumulator::new(params.input_dim(), leak);
    let mut o_acc = RateAccumulator::new(params.output_dim(), leak);
    let mut spike_counts = vec![0u64; n_layers];

    let layer1 = &params.layers[0];
    let static_drive = match input {
        InputStream::Constant(x) => {
            let d = (layer1.weight.apply(x.view())? + &layer1.bias) * &dropout.layers[0];
            check_finite(d.as_slice().unwrap(), 1, 0)?;
            Some(d.to_vec())
        }
        InputStream::Sequence(_) => None,
    };
    let mut drive = vec![0.0; widths.iter().copied().max().unwrap_or(0)];
    let mut fb = vec![0.0; widths[0]];
    let mut o_step = vec![0.0; params.output_dim()];

    for t in 0..cfg.t_f {
        let x_t = input.at(t);
        if static_drive.is_none() {
            x_acc.begin_step();
            for (i, &v) in x_t.iter().enumerate() {
                x_acc.add(i, v);
            }
        }

        // layer 1
        let n1 = widths[0];
        let d1 = &mut drive[..n1];
        match &static_drive {
            Some(sd) => d1.copy_from_slice(sd),
            None => {
                let d = (layer1.weight.apply(x_t)? + &layer1.bias) * &dropout.layers[0];
                d1.copy_from_slice(d.as_slice().unwrap());
            }
        }
        if t > 0 {
            if let Some(w1) = &params.feedback {
                fb.iter_mut().for_each(|v| *v = 0.0);
                w1.accumulate_columns(&active[n_layers - 1], &mut fb);
                for ((d, &f), &m) in d1.iter_mut().zip(&fb).zip(&dropout.feedback) {
                    *d += m * f;
                }
            }
        }
        check_finite(d1, 1, t + 1)?;
        fire_layer(&mut u[0], d1, hyper, &mut active[0], &mut rates[0]);
        spike_counts[0] += active[0].len() as u64;

        // layers 2..N, same step
        for l in 1..n_layers {
            let layer = &params.layers[l];
            let n = widths[l];
            let d = &mut drive[..n];
            d.copy_from_slice(layer.bias.as_slice().unwrap());
            let (prev, cur) = active.split_at_mut(l);
            layer.weight.accumulate_columns(&prev[l - 1], d);
            for (v, &m) in d.iter_mut().zip(&dropout.layers[l]) {
                *v *= m;
            }
            check_finite(d, l + 1, t + 1)?;
            fire_layer(&mut u[l], d, hyper, &mut cur[0], &mut rates[l]);
            spike_counts[l] += cur[0].len() as u64;
        }

        // readout accumulation: Wᵒ s^N[t]
        o_acc.begin_step();
        o_step.iter_mut().for_each(|v| *v = 0.0);
        params.readout.accumulate_columns(&active[n_layers - 1], &mut o_step);
        for (i, &v) in o_step.iter().enumerate() {
            o_acc.add(i, v);
        }
    }

    let alpha: Vec<Array1<f64>> = rates.iter().map(|r| r.rates()).collect();
    let masks = alpha.iter().map(interior_mask).collect();
    let o = o_acc.rates() + &params.readout_bias;
    let x_bar = match input {
        // a (weighted) average of a constant is the constant itself
        InputStream::Constant(x) => x.clone(),
        InputStream::Sequence(_) => x_acc.rates(),
    };
    Ok(ForwardRecord {
        o,
        alpha,
        masks,
        x_bar,
        spike_counts,
        t_f: cfg.t_f,
        v_u: hyper.v_u(),
    })
}

fn fire_layer(u: &mut [f64], drive: &[f64], hyper: &NeuronHyper, active: &mut Vec<usize>, rates: &mut RateAccumulator) {
    active.clear();
    rates.begin_step();
    for (i, (ui, &d)) in u.iter_mut().zip(drive).enumerate() {
        let (fired, next) = if_lif_update(*ui, d, hyper);
        *ui = next;
        if fired {
            active.push(i);
            rates.add(i, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, Layer, LinearOp};
    use ndarray::array;

    fn scalar_toy(w: f64) -> NetworkParams {
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

    fn cfg(t_f: usize) -> ForwardConfig {
        ForwardConfig {
            t_f,
            hyper: NeuronHyper::forward_default(),
        }
    }

    #[test]
    fn scalar_toy_reaches_two_thirds() {
        let p = scalar_toy(0.5);
        let rec = forward_stage(&p, &encode_constant(array![1.0].view()), &cfg(1000), &DropoutMasks::identity_for(&p)).unwrap();
        assert!((rec.alpha[0][0] - 2.0 / 3.0).abs() <= 0.002, "{}", rec.alpha[0][0]);
        assert_eq!(rec.masks[0][0], 1.0);
    }

    #[test]
    fn zero_input_is_silent() {
        let mut p = build_network(&[5, 4, 3], 2, true, 1).unwrap();
        p.readout_bias = array![0.25, -1.0];
        let rec = forward_stage(&p, &encode_constant(Array1::zeros(5).view()), &cfg(50), &DropoutMasks::identity_for(&p)).unwrap();
        assert!(rec.alpha.iter().all(|a| a.iter().all(|&v| v == 0.0)));
        assert_eq!(rec.o, p.readout_bias);
        assert_eq!(rec.total_spikes(), 0);
    }

    #[test]
    fn rates_are_multiples_of_one_over_t() {
        let p = build_network(&[6, 8, 5], 3, true, 2).unwrap();
        let x = array![1.0, 0.2, 0.0, 0.7, 0.9, 0.4];
        let rec = forward_stage(&p, &encode_constant(x.view()), &cfg(37), &DropoutMasks::identity_for(&p)).unwrap();
        for a in &rec.alpha {
            for &v in a {
                let k = v * 37.0;
                assert!((k - k.round()).abs() < 1e-9);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn readout_matches_time_accumulation() {
        let p = build_network(&[6, 8, 5], 3, true, 2).unwrap();
        let x = array![1.0, 0.2, 0.0, 0.7, 0.9, 0.4];
        let rec = forward_stage(&p, &encode_constant(x.view()), &cfg(64), &DropoutMasks::identity_for(&p)).unwrap();
        let o = readout(rec.alpha_last().view(), &p).unwrap();
        for (a, b) in o.iter().zip(rec.o.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_and_sequence_inputs_agree() {
        let p = build_network(&[4, 6], 2, true, 5).unwrap();
        let x = array![0.3, 1.0, 0.5, 0.8];
        let seq = InputStream::Sequence(vec![x.clone(); 30]);
        let d = DropoutMasks::identity_for(&p);
        let a = forward_stage(&p, &encode_constant(x.view()), &cfg(30), &d).unwrap();
        let b = forward_stage(&p, &seq, &cfg(30), &d).unwrap();
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.o, b.o);
        assert_eq!(a.x_bar, x);
        assert!(a.x_bar.iter().zip(&b.x_bar).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn feedforward_chain_matches_composition() {
        // f1(x) = σ(0.8/2) = 0.4, f2 = σ((1.5·0.4 + 0.4)/2) = 0.5
        let p = NetworkParams::new(
            vec![
                Layer {
                    weight: LinearOp::new(array![[0.8]]),
                    bias: array![0.0],
                },
                Layer {
                    weight: LinearOp::new(array![[1.5]]),
                    bias: array![0.4],
                },
            ],
            None,
            LinearOp::new(array![[1.0]]),
            array![0.0],
        )
        .unwrap();
        let t_f = 500;
        let rec = forward_stage(&p, &encode_constant(array![1.0].view()), &cfg(t_f), &DropoutMasks::identity_for(&p)).unwrap();
        assert!((rec.alpha[0][0] - 0.4).abs() <= 2.0 / t_f as f64);
        assert!((rec.alpha[1][0] - 0.5).abs() <= 2.0 / t_f as f64);
    }

    #[test]
    fn short_sequence_is_rejected() {
        let p = scalar_toy(0.5);
        let seq = InputStream::Sequence(vec![array![1.0]; 3]);
        assert!(forward_stage(&p, &seq, &cfg(5), &DropoutMasks::identity_for(&p)).is_err());
    }

    #[test]
    fn non_finite_drive_is_reported() {
        let p = scalar_toy(0.5);
        let err = forward_stage(&p, &encode_constant(array![f64::NAN].view()), &cfg(5), &DropoutMasks::identity_for(&p)).unwrap_err();
        assert!(matches!(err, SpideError::NonFinite { layer: 1, .. }));
    }
}
