//! Stage 2: ternary spiking dynamics whose signed rates solve the
//! implicit-differentiation linear system.

use ndarray::Array1;
use rand::Rng;

use crate::error::{check_dim, Result, SpideError};
use crate::forward::ForwardRecord;
use crate::network::{DropoutMasks, NetworkParams};
use crate::neuron::{coupled_pair_update, ternary_update, NeuronHyper};
use crate::rates::RateAccumulator;
use crate::rng;

/// How the ternary neurons are simulated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackwardMode {
    /// Direct ternary update rule.
    #[default]
    Fast,
    /// Two opposed binary neurons with cross-reset per unit.
    CoupledPair,
}

impl std::str::FromStr for BackwardMode {
    type Err = SpideError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Self::Fast),
            "coupled" => Ok(Self::CoupledPair),
            other => Err(SpideError::Config(format!("unknown backward mode `{other}` (fast|coupled)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardConfig {
    pub t_b: usize,
    /// Backward neurons: `v_th_b`, `u_reset_b` and leak.
    pub hyper: NeuronHyper,
    pub mode: BackwardMode,
}

/// Gradient of the (scaled) loss with respect to the readout `o`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub dl_do: Array1<f64>,
}

impl LossGrad {
    pub fn new(dl_do: Array1<f64>) -> Result<Self> {
        if !dl_do.iter().all(|v| v.is_finite()) {
            return Err(SpideError::Contract("loss gradient is not finite".into()));
        }
        Ok(Self { dl_do })
    }

    /// Map into rate space: `g = Wᵒᵀ ∂L/∂o`.
    pub fn to_alpha_space(&self, params: &NetworkParams) -> Result<Array1<f64>> {
        params.readout.apply_transpose(self.dl_do.view())
    }
}

/// Output of stage 2.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardRecord {
    /// Signed (weighted) average rate per hidden layer.
    pub beta: Vec<Array1<f64>>,
    /// Total number of nonzero spikes per layer, both polarities.
    pub spike_counts: Vec<u64>,
    pub t_b: usize,
}

impl BackwardRecord {
    pub fn total_spikes(&self) -> u64 {
        self.spike_counts.iter().sum()
    }
}

/// Run stage 2 with the loss gradient `∂L/∂o` as input.
pub fn backward_stage(
    params: &NetworkParams,
    fwd: &ForwardRecord,
    g: &LossGrad,
    cfg: &BackwardConfig,
    dropout: &DropoutMasks,
) -> Result<BackwardRecord> {
    check_dim("loss gradient", params.output_dim(), g.dl_do.len())?;
    let current = g.to_alpha_space(params)?;
    backward_stage_from_current(params, fwd, &current, cfg, dropout)
}

/// Run stage 2 with a constant current `c` (in the space of `α^N`)
/// injected into the last layer.
///
/// Layer `N` receives `c` plus, from the second step on,
/// `(1/V_u) W¹ᵀ(Dᶠ⊙m¹⊙s¹[t−1])`; layer `l < N` receives
/// `(1/V_u) F^{l+1}ᵀ(D^{l+1}⊙m^{l+1}⊙s^{l+1}[t])`. Layers are updated from
/// `N` down to 1 within a step.
pub fn backward_stage_from_current(
    params: &NetworkParams,
    fwd: &ForwardRecord,
    current: &Array1<f64>,
    cfg: &BackwardConfig,
    dropout: &DropoutMasks,
) -> Result<BackwardRecord> {
    if cfg.t_b == 0 {
        return Err(SpideError::Contract("t_b must be at least 1".into()));
    }
    cfg.hyper.validate()?;
    dropout.check_shapes(params)?;
    let widths = params.layer_widths();
    let n_layers = widths.len();
    if fwd.masks.len() != n_layers || fwd.alpha.len() != n_layers {
        return Err(SpideError::Contract(format!(
            "forward record has {} mask vectors, network has {n_layers} layers",
            fwd.masks.len()
        )));
    }
    for (l, (m, &n)) in fwd.masks.iter().zip(&widths).enumerate() {
        check_dim(&format!("forward mask {}", l + 1), n, m.len())?;
    }
    check_dim("backward current", widths[n_layers - 1], current.len())?;
    if !current.iter().all(|v| v.is_finite()) {
        return Err(SpideError::NonFinite {
            layer: n_layers,
            step: 0,
        });
    }

    let inv_vu = 1.0 / fwd.v_u;
    // weight carried by an outgoing spike of each neuron: layer 1 spikes
    // travel through W¹ᵀ scaled by Dᶠ, layer l ≥ 2 spikes through Fˡᵀ
    // scaled by Dˡ
    let gain: Vec<Vec<f64>> = (0..n_layers)
        .map(|l| {
            let d = if l == 0 { &dropout.feedback } else { &dropout.layers[l] };
            d.iter().zip(&fwd.masks[l]).map(|(a, m)| a * m * inv_vu).collect()
        })
        .collect();
    let hyper = &cfg.hyper;
    let mut rates: Vec<RateAccumulator> = widths.iter().map(|&n| RateAccumulator::new(n, hyper.leak)).collect();
    let mut spike_counts = vec![0u64; n_layers];
    let mut emitted: Vec<Vec<(usize, f64)>> = widths.iter().map(|&n| Vec::with_capacity(n)).collect();
    let mut drive = vec![0.0; widths.iter().copied().max().unwrap_or(0)];

    enum State {
        Fast(Vec<Vec<f64>>),
        Pair(Vec<Vec<f64>>, Vec<Vec<f64>>),
    }
    let mut state = match cfg.mode {
        BackwardMode::Fast => State::Fast(widths.iter().map(|&n| vec![0.0; n]).collect()),
        BackwardMode::CoupledPair => State::Pair(
            widths.iter().map(|&n| vec![0.0; n]).collect(),
            widths.iter().map(|&n| vec![0.0; n]).collect(),
        ),
    };

    let current = current.as_slice().expect("contiguous");
    for t in 0..cfg.t_b {
        for l in (0..n_layers).rev() {
            let n = widths[l];
            let d = &mut drive[..n];
            if l == n_layers - 1 {
                d.copy_from_slice(current);
                if t > 0 {
                    if let Some(w1) = &params.feedback {
                        // s¹[t−1] is still held in emitted[0]
                        w1.accumulate_rows_weighted(&emitted[0], d);
                    }
                }
            } else {
                d.iter_mut().for_each(|v| *v = 0.0);
                params.layers[l + 1].weight.accumulate_rows_weighted(&emitted[l + 1], d);
            }
            if !d.iter().all(|v| v.is_finite()) {
                return Err(SpideError::NonFinite {
                    layer: l + 1,
                    step: t + 1,
                });
            }
            let out = &mut emitted[l];
            out.clear();
            rates[l].begin_step();
            let g = &gain[l];
            match &mut state {
                State::Fast(u) => {
                    for (i, (ui, &di)) in u[l].iter_mut().zip(d.iter()).enumerate() {
                        let (s, next) = ternary_update(*ui, di, hyper);
                        *ui = next;
                        if s != 0 {
                            record_spike(i, s, g, out, &mut rates[l]);
                        }
                    }
                }
                State::Pair(pos, neg) => {
                    for (i, ((p, q), &di)) in pos[l].iter_mut().zip(neg[l].iter_mut()).zip(d.iter()).enumerate() {
                        let s = coupled_pair_update(p, q, di, hyper);
                        if s != 0 {
                            record_spike(i, s, g, out, &mut rates[l]);
                        }
                    }
                }
            }
            spike_counts[l] += out.len() as u64;
        }
    }

    Ok(BackwardRecord {
        beta: rates.iter().map(|r| r.rates()).collect(),
        spike_counts,
        t_b: cfg.t_b,
    })
}

#[inline]
fn record_spike(i: usize, s: i8, gain: &[f64], out: &mut Vec<(usize, f64)>, rates: &mut RateAccumulator) {
    let s = f64::from(s);
    rates.add(i, s);
    // spikes of masked-out neurons still count towards β and energy but
    // carry zero weight downstream
    out.push((i, s * gain[i]));
}

/// Hypothesis check for the backward consistency bound.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardDiagnostics {
    /// `max(‖(M¹Dᶠ W¹)ᵀ‖∞, ‖(MˡDˡFˡ)ᵀ‖∞) / V_u`.
    pub inf_norm_ratio: f64,
    /// `‖g‖∞` with `g` in rate space.
    pub g_inf: f64,
    /// `‖g‖∞ ≤ 1 − λ^N` with `λ = inf_norm_ratio < 1`.
    pub hypothesis_holds: bool,
}

pub fn backward_diagnostics(
    params: &NetworkParams,
    masks: &[Array1<f64>],
    dropout: &DropoutMasks,
    v_u: f64,
    current: &Array1<f64>,
) -> BackwardDiagnostics {
    let n = params.num_layers();
    // ‖(diag(r) W)ᵀ‖∞ = max_j Σ_i |r_i W_ij|
    let masked_inf = |w: &ndarray::Array2<f64>, row_scale: &[f64]| -> f64 {
        (0..w.ncols())
            .map(|j| w.column(j).iter().zip(row_scale).map(|(x, r)| (x * r).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let mut lambda: f64 = 0.0;
    if let Some(w1) = &params.feedback {
        let scale: Vec<f64> = dropout.feedback.iter().zip(&masks[0]).map(|(a, b)| a * b).collect();
        lambda = lambda.max(masked_inf(w1.weight(), &scale));
    }
    for l in 1..n {
        let scale: Vec<f64> = dropout.layers[l].iter().zip(&masks[l]).map(|(a, b)| a * b).collect();
        lambda = lambda.max(masked_inf(params.layers[l].weight.weight(), &scale));
    }
    lambda /= v_u;
    let g_inf = current.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    BackwardDiagnostics {
        inf_norm_ratio: lambda,
        g_inf,
        hypothesis_holds: lambda < 1.0 && g_inf <= 1.0 - lambda.powi(n as i32),
    }
}

/// Drive family for the reset-potential probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DriveFamily {
    /// Constant drives uniform in `(0, max)`.
    Positive { max: f64 },
    /// Constant drives uniform in `(−max, max)`.
    Symmetric { max: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub family: DriveFamily,
    pub t_b: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Error statistics of `β[T_B] − β*` for one reset choice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeStats {
    pub v_th_b: f64,
    pub u_reset_b: f64,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// Standard error of the mean.
    pub stderr: f64,
    pub trials: usize,
}

impl ProbeStats {
    /// `|mean| / stderr`, or 0 when the errors are identically zero.
    pub fn z_score(&self) -> f64 {
        if self.stderr == 0.0 {
            if self.mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.mean.abs() / self.stderr
        }
    }
}

/// Monte-Carlo estimate of the bias and variance of a single ternary
/// neuron's rate for each `(v_th_b, u_reset_b)` choice.
///
/// Every choice sees the same drives. The oracle rate is `φ(g / V_u^b)`,
/// the clipped solution of the one-neuron linear system.
pub fn reset_bias_probe(resets: &[(f64, f64)], cfg: &ProbeConfig) -> Result<Vec<ProbeStats>> {
    if cfg.trials < 100 {
        return Err(SpideError::Config(format!("probe needs at least 100 trials, got {}", cfg.trials)));
    }
    if cfg.t_b == 0 {
        return Err(SpideError::Config("probe needs t_b >= 1".into()));
    }
    let mut rng = rng::stream(cfg.seed, rng::DOMAIN_PROBE, 0, 0);
    let drives: Vec<f64> = (0..cfg.trials)
        .map(|_| match cfg.family {
            DriveFamily::Positive { max } => rng.random::<f64>() * max,
            DriveFamily::Symmetric { max } => (2.0 * rng.random::<f64>() - 1.0) * max,
        })
        .collect();
    resets
        .iter()
        .map(|&(v_th_b, u_reset_b)| {
            let hyper = NeuronHyper::new(v_th_b, u_reset_b, 1.0)?;
            let v_u = hyper.v_u();
            let errors: Vec<f64> = drives
                .iter()
                .map(|&g| {
                    let mut u = 0.0;
                    let mut sum = 0i64;
                    for _ in 0..cfg.t_b {
                        let (s, next) = ternary_update(u, g, &hyper);
                        u = next;
                        sum += i64::from(s);
                    }
                    let beta = sum as f64 / cfg.t_b as f64;
                    beta - (g / v_u).clamp(-1.0, 1.0)
                })
                .collect();
            let n = errors.len() as f64;
            let mean = errors.iter().sum::<f64>() / n;
            let variance = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Ok(ProbeStats {
                v_th_b,
                u_reset_b,
                mean,
                variance,
                stderr: (variance / n).sqrt(),
                trials: cfg.trials,
            })
        })
        .collect()
}
