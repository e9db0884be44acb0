//! Discrete-time integrate-and-fire neurons.
//!
//! Both simulation stages are built from the same update:
//!
//! ```text
//! u[t+1] = leak * (u[t] - (v_th - u_reset) * s[t]) + drive[t+1]
//! ```
//!
//! The stored potential is always the post-reset value, so one step is
//! "leak, add drive, fire, subtract reset". Forward neurons emit binary
//! spikes and fire on `u >= v_th`. Backward neurons are ternary: they fire
//! `+1` above `v_th`, `-1` below `-v_th` and stay silent on the closed band
//! `|u| <= v_th`.
//!
//! A ternary neuron can be realised with two ordinary neurons that receive
//! opposite drive and reset each other through a cross connection of weight
//! `v_th - u_reset`; see [`CoupledPairState`].

use crate::error::{check_dim, Result, SpideError};

/// Threshold, reset potential and leak of a neuron population.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronHyper {
    pub v_th: f64,
    pub u_reset: f64,
    /// Multiplicative leak in (0, 1]; 1 is the plain IF neuron.
    pub leak: f64,
}

impl NeuronHyper {
    pub fn new(v_th: f64, u_reset: f64, leak: f64) -> Result<Self> {
        let hyper = Self {
            v_th,
            u_reset,
            leak,
        };
        hyper.validate()?;
        Ok(hyper)
    }

    /// Forward-stage defaults: `v_th = 1`, `u_reset = -1`, no leak.
    pub const fn forward_default() -> Self {
        Self {
            v_th: 1.0,
            u_reset: -1.0,
            leak: 1.0,
        }
    }

    /// Backward-stage defaults: `v_th = 0.5`, `u_reset = -0.5`, no leak.
    pub const fn backward_default() -> Self {
        Self {
            v_th: 0.5,
            u_reset: -0.5,
            leak: 1.0,
        }
    }

    pub fn with_leak(mut self, leak: f64) -> Self {
        self.leak = leak;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_th.is_finite() && self.u_reset.is_finite() && self.leak.is_finite()) {
            return Err(SpideError::Config("neuron hyperparameters must be finite".into()));
        }
        if self.v_th <= 0.0 {
            return Err(SpideError::Config(format!("v_th must be positive, got {}", self.v_th)));
        }
        if self.v_th - self.u_reset <= 0.0 {
            return Err(SpideError::Config(format!(
                "v_th - u_reset must be positive, got {} - {}",
                self.v_th, self.u_reset
            )));
        }
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return Err(SpideError::Config(format!("leak must lie in (0, 1], got {}", self.leak)));
        }
        Ok(())
    }

    /// Reset amplitude `v_th - u_reset`.
    #[inline]
    pub fn v_u(&self) -> f64 {
        self.v_th - self.u_reset
    }

    pub fn is_leaky(&self) -> bool {
        self.leak < 1.0
    }
}

/// Membrane potentials of a population, stored after reset.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState {
    pub u: Vec<f64>,
}

impl NeuronState {
    pub fn zeros(n: usize) -> Self {
        Self { u: vec![0.0; n] }
    }

    pub fn from_potentials(u: Vec<f64>) -> Self {
        Self { u }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeMode {
    /// Binary spikes in {0, 1}.
    Forward,
    /// Ternary spikes in {-1, 0, 1}.
    Backward,
}

/// Spikes emitted by one population in one time step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeVector {
    values: Vec<i8>,
    mode: SpikeMode,
}

impl SpikeVector {
    pub fn new(values: Vec<i8>, mode: SpikeMode) -> Result<Self> {
        let ok = match mode {
            SpikeMode::Forward => values.iter().all(|&s| s == 0 || s == 1),
            SpikeMode::Backward => values.iter().all(|&s| (-1..=1).contains(&s)),
        };
        if !ok {
            return Err(SpideError::Contract(format!(
                "spike values out of range for {mode:?} mode"
            )));
        }
        Ok(Self { values, mode })
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn mode(&self) -> SpikeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of neurons that emitted a spike of either polarity.
    pub fn active_count(&self) -> usize {
        self.values.iter().filter(|&&s| s != 0).count()
    }
}

/// Single forward-neuron update; returns (fired, post-reset potential).
#[inline]
pub fn if_lif_update(u: f64, drive: f64, hyper: &NeuronHyper) -> (bool, f64) {
    let v = hyper.leak * u + drive;
    if v >= hyper.v_th {
        (true, v - hyper.v_u())
    } else {
        (false, v)
    }
}

/// One step of a forward IF/LIF population.
pub fn if_lif_step(
    state: &NeuronState,
    drive: &[f64],
    hyper: &NeuronHyper,
) -> Result<(SpikeVector, NeuronState)> {
    check_dim("if_lif_step drive", state.len(), drive.len())?;
    let mut u = Vec::with_capacity(state.len());
    let mut spikes = Vec::with_capacity(state.len());
    for (&ui, &di) in state.u.iter().zip(drive) {
        let (fired, next) = if_lif_update(ui, di, hyper);
        spikes.push(fired as i8);
        u.push(next);
    }
    Ok((
        SpikeVector {
            values: spikes,
            mode: SpikeMode::Forward,
        },
        NeuronState { u },
    ))
}

/// Ternary firing rule. The band `|u| <= v_th_b` is silent.
#[inline]
pub fn ternary_fire(u: f64, v_th_b: f64) -> i8 {
    if u > v_th_b {
        1
    } else if u < -v_th_b {
        -1
    } else {
        0
    }
}

/// Single ternary-neuron update; returns (spike, post-reset potential).
#[inline]
pub fn ternary_update(u: f64, drive: f64, hyper: &NeuronHyper) -> (i8, f64) {
    let v = hyper.leak * u + drive;
    match ternary_fire(v, hyper.v_th) {
        1 => (1, v - hyper.v_u()),
        -1 => (-1, v + hyper.v_u()),
        _ => (0, v),
    }
}

/// One step of a population of ternary neurons (direct formula).
pub fn ternary_step(
    state: &NeuronState,
    drive: &[f64],
    hyper: &NeuronHyper,
) -> Result<(SpikeVector, NeuronState)> {
    check_dim("ternary_step drive", state.len(), drive.len())?;
    let mut u = Vec::with_capacity(state.len());
    let mut spikes = Vec::with_capacity(state.len());
    for (&ui, &di) in state.u.iter().zip(drive) {
        let (s, next) = ternary_update(ui, di, hyper);
        spikes.push(s);
        u.push(next);
    }
    Ok((
        SpikeVector {
            values: spikes,
            mode: SpikeMode::Backward,
        },
        NeuronState { u },
    ))
}

/// Two ordinary neurons per ternary unit.
///
/// `positive` receives `+drive`, `negative` receives `-drive`. Each fires on
/// the strict rule `u > v_th` (so the pair reproduces the silent band of the
/// ternary neuron exactly), resets itself by subtraction and resets its
/// partner through an excitatory cross connection of weight `v_th - u_reset`.
/// The emitted ternary spike is `s_pos - s_neg`.
///
/// Invariant: `negative.u[i] == -positive.u[i]` bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledPairState {
    pub positive: NeuronState,
    pub negative: NeuronState,
}

impl CoupledPairState {
    pub fn zeros(n: usize) -> Self {
        Self {
            positive: NeuronState::zeros(n),
            negative: NeuronState::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    pub fn negation_holds(&self) -> bool {
        self.positive.len() == self.negative.len()
            && self
                .positive
                .u
                .iter()
                .zip(&self.negative.u)
                .all(|(&p, &n)| n == -p)
    }
}

/// Update one coupled pair in place and return its ternary output.
#[inline]
pub(crate) fn coupled_pair_update(pos: &mut f64, neg: &mut f64, drive: f64, hyper: &NeuronHyper) -> i8 {
    let v_u = hyper.v_u();
    *pos = hyper.leak * *pos + drive;
    *neg = hyper.leak * *neg + (-drive);
    let fire_pos = *pos > hyper.v_th;
    let fire_neg = *neg > hyper.v_th;
    assert!(
        !(fire_pos && fire_neg),
        "coupled pair fired on both sides; negation invariant broken"
    );
    if fire_pos {
        *pos -= v_u;
        // cross connection from the positive neuron
        *neg += v_u;
        1
    } else if fire_neg {
        *neg -= v_u;
        *pos += v_u;
        -1
    } else {
        0
    }
}

/// One step of a population of coupled pairs.
pub fn coupled_pair_step(
    pair: &CoupledPairState,
    drive: &[f64],
    hyper: &NeuronHyper,
) -> Result<(SpikeVector, CoupledPairState)> {
    check_dim("coupled_pair_step drive", pair.len(), drive.len())?;
    if !pair.negation_holds() {
        return Err(SpideError::Contract(
            "coupled pair state violates the negation invariant".into(),
        ));
    }
    let mut next = pair.clone();
    let mut spikes = Vec::with_capacity(pair.len());
    for (i, &d) in drive.iter().enumerate() {
        let s = coupled_pair_update(&mut next.positive.u[i], &mut next.negative.u[i], d, hyper);
        spikes.push(s);
    }
    Ok((
        SpikeVector {
            values: spikes,
            mode: SpikeMode::Backward,
        },
        next,
    ))
}
