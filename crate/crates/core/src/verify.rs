//! Property suites comparing the spiking stages against the oracle.
//!
//! Each suite returns a [`SuiteReport`] of named checks with the measured
//! value and the bound it was held to. The same functions back the
//! `verify` subcommand and the acceptance tests.

use std::fmt::Write as _;

use ndarray::{array, Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backward::{
    backward_diagnostics, backward_stage_from_current, reset_bias_probe, BackwardConfig, BackwardMode, DriveFamily,
    ProbeConfig,
};
use crate::error::{Result, SpideError};
use crate::forward::{encode_constant, forward_stage, ForwardConfig, ForwardRecord};
use crate::network::{certify_convergence, DropoutMasks, Layer, LinearOp, NetworkParams};
use crate::neuron::{coupled_pair_step, ternary_step, CoupledPairState, NeuronHyper, NeuronState};
use crate::oracle::{self, EquilibriumOptions, EquilibriumSolution, ImplicitOptions};
use crate::rng;
use crate::trainer::scalar_toy_params;
use crate::training::{assemble_gradients, finite_diff_check, loss_and_grad, one_hot, FiniteDiffConfig};

/// Domain for verification instances, keyed `(instance, purpose)`.
const DOMAIN_VERIFY: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
    Within(f64, f64),
}

impl Bound {
    fn holds(self, v: f64) -> bool {
        match self {
            Bound::AtMost(b) => v <= b,
            Bound::AtLeast(b) => v >= b,
            Bound::Within(lo, hi) => (lo..=hi).contains(&v),
        }
    }
}

impl std::fmt::Display for Bound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bound::AtMost(b) => write!(f, "<={b}"),
            Bound::AtLeast(b) => write!(f, ">={b}"),
            Bound::Within(lo, hi) => write!(f, "[{lo},{hi}]"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    /// Extra `key=value` measurements that are reported but not asserted.
    pub info: Vec<(String, f64)>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        Self {
            suite: suite.into(),
            ..Default::default()
        }
    }

    pub fn check(&mut self, name: impl Into<String>, value: f64, bound: Bound) {
        self.checks.push(Check {
            name: name.into(),
            value,
            bound,
            passed: bound.holds(value),
        });
    }

    pub fn info(&mut self, name: impl Into<String>, value: f64) {
        self.info.push((name.into(), value));
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn merge(&mut self, other: SuiteReport) {
        let prefix = other.suite.clone();
        self.checks.extend(other.checks.into_iter().map(|mut c| {
            c.name = format!("{prefix}.{}", c.name);
            c
        }));
        self.info
            .extend(other.info.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)));
    }

    /// One line per check and per measurement, then a verdict line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "suite={} check={} value={} bound={} result={}",
                self.suite,
                c.name,
                c.value,
                c.bound,
                if c.passed { "pass" } else { "fail" }
            );
        }
        for (k, v) in &self.info {
            let _ = writeln!(s, "suite={} info={k} value={v}", self.suite);
        }
        let _ = writeln!(s, "suite={} result={}", self.suite, if self.passed() { "pass" } else { "fail" });
        s
    }
}

/// A network together with the constant input it is driven by.
#[derive(Clone, Debug)]
pub struct Instance {
    pub params: NetworkParams,
    pub x: Array1<f64>,
}

fn gaussian(rows: usize, cols: usize, r: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(r))
}

/// `max(‖A‖∞, ‖Aᵀ‖∞)`.
fn max_abs_row_col_sum(a: &Array2<f64>) -> f64 {
    let rows = a.rows().into_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>());
    let cols = a.columns().into_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Random feedback network with 1–3 layers of 2–`max_width` neurons.
///
/// `W¹` and every `Fˡ` with `l ≥ 2` are scaled so that both their row and
/// column absolute sums are at most `ρ·V_u` with `ρ ∈ [0.3, 0.9]`. That
/// bounds every spectral norm by `ρ·V_u` as well, so the forward
/// certificate holds and the masked ∞-norms of the backward bounds are
/// below 1.
pub fn random_certified_instance(r: &mut impl Rng, v_u: f64, max_layers: usize, max_width: usize) -> Result<Instance> {
    let n_layers = r.random_range(1..=max_layers);
    let input = r.random_range(2..=16);
    let widths: Vec<usize> = (0..n_layers).map(|_| r.random_range(2..=max_width)).collect();
    let classes = 3;
    fn scaled(rows: usize, cols: usize, v_u: f64, r: &mut impl Rng) -> Array2<f64> {
        let mut w = gaussian(rows, cols, r);
        let rho = 0.3 + 0.6 * r.random::<f64>();
        let s = max_abs_row_col_sum(&w);
        w *= rho * v_u / s;
        w
    }
    let mut layers = Vec::with_capacity(n_layers);
    let mut prev = input;
    for (l, &n) in widths.iter().enumerate() {
        let weight = if l == 0 {
            let mut f = gaussian(n, input, r);
            f /= (input as f64).sqrt();
            f * v_u
        } else {
            scaled(n, prev, v_u, r)
        };
        let bias = Array1::from_shape_simple_fn(n, || (r.random::<f64>() * 2.0 - 0.6) * v_u);
        layers.push(Layer {
            weight: LinearOp::new(weight),
            bias,
        });
        prev = n;
    }
    let feedback = scaled(widths[0], widths[n_layers - 1], v_u, r);
    let readout = gaussian(classes, widths[n_layers - 1], r);
    let params = NetworkParams::new(
        layers,
        Some(LinearOp::new(feedback)),
        LinearOp::new(readout),
        Array1::zeros(classes),
    )?;
    let x = Array1::from_shape_simple_fn(input, || r.random::<f64>());
    Ok(Instance { params, x })
}

fn instance(seed: u64, i: usize, v_u: f64, max_layers: usize, max_width: usize) -> Result<Instance> {
    let mut r = rng::stream(seed, DOMAIN_VERIFY, i as u64, 0);
    let inst = random_certified_instance(&mut r, v_u, max_layers, max_width)?;
    let cert = certify_convergence(&inst.params, &NeuronHyper::new(1.0, 1.0 - v_u, 1.0)?, 50)?;
    if !cert.satisfied {
        return Err(SpideError::Contract(format!(
            "generated instance {i} is not certified (ratio {})",
            cert.contraction_ratio
        )));
    }
    Ok(inst)
}

fn inf_dist(a: &[Array1<f64>], b: &[Array1<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y.iter()))
        .fold(0.0, |m, (p, q)| m.max((p - q).abs()))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

fn forward_run(inst: &Instance, t_f: usize, hyper: &NeuronHyper) -> Result<ForwardRecord> {
    forward_stage(
        &inst.params,
        &encode_constant(inst.x.view()),
        &ForwardConfig { t_f, hyper: *hyper },
        &DropoutMasks::identity_for(&inst.params),
    )
}

fn equilibrium(inst: &Instance, v_u: f64) -> Result<EquilibriumSolution> {
    oracle::solve_equilibrium(
        &inst.params,
        inst.x.view(),
        &DropoutMasks::identity_for(&inst.params),
        v_u,
        &EquilibriumOptions::default(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoupledPairOptions {
    pub seed: u64,
    pub sequences: usize,
    pub length: usize,
    pub max_drive: f64,
}

impl Default for CoupledPairOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            sequences: 10_000,
            length: 200,
            max_drive: 2.0,
        }
    }
}

/// Coupled pairs against the direct ternary rule on random drive
/// sequences; every spike and every potential must agree exactly.
pub fn coupled_pair_suite(opts: &CoupledPairOptions) -> Result<SuiteReport> {
    let hyper = NeuronHyper::backward_default();
    let mut r = rng::stream(opts.seed, DOMAIN_VERIFY, 0, 1);
    let n = opts.sequences;
    let mut pair = CoupledPairState::zeros(n);
    let mut direct = NeuronState::zeros(n);
    let mut spike_mismatches = 0u64;
    let mut state_mismatches = 0u64;
    let mut spikes = 0u64;
    for _ in 0..opts.length {
        let drive: Vec<f64> = (0..n).map(|_| r.random_range(-opts.max_drive..=opts.max_drive)).collect();
        let (sp, np) = coupled_pair_step(&pair, &drive, &hyper)?;
        let (sd, nd) = ternary_step(&direct, &drive, &hyper)?;
        spike_mismatches += sp.values().iter().zip(sd.values()).filter(|(a, b)| a != b).count() as u64;
        state_mismatches += np.positive.u.iter().zip(&nd.u).filter(|(a, b)| a != b).count() as u64;
        spikes += sd.active_count() as u64;
        pair = np;
        direct = nd;
    }
    let mut rep = SuiteReport::new("coupled-pair");
    rep.check("spike_mismatches", spike_mismatches as f64, Bound::AtMost(0.0));
    rep.check("potential_mismatches", state_mismatches as f64, Bound::AtMost(0.0));
    rep.info("sequences", n as f64);
    rep.info("spikes", spikes as f64);
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceOptions {
    pub seed: u64,
    pub instances: usize,
    /// Leak of both stages; 1 for IF neurons.
    pub leak: f64,
    /// Step counts at which the error bound is asserted.
    pub steps: Vec<usize>,
    /// Step counts of the log-log slope fit.
    pub slope_steps: Vec<usize>,
    /// Forward error constant: assert `err ≤ c / T`.
    pub forward_c: f64,
    /// Backward error constant: assert `err ≤ c / T`.
    pub backward_c: f64,
    pub slope_band: (f64, f64),
    /// Forward steps used to obtain the masks of the backward stage.
    pub mask_steps: usize,
    pub mode: BackwardMode,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            leak: 1.0,
            steps: vec![100, 1000],
            slope_steps: vec![50, 100, 200, 400, 800, 1600],
            forward_c: 3.0,
            backward_c: 6.0,
            slope_band: (-1.3, -0.7),
            mask_steps: 1000,
            mode: BackwardMode::Fast,
        }
    }
}

impl ConvergenceOptions {
    /// The leaky variant with doubled error constants.
    pub fn lif(seed: u64) -> Self {
        Self {
            seed,
            leak: 0.99,
            forward_c: 6.0,
            backward_c: 12.0,
            ..Default::default()
        }
    }
}

fn forward_hyper(leak: f64) -> Result<NeuronHyper> {
    NeuronHyper::new(1.0, -1.0, leak)
}

fn backward_hyper(leak: f64) -> Result<NeuronHyper> {
    NeuronHyper::new(0.5, -0.5, leak)
}

/// Forward rates against the equilibrium on random certified instances,
/// plus the scalar toy.
pub fn forward_suite(opts: &ConvergenceOptions) -> Result<SuiteReport> {
    let hyper = forward_hyper(opts.leak)?;
    let v_u = hyper.v_u();
    let mut rep = SuiteReport::new("forward");
    let mut worst = vec![0.0f64; opts.steps.len()];
    let mut per_t: Vec<Vec<f64>> = vec![Vec::new(); opts.slope_steps.len()];
    let mut boundary = 0usize;
    for i in 0..opts.instances {
        let inst = instance(opts.seed, i, v_u, 3, 64)?;
        let eq = equilibrium(&inst, v_u)?;
        boundary += eq.boundary_count();
        for (k, &t) in opts.steps.iter().enumerate() {
            let fwd = forward_run(&inst, t, &hyper)?;
            worst[k] = worst[k].max(inf_dist(&fwd.alpha, &eq.alpha_star) * t as f64);
        }
        for (k, &t) in opts.slope_steps.iter().enumerate() {
            let fwd = forward_run(&inst, t, &hyper)?;
            per_t[k].push(inf_dist(&fwd.alpha, &eq.alpha_star));
        }
    }
    for (k, &t) in opts.steps.iter().enumerate() {
        rep.check(format!("max_err_times_t[t={t}]"), worst[k], Bound::AtMost(opts.forward_c));
    }
    let medians: Vec<f64> = per_t.iter_mut().map(|v| median(v)).collect();
    let ts: Vec<f64> = opts.slope_steps.iter().map(|&t| t as f64).collect();
    rep.info("median_err_slope", log_log_slope(&ts, &medians));
    rep.info("boundary_entries", boundary as f64);

    let toy = Instance {
        params: scalar_toy_params(true),
        x: array![1.0],
    };
    for &t in &opts.steps {
        let fwd = forward_run(&toy, t, &hyper)?;
        rep.check(
            format!("scalar_toy_alpha_err_times_t[t={t}]"),
            (fwd.alpha[0][0] - 2.0 / 3.0).abs() * t as f64,
            Bound::AtMost(2.0 * opts.forward_c / 3.0),
        );
    }
    Ok(rep)
}

/// Rate-space current for an instance, scaled to the consistency
/// hypothesis `‖g‖∞ ≤ 1 − λ^N` (with 10% margin) of the masked system.
fn scaled_current(inst: &Instance, masks: &[Array1<f64>], v_u: f64, r: &mut impl Rng) -> Result<(Array1<f64>, bool)> {
    let n = inst.params.last_width();
    let raw = Array1::from_shape_simple_fn(n, || r.random_range(-1.0..=1.0));
    let d = DropoutMasks::identity_for(&inst.params);
    let diag = backward_diagnostics(&inst.params, masks, &d, v_u, &raw);
    let lambda = diag.inf_norm_ratio;
    let target = if lambda < 1.0 {
        0.9 * (1.0 - lambda.powi(inst.params.num_layers() as i32))
    } else {
        0.05
    };
    let scale = target / diag.g_inf.max(f64::MIN_POSITIVE);
    let g = raw * scale;
    let holds = backward_diagnostics(&inst.params, masks, &d, v_u, &g).hypothesis_holds;
    Ok((g, holds))
}

/// Backward rates against the implicit solve, per layer, on the same
/// instances as [`forward_suite`], plus the scalar toy.
///
/// The reference system uses the masks of the forward record that feeds the
/// backward stage, so the check isolates the second stage.
pub fn backward_suite(opts: &ConvergenceOptions) -> Result<SuiteReport> {
    let fh = forward_hyper(opts.leak)?;
    let bh = backward_hyper(opts.leak)?;
    let v_u = fh.v_u();
    let mut rep = SuiteReport::new("backward");
    let mut worst = vec![0.0f64; opts.steps.len()];
    let mut per_t: Vec<Vec<f64>> = vec![Vec::new(); opts.slope_steps.len()];
    let mut hypothesis = 0usize;
    for i in 0..opts.instances {
        let inst = instance(opts.seed, i, v_u, 3, 64)?;
        let fwd = forward_run(&inst, opts.mask_steps, &fh)?;
        let d = DropoutMasks::identity_for(&inst.params);
        let mut r = rng::stream(opts.seed, DOMAIN_VERIFY, i as u64, 2);
        let (g, holds) = scaled_current(&inst, &fwd.masks, v_u, &mut r)?;
        hypothesis += usize::from(holds);
        let imp = oracle::solve_implicit_with_masks(&inst.params, &fwd.masks, &d, v_u, &g, &ImplicitOptions::default())?;
        let run = |t_b: usize| -> Result<f64> {
            let cfg = BackwardConfig {
                t_b,
                hyper: bh,
                mode: opts.mode,
            };
            let bwd = backward_stage_from_current(&inst.params, &fwd, &g, &cfg, &d)?;
            Ok(inf_dist(&bwd.beta, &imp.beta_star))
        };
        for (k, &t) in opts.steps.iter().enumerate() {
            worst[k] = worst[k].max(run(t)? * t as f64);
        }
        for (k, &t) in opts.slope_steps.iter().enumerate() {
            per_t[k].push(run(t)?);
        }
    }
    for (k, &t) in opts.steps.iter().enumerate() {
        rep.check(format!("max_err_times_t[t={t}]"), worst[k], Bound::AtMost(opts.backward_c));
    }
    let medians: Vec<f64> = per_t.iter_mut().map(|v| median(v)).collect();
    let ts: Vec<f64> = opts.slope_steps.iter().map(|&t| t as f64).collect();
    let slope = log_log_slope(&ts, &medians);
    rep.check("median_err_slope", slope, Bound::Within(opts.slope_band.0, opts.slope_band.1));
    rep.info("hypothesis_holds", hypothesis as f64);
    rep.info("instances", opts.instances as f64);

    // scalar toy: g = 0.3 on the identity readout
    let toy = Instance {
        params: scalar_toy_params(true),
        x: array![1.0],
    };
    let fwd = forward_run(&toy, opts.mask_steps, &fh)?;
    let d = DropoutMasks::identity_for(&toy.params);
    for &t in &opts.steps {
        let cfg = BackwardConfig {
            t_b: t,
            hyper: bh,
            mode: opts.mode,
        };
        let bwd = backward_stage_from_current(&toy.params, &fwd, &array![0.3], &cfg, &d)?;
        rep.check(
            format!("scalar_toy_beta_err_times_t[t={t}]"),
            (bwd.beta[0][0] - 0.4).abs() * t as f64,
            Bound::AtMost(opts.backward_c / 2.0),
        );
    }
    Ok(rep)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradOptions {
    pub seed: u64,
    /// Number of random nets for the spike-level comparison.
    pub seeds: usize,
    pub t_f: usize,
    pub t_b: usize,
    /// Bound on the median relative error of the spike-level gradients.
    pub spike_tol: f64,
    /// Number of random nets for the finite-difference comparison.
    pub fd_nets: usize,
    pub fd_tol: f64,
}

impl Default for GradOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 20,
            t_f: 500,
            t_b: 500,
            spike_tol: 0.05,
            fd_nets: 5,
            fd_tol: 1e-4,
        }
    }
}

/// Gradient checks: oracle gradients against finite differences, the
/// scalar toy value, and spike-level gradients against oracle gradients.
pub fn grad_suite(opts: &GradOptions) -> Result<SuiteReport> {
    let hyper = NeuronHyper::forward_default();
    let v_u = hyper.v_u();
    let mut rep = SuiteReport::new("grad");

    // formula level: finite differences of the oracle loss
    let mut fd_worst = 0.0f64;
    let mut compared = 0usize;
    for i in 0..opts.fd_nets {
        let mut r = rng::stream(opts.seed, DOMAIN_VERIFY, i as u64, 3);
        let mut inst = random_certified_instance(&mut r, v_u, 3, 12)?;
        while inst.params.num_layers() < 3 {
            inst = random_certified_instance(&mut r, v_u, 3, 12)?;
        }
        let y = one_hot(r.random_range(0..inst.params.output_dim()), inst.params.output_dim());
        let rep_fd = finite_diff_check(
            &inst.params,
            inst.x.view(),
            y.view(),
            &FiniteDiffConfig {
                eps: 1e-6,
                loss_scale: 1.0,
                v_u,
            },
        )?;
        fd_worst = fd_worst.max(rep_fd.max_rel_err);
        compared += rep_fd.compared;
    }
    rep.check("fd_max_rel_err", fd_worst, Bound::AtMost(opts.fd_tol));
    rep.info("fd_compared", compared as f64);

    // scalar toy: dL/dα = 0.3 through the identity readout
    let toy = scalar_toy_params(true);
    let d = DropoutMasks::identity_for(&toy);
    let x = array![1.0];
    let eq = oracle::solve_equilibrium(&toy, x.view(), &d, v_u, &EquilibriumOptions::default())?;
    let g = array![0.3];
    let imp = oracle::solve_implicit(&toy, &eq, &d, v_u, &g, &ImplicitOptions::default())?;
    let grads = oracle::oracle_gradients(&toy, &eq, &imp, x.view(), &g, &d, v_u)?;
    let assembled = grads.feedback.as_ref().map_or(f64::NAN, |w| w[[0, 0]]);
    let alpha_at = |w: f64| -> Result<f64> {
        let mut p = toy.clone();
        if let Some(fb) = &mut p.feedback {
            fb.weight_mut()[[0, 0]] = w;
        }
        let eq = oracle::solve_equilibrium(&p, x.view(), &d, v_u, &EquilibriumOptions {
            tol: 1e-15,
            ..Default::default()
        })?;
        Ok(eq.alpha_star[0][0])
    };
    let h = 1e-5;
    let numeric = 0.3 * (alpha_at(0.5 + h)? - alpha_at(0.5 - h)?) / (2.0 * h);
    rep.check("scalar_toy_grad_w_assembled_err", (assembled - 2.0 / 15.0).abs(), Bound::AtMost(1e-10));
    rep.check("scalar_toy_grad_w_numeric_err", (numeric - 2.0 / 15.0).abs(), Bound::AtMost(1e-8));

    // spike level
    let fh = hyper;
    let bh = NeuronHyper::backward_default();
    let mut errs = Vec::with_capacity(opts.seeds);
    let mut hidden_errs = Vec::with_capacity(opts.seeds);
    for s in 0..opts.seeds {
        let mut r = rng::stream(opts.seed, DOMAIN_VERIFY, s as u64, 4);
        let inst = random_certified_instance(&mut r, v_u, 2, 8)?;
        let p = &inst.params;
        let d = DropoutMasks::identity_for(p);
        let y = one_hot(r.random_range(0..p.output_dim()), p.output_dim());
        let eq = oracle::solve_equilibrium(p, inst.x.view(), &d, v_u, &EquilibriumOptions::default())?;
        // pick the loss scale that puts the current at the hypothesis bound
        let o_star = crate::forward::readout(eq.alpha_last().view(), p)?;
        let (_, g1) = loss_and_grad(o_star.view(), y.view(), 1.0)?;
        let c1 = g1.to_alpha_space(p)?;
        let diag = backward_diagnostics(p, &eq.masks(), &d, v_u, &c1);
        let lambda = diag.inf_norm_ratio.min(0.99);
        let loss_scale = 0.9 * (1.0 - lambda.powi(p.num_layers() as i32)) / diag.g_inf.max(1e-12);

        let (_, g_star) = loss_and_grad(o_star.view(), y.view(), loss_scale)?;
        let current = g_star.to_alpha_space(p)?;
        let imp = oracle::solve_implicit(p, &eq, &d, v_u, &current, &ImplicitOptions::default())?;
        let reference = oracle::oracle_gradients(p, &eq, &imp, inst.x.view(), &g_star.dl_do, &d, v_u)?;

        let fwd = forward_run(&inst, opts.t_f, &fh)?;
        let (_, g) = loss_and_grad(fwd.o.view(), y.view(), loss_scale)?;
        let bwd = crate::backward::backward_stage(
            p,
            &fwd,
            &g,
            &BackwardConfig {
                t_b: opts.t_b,
                hyper: bh,
                mode: BackwardMode::Fast,
            },
            &d,
        )?;
        let spike = assemble_gradients(p, &fwd, &bwd, &g, &d)?;
        errs.push(spike.relative_error(&reference));
        hidden_errs.push(spike.hidden_relative_error(&reference));
    }
    rep.check("spike_median_rel_err", median(&mut errs), Bound::AtMost(opts.spike_tol));
    rep.info("spike_median_hidden_rel_err", median(&mut hidden_errs));
    rep.info("spike_max_rel_err", errs.iter().copied().fold(0.0, f64::max));
    Ok(rep)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResetBiasOptions {
    pub seed: u64,
    pub trials: usize,
    pub t_b: usize,
}

impl Default for ResetBiasOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 4000,
            t_b: 50,
        }
    }
}

/// Bias and variance of a ternary neuron's rate for the symmetric reset
/// `(0.5, −0.5)` and the zero reset `(1, 0)`; both have `V_u^b = 1`.
///
/// Bias is measured on positive drives, where the zero reset leaves a
/// one-sided residual. Variance is compared on symmetric drives, where
/// the zero reset's residual range spans both signs.
pub fn reset_bias_suite(opts: &ResetBiasOptions) -> Result<SuiteReport> {
    let resets = [(0.5, -0.5), (1.0, 0.0)];
    let positive = reset_bias_probe(
        &resets,
        &ProbeConfig {
            family: DriveFamily::Positive { max: 0.9 },
            t_b: opts.t_b,
            trials: opts.trials,
            seed: opts.seed,
        },
    )?;
    let symmetric = reset_bias_probe(
        &resets,
        &ProbeConfig {
            family: DriveFamily::Symmetric { max: 0.9 },
            t_b: opts.t_b,
            trials: opts.trials,
            seed: opts.seed,
        },
    )?;
    let mut rep = SuiteReport::new("reset-bias");
    rep.check("symmetric_reset_bias_z", positive[0].z_score(), Bound::AtMost(3.0));
    rep.check("zero_reset_bias_z", positive[1].z_score(), Bound::AtLeast(5.0));
    rep.check(
        "variance_ratio_symmetric_over_zero",
        symmetric[0].variance / symmetric[1].variance,
        Bound::AtMost(1.0),
    );
    rep.info("symmetric_reset_mean", positive[0].mean);
    rep.info("zero_reset_mean", positive[1].mean);
    rep.info("symmetric_reset_variance", symmetric[0].variance);
    rep.info("zero_reset_variance", symmetric[1].variance);
    rep.info("trials", opts.trials as f64);
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::spectral_norm;

    #[test]
    fn generated_instances_are_certified() {
        for i in 0..20 {
            let inst = instance(3, i, 2.0, 3, 64).unwrap();
            let w1 = inst.params.feedback.as_ref().unwrap().weight();
            assert!(spectral_norm(w1, 100) <= 0.9 * 2.0 + 1e-9);
        }
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 / v).collect();
        assert!((log_log_slope(&x, &y) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_suites_pass() {
        let c = coupled_pair_suite(&CoupledPairOptions {
            sequences: 200,
            length: 50,
            ..Default::default()
        })
        .unwrap();
        assert!(c.passed(), "{}", c.to_text());
        let opts = ConvergenceOptions {
            instances: 5,
            ..Default::default()
        };
        let f = forward_suite(&opts).unwrap();
        assert!(f.passed(), "{}", f.to_text());
    }

    #[test]
    fn report_text_is_line_oriented() {
        let mut r = SuiteReport::new("x");
        r.check("a", 1.0, Bound::AtMost(2.0));
        r.check("b", 3.0, Bound::AtMost(2.0));
        let t = r.to_text();
        assert!(t.contains("check=a value=1 bound=<=2 result=pass"));
        assert!(t.ends_with("suite=x result=fail\n"));
    }
}
