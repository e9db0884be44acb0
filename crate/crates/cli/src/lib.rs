//! `spide` subcommands. Each `cmd_*` writes its report to `out` and returns
//! the process exit code: 0 on success, 1 when a run or suite fails, 2 on a
//! usage or configuration error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{array, Array1};

use spide_core::backward::{backward_stage_from_current, BackwardConfig, BackwardMode};
use spide_core::checkpoint::load_checkpoint;
use spide_core::config::{Preset, RunConfig};
use spide_core::data::{load_mnist_dir, Split};
use spide_core::energy::{energy_report, format_reduction, EnergyModel, REFERENCE_BWD_RATE, REFERENCE_FWD_RATE, REFERENCE_T_B, REFERENCE_T_F};
use spide_core::forward::{encode_constant, forward_stage, readout, ForwardConfig};
use spide_core::network::{certify_convergence, DropoutMasks};
use spide_core::oracle::{self, EquilibriumOptions, ImplicitOptions};
use spide_core::trainer::{build_params, load_datasets, state_map, TrainOptions, Trainer};
use spide_core::training::{assemble_from_rates, loss_and_grad, one_hot};
use spide_core::verify::{self, ConvergenceOptions, CoupledPairOptions, GradOptions, ResetBiasOptions, SuiteReport};
use spide_core::SpideError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "spide", version, about = "Spike-based implicit-differentiation training for feedback SNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network from a config file.
    Train(TrainArgs),
    /// Run a verification suite against the oracle.
    Verify(VerifyArgs),
    /// Energy estimate from recorded or reference firing rates.
    Energy(EnergyArgs),
    /// Compare spiking stages with the oracle on one sample.
    Oracle(OracleArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Checkpoint every N optimizer steps (0: end of epoch only).
    #[arg(long, default_value_t = 0)]
    pub save_every: usize,
    #[arg(long, default_value = "runs/default")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub precision: Option<String>,
    /// Override a config key, e.g. `--set epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct VerifyArgs {
    /// coupled-pair, forward, backward, convergence, lif, grad, reset-bias or all.
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances for the convergence suites.
    #[arg(long)]
    pub instances: Option<usize>,
    /// Backward steps for the spike-level gradient check.
    #[arg(long)]
    pub t_b: Option<usize>,
    /// Monte-Carlo trials for the reset-bias suite.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Drive sequences for the coupled-pair suite.
    #[arg(long)]
    pub sequences: Option<usize>,
    /// Random nets for the spike-level gradient check.
    #[arg(long)]
    pub nets: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct EnergyArgs {
    /// Use the reference rates (0.07 over 30 steps, 0.03 over 50 steps).
    #[arg(long)]
    pub paper_values: bool,
    /// Synaptic operations per backward spike (2 for coupled pairs).
    #[arg(long, default_value_t = 1.0)]
    pub pair_factor: f64,
    /// Read rates from `<run-dir>/latest.ckpt`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Emit one CSV header and row instead of key = value lines.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args, Debug, Clone)]
pub struct OracleArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Test-set sample index (ignored by presets).
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Comma-separated backward step counts; defaults to the config's t_b.
    #[arg(long, value_delimiter = ',')]
    pub t_b: Vec<usize>,
    /// Load parameters from a checkpoint instead of initialising them.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Parse arguments and dispatch. Returns the exit code.
pub fn run_from_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, out),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = write!(out, "{e}");
            code
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> i32 {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Verify(a) => cmd_verify(&a, out),
        Command::Energy(a) => cmd_energy(&a, out),
        Command::Oracle(a) => cmd_oracle(&a, out),
    }
}

fn usage(out: &mut dyn Write, msg: impl std::fmt::Display) -> i32 {
    let _ = writeln!(out, "error: {msg}");
    EXIT_USAGE
}

fn failure(out: &mut dyn Write, msg: impl std::fmt::Display) -> i32 {
    let _ = writeln!(out, "error: {msg}");
    EXIT_FAILURE
}

fn load_config(path: &Path, overrides: &[String]) -> spide_core::Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| SpideError::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> i32 {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(p) = &args.precision {
        overrides.push(format!("precision={p}"));
    }
    let cfg = match load_config(&args.config, &overrides) {
        Ok(c) => c,
        Err(e) => return usage(out, e),
    };
    if cfg.preset != Preset::None {
        return usage(out, "presets are for `oracle`; training needs a dataset network");
    }
    let (train, test) = match load_datasets(&cfg) {
        Ok(d) => d,
        Err(e) => return usage(out, format!("cannot load data from {}: {e}", cfg.data_dir)),
    };
    let mut trainer = match Trainer::new(cfg, train, test, args.threads) {
        Ok(t) => t,
        Err(e) => return usage(out, e),
    };
    let opts = TrainOptions {
        threads: args.threads,
        save_every: args.save_every,
        out_dir: args.out_dir.clone(),
        dry_run: args.dry_run,
        resume: args.resume.clone(),
        max_steps: None,
    };
    match trainer.run(&opts) {
        Ok(summary) => {
            if let Some(row) = summary.rows.last() {
                let _ = writeln!(out, "step = {}", summary.global_step);
                let _ = writeln!(out, "train_loss = {}", row.train_loss);
                let _ = writeln!(out, "train_acc = {}", row.train_acc);
            }
            if let Some(acc) = summary.final_test_acc {
                let _ = writeln!(out, "test_acc = {acc}");
            }
            if args.dry_run {
                let _ = writeln!(out, "dry run complete");
            }
            EXIT_OK
        }
        Err(e @ (SpideError::Config(_) | SpideError::VersionMismatch { .. })) => usage(out, e),
        Err(e) => failure(out, e),
    }
}

pub fn verify_suite(args: &VerifyArgs) -> spide_core::Result<SuiteReport> {
    let conv = ConvergenceOptions {
        seed: args.seed,
        instances: args.instances.unwrap_or(100),
        ..Default::default()
    };
    let lif = ConvergenceOptions {
        instances: conv.instances,
        ..ConvergenceOptions::lif(args.seed)
    };
    let mut grad = GradOptions {
        seed: args.seed,
        ..Default::default()
    };
    if let Some(t) = args.t_b {
        grad.t_b = t;
    }
    if let Some(n) = args.nets {
        grad.seeds = n;
    }
    let reset = ResetBiasOptions {
        seed: args.seed,
        trials: args.trials.unwrap_or(4000),
        ..Default::default()
    };
    let pair = CoupledPairOptions {
        seed: args.seed,
        sequences: args.sequences.unwrap_or(10_000),
        ..Default::default()
    };
    let named = |suite: &str, parts: Vec<SuiteReport>| {
        let mut r = SuiteReport {
            suite: suite.into(),
            ..Default::default()
        };
        for p in parts {
            r.merge(p);
        }
        r
    };
    match args.suite.as_str() {
        "coupled-pair" => verify::coupled_pair_suite(&pair),
        "forward" => verify::forward_suite(&conv),
        "backward" => verify::backward_suite(&conv),
        "convergence" => Ok(named(
            "convergence",
            vec![verify::forward_suite(&conv)?, verify::backward_suite(&conv)?],
        )),
        "lif" => Ok(named("lif", vec![verify::forward_suite(&lif)?, verify::backward_suite(&lif)?])),
        "grad" => verify::grad_suite(&grad),
        "reset-bias" => verify::reset_bias_suite(&reset),
        "all" => Ok(named(
            "all",
            vec![
                verify::coupled_pair_suite(&pair)?,
                verify::forward_suite(&conv)?,
                verify::backward_suite(&conv)?,
                verify::grad_suite(&grad)?,
                verify::reset_bias_suite(&reset)?,
            ],
        )),
        other => Err(SpideError::Config(format!(
            "unknown suite `{other}`; expected coupled-pair, forward, backward, convergence, lif, grad, reset-bias or all"
        ))),
    }
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> i32 {
    match verify_suite(args) {
        Ok(rep) => {
            let _ = write!(out, "{}", rep.to_text());
            if rep.passed() {
                EXIT_OK
            } else {
                EXIT_FAILURE
            }
        }
        Err(e @ SpideError::Config(_)) => usage(out, e),
        Err(e) => failure(out, e),
    }
}

/// Rates and step counts stored by a training run.
fn recorded_rates(path: &Path) -> spide_core::Result<(f64, f64, usize, usize)> {
    let ck = load_checkpoint(path)?;
    let kv = state_map(&ck.config);
    let rate = |k: &str| -> spide_core::Result<f64> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| SpideError::Config(format!("{} has no recorded rate `{k}`", path.display())))
    };
    let fwd = rate("state.fwd_rate")?;
    let bwd = rate("state.bwd_rate")?;
    let cfg = RunConfig::parse(&ck.config)?;
    Ok((fwd, bwd, cfg.t_f, cfg.t_b))
}

pub fn cmd_energy(args: &EnergyArgs, out: &mut dyn Write) -> i32 {
    if !(args.pair_factor > 0.0) {
        return usage(out, "--pair-factor must be positive");
    }
    let (fwd, bwd, t_f, t_b) = if args.paper_values {
        (REFERENCE_FWD_RATE, REFERENCE_BWD_RATE, REFERENCE_T_F, REFERENCE_T_B)
    } else {
        let path = match (&args.checkpoint, &args.run_dir) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => d.join("latest.ckpt"),
            (None, None) => return usage(out, "give --paper-values, --checkpoint or --run-dir"),
        };
        match recorded_rates(&path) {
            Ok(r) => r,
            Err(e) => return usage(out, format!("missing rate data: {e}")),
        }
    };
    // the dense baseline runs for the forward step count
    let report = energy_report(fwd, bwd, t_f, t_b, &EnergyModel::new(args.pair_factor, t_f));
    if args.csv {
        let _ = writeln!(out, "{}", spide_core::energy::EnergyReport::CSV_HEADER);
        let _ = writeln!(out, "{}", report.csv_row());
    } else {
        let _ = write!(out, "{}", report.to_kv());
        let _ = writeln!(out, "forward reduction: {}", format_reduction(report.forward.reduction_factor));
        let _ = writeln!(out, "backward reduction: {}", format_reduction(report.backward.reduction_factor));
    }
    EXIT_OK
}

fn fmt_vec(v: &Array1<f64>) -> String {
    const SHOWN: usize = 8;
    let mut s: Vec<String> = v.iter().take(SHOWN).map(|x| format!("{x:.4}")).collect();
    if v.len() > SHOWN {
        s.push(format!("... ({} entries)", v.len()));
    }
    s.join(" ")
}

pub fn cmd_oracle(args: &OracleArgs, out: &mut dyn Write) -> i32 {
    let cfg = match load_config(&args.config, &[]) {
        Ok(c) => c,
        Err(e) => return usage(out, e),
    };
    match oracle_report(&cfg, args, out) {
        Ok(()) => EXIT_OK,
        Err(e @ SpideError::Config(_)) => usage(out, e),
        Err(e) => failure(out, e),
    }
}

fn oracle_report(cfg: &RunConfig, args: &OracleArgs, out: &mut dyn Write) -> spide_core::Result<()> {
    let mut params = build_params(cfg)?;
    if let Some(path) = &args.checkpoint {
        load_checkpoint(path)?.restore(&mut params, None)?;
    }
    let fh = cfg.forward_hyper()?;
    let bh = cfg.backward_hyper()?;
    let v_u = fh.v_u();
    let d = DropoutMasks::identity_for(&params);

    let cert = certify_convergence(&params, &fh, 50)?;
    if !cert.satisfied {
        log::warn!("network is not certified (contraction ratio {:.3}); running anyway", cert.contraction_ratio);
        let _ = writeln!(out, "warning: convergence certificate not satisfied");
    }
    let _ = writeln!(out, "certificate.contraction_ratio = {}", cert.contraction_ratio);
    let _ = writeln!(out, "feedback = {}", if params.has_feedback() { "present" } else { "none" });

    let x = match cfg.preset {
        Preset::ScalarToy => array![1.0],
        Preset::None => {
            let test = load_mnist_dir(Path::new(&cfg.data_dir), Split::Test, cfg.num_classes)?;
            if args.sample >= test.len() {
                return Err(SpideError::Config(format!("sample {} outside test set of {}", args.sample, test.len())));
            }
            test.image(args.sample)
        }
    };
    let eq = oracle::solve_equilibrium(&params, x.view(), &d, v_u, &EquilibriumOptions::default())?;
    let _ = writeln!(out, "equilibrium.iterations = {}", eq.iterations);
    let _ = writeln!(out, "equilibrium.residual = {:e}", eq.residual);
    for (l, a) in eq.alpha_star.iter().enumerate() {
        let _ = writeln!(out, "alpha_star[{}] = {}", l + 1, fmt_vec(a));
    }

    // rate-space current: the toy's fixed g, otherwise the scaled loss gradient
    let (current, dl_do) = match cfg.preset {
        Preset::ScalarToy => (array![0.3], array![0.3]),
        Preset::None => {
            let test = load_mnist_dir(Path::new(&cfg.data_dir), Split::Test, cfg.num_classes)?;
            let y = one_hot(test.label(args.sample), params.output_dim());
            let o = readout(eq.alpha_last().view(), &params)?;
            let (_, g) = loss_and_grad(o.view(), y.view(), cfg.loss_scale)?;
            (g.to_alpha_space(&params)?, g.dl_do)
        }
    };
    let imp = oracle::solve_implicit(&params, &eq, &d, v_u, &current, &ImplicitOptions::default())?;
    let _ = writeln!(out, "implicit.method = {:?}", imp.method);
    let _ = writeln!(out, "implicit.residual = {:e}", imp.residual);
    for (l, b) in imp.beta_star.iter().enumerate() {
        let _ = writeln!(out, "beta_star[{}] = {}", l + 1, fmt_vec(b));
    }
    let reference = oracle::oracle_gradients(&params, &eq, &imp, x.view(), &dl_do, &d, v_u)?;
    if let Some(w) = &reference.feedback {
        if w.len() == 1 {
            let _ = writeln!(out, "grad.feedback = {:.4}", w[[0, 0]]);
        }
    }

    let fwd = forward_stage(&params, &encode_constant(x.view()), &ForwardConfig { t_f: cfg.t_f, hyper: fh }, &d)?;
    let alpha_err = fwd
        .alpha
        .iter()
        .zip(&eq.alpha_star)
        .flat_map(|(a, b)| a.iter().zip(b.iter()))
        .fold(0.0_f64, |m, (p, q)| m.max((p - q).abs()));
    let _ = writeln!(out, "forward.t_f = {}", cfg.t_f);
    let _ = writeln!(out, "forward.alpha_residual = {alpha_err}");

    let steps = if args.t_b.is_empty() { vec![cfg.t_b] } else { args.t_b.clone() };
    for t_b in steps {
        let bwd = backward_stage_from_current(
            &params,
            &fwd,
            &current,
            &BackwardConfig {
                t_b,
                hyper: bh,
                mode: cfg.backward_mode,
            },
            &d,
        )?;
        let beta_err = bwd
            .beta
            .iter()
            .zip(&imp.beta_star)
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .fold(0.0_f64, |m, (p, q)| m.max((p - q).abs()));
        let spike = assemble_from_rates(&params, &fwd.alpha, fwd.x_bar.view(), &bwd.beta, &fwd.masks, &d, &dl_do, v_u)?;
        let _ = writeln!(
            out,
            "t_b = {t_b} beta_residual = {beta_err} grad_rel_err = {}",
            spike.relative_error(&reference)
        );
    }
    if cfg.backward_mode == BackwardMode::CoupledPair {
        let _ = writeln!(out, "backward.mode = coupled");
    }
    Ok(())
}
