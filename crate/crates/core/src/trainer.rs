//! End-to-end training loop: batches of forward stage, loss, backward
//! stage, gradient assembly, optimizer step and feedback-norm restriction,
//! with metrics logging, evaluation and checkpoints.
//!
//! Determinism: every random draw comes from a stream keyed by
//! `(seed, epoch, dataset index)` or `(seed, global step)`, per-sample work
//! is collected in batch order and all reductions run on one thread, so the
//! metrics are bit-identical for any worker count and across resumes.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::array;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::backward::{backward_stage, BackwardConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{Precision, Preset, RunConfig};
use crate::data::{load_mnist_dir, Dataset, Split};
use crate::error::{Result, SpideError};
use crate::forward::{encode_constant, forward_stage, ForwardConfig};
use crate::network::{build_network, certify_convergence, make_dropout_masks, DropoutMasks, Layer, LinearOp, NetworkParams};
use crate::oracle::{self, EquilibriumOptions, ImplicitOptions};
use crate::rng;
use crate::training::{
    assemble_batch, loss_and_grad, one_hot, restrict_frobenius, sgd_step, OptimizerState, SampleRates, SgdHyper,
};

pub const METRICS_HEADER: &str = "epoch,step,train_loss,train_acc,test_acc,fwd_rate,bwd_rate,grad_oracle_err";
pub const TIMING_HEADER: &str = "epoch,step,wall_seconds";

/// One logged row. `test_acc` is filled on end-of-epoch rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub fwd_rate: f64,
    pub bwd_rate: f64,
    pub grad_oracle_err: Option<f64>,
    pub wall_seconds: f64,
}

impl RunMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.train_loss,
            self.train_acc,
            opt(self.test_acc),
            self.fwd_rate,
            self.bwd_rate,
            opt(self.grad_oracle_err)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub threads: usize,
    /// Write `latest.ckpt` every `n` optimizer steps; 0 writes only at the
    /// end of each epoch.
    pub save_every: usize,
    pub out_dir: PathBuf,
    /// Run a single batch and stop without writing any files.
    pub dry_run: bool,
    pub resume: Option<PathBuf>,
    /// Stop after this many global steps (used to emulate interruptions).
    pub max_steps: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            save_every: 0,
            out_dir: PathBuf::from("runs/default"),
            dry_run: false,
            resume: None,
            max_steps: None,
        }
    }
}

/// Counters accumulated between log rows (and over the epoch for rates).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Window {
    loss: f64,
    correct: u64,
    count: u64,
    fwd_spikes: u64,
    bwd_spikes: u64,
}

impl Window {
    fn add(&mut self, other: &Window) {
        self.loss += other.loss;
        self.correct += other.correct;
        self.count += other.count;
        self.fwd_spikes += other.fwd_spikes;
        self.bwd_spikes += other.bwd_spikes;
    }

    fn to_kv(self, prefix: &str) -> String {
        format!(
            "state.{prefix}.loss = {:016x}\nstate.{prefix}.correct = {}\nstate.{prefix}.count = {}\nstate.{prefix}.fwd_spikes = {}\nstate.{prefix}.bwd_spikes = {}\n",
            self.loss.to_bits(),
            self.correct,
            self.count,
            self.fwd_spikes,
            self.bwd_spikes
        )
    }

    fn from_kv(kv: &std::collections::HashMap<String, String>, prefix: &str) -> Result<Self> {
        let get = |k: &str| -> Result<&String> {
            kv.get(&format!("state.{prefix}.{k}"))
                .ok_or_else(|| SpideError::Config(format!("checkpoint lacks state.{prefix}.{k}")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| SpideError::Config(format!("bad state.{prefix}.{k}")))
        };
        let bits = u64::from_str_radix(get("loss")?, 16).map_err(|_| SpideError::Config("bad loss state".into()))?;
        Ok(Self {
            loss: f64::from_bits(bits),
            correct: int("correct")?,
            count: int("count")?,
            fwd_spikes: int("fwd_spikes")?,
            bwd_spikes: int("bwd_spikes")?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct RunState {
    epoch: usize,
    /// Next batch index within the epoch.
    batch: usize,
    global_step: usize,
    window: Window,
    epoch_window: Window,
    /// Rates of the last completed epoch, for the energy report.
    last_fwd_rate: f64,
    last_bwd_rate: f64,
}

/// The scalar toy network: one neuron, `F¹ = 1`, `b¹ = 0`, `W¹ = 0.5`,
/// identity readout.
pub fn scalar_toy_params(feedback: bool) -> NetworkParams {
    NetworkParams::new(
        vec![Layer {
            weight: LinearOp::new(array![[1.0]]),
            bias: array![0.0],
        }],
        feedback.then(|| LinearOp::new(array![[0.5]])),
        LinearOp::new(array![[1.0]]),
        array![0.0],
    )
    .expect("valid toy network")
}

/// Initial parameters for a configuration.
pub fn build_params(cfg: &RunConfig) -> Result<NetworkParams> {
    match cfg.preset {
        Preset::ScalarToy => Ok(scalar_toy_params(cfg.feedback)),
        Preset::None => build_network(&cfg.layers, cfg.num_classes, cfg.feedback, cfg.seed),
    }
}

/// Load the train and test splits named by the configuration, applying the
/// sample limits.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let dir = Path::new(&cfg.data_dir);
    let mut train = load_mnist_dir(dir, Split::Train, cfg.num_classes)?;
    let mut test = load_mnist_dir(dir, Split::Test, cfg.num_classes)?;
    if cfg.train_limit > 0 {
        train.truncate(cfg.train_limit);
    }
    if cfg.test_limit > 0 {
        test.truncate(cfg.test_limit);
    }
    if train.dim() != cfg.layers[0] {
        return Err(SpideError::Config(format!(
            "dataset images have {} pixels, layers starts with {}",
            train.dim(),
            cfg.layers[0]
        )));
    }
    Ok((train, test))
}

/// Per-sample result of the two stages.
struct SampleOut {
    rates: SampleRates,
    loss: f64,
    correct: bool,
    fwd_spikes: u64,
    bwd_spikes: u64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub params: NetworkParams,
    pub opt: OptimizerState,
    train: Dataset,
    test: Dataset,
    pool: rayon::ThreadPool,
    state: RunState,
    fwd_cfg: ForwardConfig,
    bwd_cfg: BackwardConfig,
    pending_grad_err: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, train: Dataset, test: Dataset, threads: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.precision == Precision::F32 {
            log::warn!("precision f32 requested; all arithmetic runs in f64");
        }
        let params = build_params(&cfg)?;
        if train.dim() != params.input_dim() || test.dim() != params.input_dim() {
            return Err(SpideError::Config(format!(
                "dataset images have {} pixels, network expects {}",
                train.dim(),
                params.input_dim()
            )));
        }
        if train.is_empty() {
            return Err(SpideError::Config("training set is empty".into()));
        }
        let opt = OptimizerState::new(
            &params,
            SgdHyper {
                lr: cfg.lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
                loss_scale: cfg.loss_scale,
            },
        );
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| SpideError::Config(format!("cannot build worker pool: {e}")))?;
        let fwd_cfg = ForwardConfig {
            t_f: cfg.t_f,
            hyper: cfg.forward_hyper()?,
        };
        let bwd_cfg = BackwardConfig {
            t_b: cfg.t_b,
            hyper: cfg.backward_hyper()?,
            mode: cfg.backward_mode,
        };
        Ok(Self {
            cfg,
            params,
            opt,
            train,
            test,
            pool,
            state: RunState::default(),
            fwd_cfg,
            bwd_cfg,
            pending_grad_err: None,
        })
    }

    pub fn global_step(&self) -> usize {
        self.state.global_step
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, rng::DOMAIN_SHUFFLE, epoch as u64, 0));
        order
    }

    fn sample_dropout(&self, epoch: usize, index: usize) -> Result<DropoutMasks> {
        if self.cfg.dropout == 0.0 {
            return Ok(DropoutMasks::identity_for(&self.params));
        }
        let mut r = rng::stream(self.cfg.seed, rng::DOMAIN_DROPOUT, epoch as u64, index as u64);
        make_dropout_masks(&self.params.layer_widths(), self.cfg.dropout, &mut r)
    }

    /// Backward current scale per sample. The batch gradient is multiplied
    /// back by `batch` after assembly, so only the spiking range changes.
    fn current_scale(&self, batch: usize) -> f64 {
        self.cfg.loss_scale / batch as f64
    }

    fn run_sample(&self, epoch: usize, index: usize, batch: usize) -> Result<SampleOut> {
        let dropout = self.sample_dropout(epoch, index)?;
        let x = self.train.image(index);
        let label = self.train.label(index);
        let fwd = forward_stage(&self.params, &encode_constant(x.view()), &self.fwd_cfg, &dropout)?;
        let y = one_hot(label, self.params.output_dim());
        let scale = self.current_scale(batch);
        let (loss, g) = loss_and_grad(fwd.o.view(), y.view(), scale)?;
        let bwd = backward_stage(&self.params, &fwd, &g, &self.bwd_cfg, &dropout)?;
        Ok(SampleOut {
            loss: loss / scale,
            correct: fwd.predicted_class() == label,
            fwd_spikes: fwd.total_spikes(),
            bwd_spikes: bwd.total_spikes(),
            rates: SampleRates {
                x_bar: fwd.x_bar,
                alpha: fwd.alpha,
                beta: bwd.beta,
                masks: fwd.masks,
                dropout,
                dl_do: g.dl_do,
            },
        })
    }

    /// Oracle gradient of the batch, from equilibrium and implicit solves.
    fn oracle_batch(&self, indices: &[usize], outs: &[SampleOut]) -> Result<crate::training::GradientSet> {
        let v_u = self.fwd_cfg.hyper.v_u();
        let samples: Vec<SampleRates> = self.pool.install(|| {
            indices
                .par_iter()
                .zip(outs.par_iter())
                .map(|(&i, out)| {
                    let x = self.train.image(i);
                    let d = &out.rates.dropout;
                    let eq = oracle::solve_equilibrium(&self.params, x.view(), d, v_u, &EquilibriumOptions::default())?;
                    let o = crate::forward::readout(eq.alpha_last().view(), &self.params)?;
                    let y = one_hot(self.train.label(i), self.params.output_dim());
                    let (_, g) = loss_and_grad(o.view(), y.view(), self.current_scale(indices.len()))?;
                    let current = g.to_alpha_space(&self.params)?;
                    let imp = oracle::solve_implicit(&self.params, &eq, d, v_u, &current, &ImplicitOptions::default())?;
                    Ok(SampleRates {
                        x_bar: x,
                        masks: eq.masks(),
                        alpha: eq.alpha_star,
                        beta: imp.beta_star,
                        dropout: d.clone(),
                        dl_do: g.dl_do,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut grads = assemble_batch(&self.params, &samples, v_u)?;
        grads.scale(indices.len() as f64);
        Ok(grads)
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<()> {
        let epoch = self.state.epoch;
        let b = self.state.batch;
        let order = self.epoch_order(epoch);
        let lo = b * self.cfg.batch_size;
        let hi = (lo + self.cfg.batch_size).min(order.len());
        let indices = &order[lo..hi];

        let outs: Vec<SampleOut> = self.pool.install(|| {
            indices
                .par_iter()
                .map(|&i| self.run_sample(epoch, i, indices.len()))
                .collect::<Result<Vec<_>>>()
        })?;

        let mut w = Window::default();
        for o in &outs {
            w.loss += o.loss;
            w.correct += u64::from(o.correct);
            w.count += 1;
            w.fwd_spikes += o.fwd_spikes;
            w.bwd_spikes += o.bwd_spikes;
        }
        if !w.loss.is_finite() {
            return Err(SpideError::NonFinite {
                layer: 0,
                step: self.state.global_step + 1,
            });
        }

        let samples: Vec<SampleRates> = outs.iter().map(|o| o.rates.clone()).collect();
        let mut grads = assemble_batch(&self.params, &samples, self.fwd_cfg.hyper.v_u())?;
        grads.scale(indices.len() as f64);

        let next_step = self.state.global_step + 1;
        if self.cfg.grad_check_every > 0 && next_step % self.cfg.grad_check_every == 0 {
            self.pending_grad_err = match self.oracle_batch(indices, &outs) {
                Ok(reference) => Some(grads.hidden_relative_error(&reference)),
                Err(e) => {
                    log::warn!("oracle gradient check skipped at step {next_step}: {e}");
                    None
                }
            };
        }

        self.opt.hyper.lr = self.cfg.lr_at_epoch(epoch);
        sgd_step(&mut self.params, &grads, &mut self.opt)?;
        if let Some(w1) = &mut self.params.feedback {
            let mut r = rng::stream(self.cfg.seed, rng::DOMAIN_HUTCHINSON, next_step as u64, 0);
            restrict_frobenius(w1.weight_mut(), self.cfg.norm_c, self.cfg.hutchinson_samples, &mut r)?;
        }
        if !self.params.is_finite() {
            return Err(SpideError::NonFinite {
                layer: 0,
                step: next_step,
            });
        }

        self.state.window.add(&w);
        self.state.epoch_window.add(&w);
        self.state.global_step = next_step;
        self.state.batch += 1;
        Ok(())
    }

    fn rates_of(&self, w: &Window) -> (f64, f64) {
        let neurons = self.params.total_neurons() as f64;
        let n = w.count as f64;
        if n == 0.0 {
            return (0.0, 0.0);
        }
        (
            w.fwd_spikes as f64 / (neurons * self.cfg.t_f as f64 * n),
            w.bwd_spikes as f64 / (neurons * self.cfg.t_b as f64 * n),
        )
    }

    /// Row over the current logging window, or over the whole epoch for the
    /// end-of-epoch row.
    fn take_row(&mut self, test_acc: Option<f64>, started: &Instant) -> RunMetrics {
        let window = std::mem::take(&mut self.state.window);
        let w = if test_acc.is_some() { self.state.epoch_window } else { window };
        let (fwd_rate, bwd_rate) = self.rates_of(&w);
        let n = (w.count as f64).max(1.0);
        RunMetrics {
            epoch: self.state.epoch + 1,
            step: self.state.global_step,
            train_loss: w.loss / n,
            train_acc: w.correct as f64 / n,
            test_acc,
            fwd_rate,
            bwd_rate,
            grad_oracle_err: self.pending_grad_err.take(),
            wall_seconds: started.elapsed().as_secs_f64(),
        }
    }

    /// Test accuracy with dropout disabled.
    pub fn evaluate(&self) -> Result<f64> {
        if self.test.is_empty() {
            return Ok(0.0);
        }
        let d = DropoutMasks::identity_for(&self.params);
        let correct: Vec<bool> = self.pool.install(|| {
            (0..self.test.len())
                .into_par_iter()
                .map(|i| {
                    let x = self.test.image(i);
                    let fwd = forward_stage(&self.params, &encode_constant(x.view()), &self.fwd_cfg, &d)?;
                    Ok(fwd.predicted_class() == self.test.label(i))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(correct.iter().filter(|&&c| c).count() as f64 / self.test.len() as f64)
    }

    fn state_text(&self) -> String {
        let s = &self.state;
        format!(
            "{}state.epoch = {}\nstate.batch = {}\nstate.global_step = {}\nstate.fwd_rate = {}\nstate.bwd_rate = {}\n{}{}",
            self.cfg.to_text(),
            s.epoch,
            s.batch,
            s.global_step,
            s.last_fwd_rate,
            s.last_bwd_rate,
            s.window.to_kv("window"),
            s.epoch_window.to_kv("epoch_window"),
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        Checkpoint::capture(
            &self.params,
            Some(&self.opt),
            self.state_text(),
            [self.cfg.seed, s.epoch as u64, s.batch as u64, s.global_step as u64],
        )
    }

    /// Restore parameters, optimizer and loop position from a checkpoint
    /// written by a run with the same configuration.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let stored = RunConfig::parse(&ck.config)?;
        if stored != self.cfg {
            return Err(SpideError::Config(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        ck.restore(&mut self.params, Some(&mut self.opt))?;
        let kv = state_map(&ck.config);
        let int = |k: &str| -> Result<usize> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| SpideError::Config(format!("checkpoint lacks {k}")))
        };
        let float = |k: &str| -> f64 { kv.get(k).and_then(|v| v.parse().ok()).unwrap_or(0.0) };
        self.state = RunState {
            epoch: int("state.epoch")?,
            batch: int("state.batch")?,
            global_step: int("state.global_step")?,
            window: Window::from_kv(&kv, "window")?,
            epoch_window: Window::from_kv(&kv, "epoch_window")?,
            last_fwd_rate: float("state.fwd_rate"),
            last_bwd_rate: float("state.bwd_rate"),
        };
        if ck.rng_state != [self.cfg.seed, self.state.epoch as u64, self.state.batch as u64, self.state.global_step as u64] {
            return Err(SpideError::Config("checkpoint rng state does not match its loop position".into()));
        }
        Ok(())
    }

    /// Train until `epochs` are done (or `max_steps` is reached).
    pub fn run(&mut self, opts: &TrainOptions) -> Result<RunSummary> {
        let started = Instant::now();
        let write = !opts.dry_run;
        let metrics_path = opts.out_dir.join("metrics.csv");
        let timing_path = opts.out_dir.join("timing.csv");
        if write {
            fs::create_dir_all(&opts.out_dir)?;
            fs::write(opts.out_dir.join("config.txt"), self.cfg.to_text())?;
        }
        let (mut metrics, mut timing) = if !write {
            (None, None)
        } else if let Some(path) = &opts.resume {
            let ck = load_checkpoint(path)?;
            self.restore(&ck)?;
            truncate_csv(&metrics_path, METRICS_HEADER, self.state.global_step)?;
            truncate_csv(&timing_path, TIMING_HEADER, self.state.global_step)?;
            (Some(append(&metrics_path)?), Some(append(&timing_path)?))
        } else {
            let mut m = File::create(&metrics_path)?;
            writeln!(m, "{METRICS_HEADER}")?;
            let mut t = File::create(&timing_path)?;
            writeln!(t, "{TIMING_HEADER}")?;
            (Some(m), Some(t))
        };

        let mut rows = Vec::new();
        let mut emit = |row: RunMetrics, m: &mut Option<File>, t: &mut Option<File>| -> Result<()> {
            log::info!(
                "epoch {} step {} loss {:.4} acc {:.4}{}",
                row.epoch,
                row.step,
                row.train_loss,
                row.train_acc,
                row.test_acc.map_or_else(String::new, |a| format!(" test {a:.4}"))
            );
            if let (Some(m), Some(t)) = (m.as_mut(), t.as_mut()) {
                writeln!(m, "{}", row.csv_row())?;
                m.flush()?;
                writeln!(t, "{},{},{}", row.epoch, row.step, row.wall_seconds)?;
                t.flush()?;
            }
            rows.push(row);
            Ok(())
        };

        let per_epoch = self.batches_per_epoch();
        let mut last_good = self.checkpoint();
        while self.state.epoch < self.cfg.epochs {
            if self.state.batch == 0 {
                let cert = certify_convergence(&self.params, &self.fwd_cfg.hyper, 50)?;
                if !cert.satisfied {
                    log::warn!(
                        "epoch {}: convergence certificate not satisfied (ratio {:.3})",
                        self.state.epoch + 1,
                        cert.contraction_ratio
                    );
                }
            }
            if let Err(e) = self.step() {
                if matches!(e, SpideError::NonFinite { .. }) && write {
                    save_checkpoint(&opts.out_dir.join("last_good.ckpt"), &last_good)?;
                }
                return Err(e);
            }
            if opts.dry_run {
                let row = self.take_row(None, &started);
                emit(row, &mut metrics, &mut timing)?;
                break;
            }
            let step = self.state.global_step;
            if step % self.cfg.log_every == 0 {
                let row = self.take_row(None, &started);
                emit(row, &mut metrics, &mut timing)?;
            }
            let epoch_done = self.state.batch == per_epoch;
            if epoch_done {
                let acc = self.evaluate()?;
                let (f, b) = self.rates_of(&self.state.epoch_window);
                self.state.last_fwd_rate = f;
                self.state.last_bwd_rate = b;
                let row = self.take_row(Some(acc), &started);
                emit(row, &mut metrics, &mut timing)?;
                self.state.epoch_window = Window::default();
                self.state.epoch += 1;
                self.state.batch = 0;
            }
            let ck_due = epoch_done || (opts.save_every > 0 && step % opts.save_every == 0);
            last_good = self.checkpoint();
            if ck_due {
                save_checkpoint(&opts.out_dir.join("latest.ckpt"), &last_good)?;
                if epoch_done {
                    save_checkpoint(&opts.out_dir.join(format!("epoch-{:03}.ckpt", self.state.epoch)), &last_good)?;
                }
            }
            if opts.max_steps.is_some_and(|m| step >= m) {
                break;
            }
        }
        Ok(RunSummary {
            rows,
            final_test_acc: None,
            global_step: self.state.global_step,
            fwd_rate: self.state.last_fwd_rate,
            bwd_rate: self.state.last_bwd_rate,
        }
        .with_final_acc())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub rows: Vec<RunMetrics>,
    pub final_test_acc: Option<f64>,
    pub global_step: usize,
    pub fwd_rate: f64,
    pub bwd_rate: f64,
}

impl RunSummary {
    fn with_final_acc(mut self) -> Self {
        self.final_test_acc = self.rows.iter().rev().find_map(|r| r.test_acc);
        self
    }
}

fn append(path: &Path) -> Result<File> {
    Ok(OpenOptions::new().append(true).open(path)?)
}

/// Keep the header and every row whose `step` column is at most `max_step`.
fn truncate_csv(path: &Path, header: &str, max_step: usize) -> Result<()> {
    let mut kept = vec![header.to_string()];
    if path.exists() {
        for line in BufReader::new(File::open(path)?).lines().skip(1) {
            let line = line?;
            let step = line.split(',').nth(1).and_then(|s| s.parse::<usize>().ok());
            if step.is_some_and(|s| s <= max_step) {
                kept.push(line);
            }
        }
    }
    let mut f = File::create(path)?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

/// `state.*` entries of a checkpoint's config text.
pub fn state_map(text: &str) -> std::collections::HashMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| k.starts_with("state."))
        .collect()
}

/// Build a small synthetic digit-like dataset: class `c` lights a band of
/// pixels plus deterministic noise. Useful for smoke tests and determinism
/// checks without the real data.
pub fn synthetic_dataset(n: usize, dim: usize, classes: usize, seed: u64, split: Split) -> Result<Dataset> {
    use rand::Rng;
    let mut r = rng::stream(seed, rng::DOMAIN_SYNTHETIC, matches!(split, Split::Test) as u64, 0);
    let band = (dim / classes).max(1);
    let mut pixels = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c as u8);
        for p in 0..dim {
            let on = p / band == c;
            let noise: u8 = r.random_range(0..64);
            pixels.push(if on { 255 - noise } else { noise });
        }
    }
    Dataset::new(pixels, labels, dim, classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        RunConfig::parse(
            "layers = 16, 12\nnum_classes = 4\nbatch_size = 8\nepochs = 2\nt_f = 10\nt_b = 20\nlog_every = 3\nseed = 5\n",
        )
        .unwrap()
    }

    fn data() -> (Dataset, Dataset) {
        (
            synthetic_dataset(40, 16, 4, 1, Split::Train).unwrap(),
            synthetic_dataset(12, 16, 4, 1, Split::Test).unwrap(),
        )
    }

    #[test]
    fn dry_run_takes_one_step() {
        let (tr, te) = data();
        let mut t = Trainer::new(tiny_cfg(), tr, te, 1).unwrap();
        let s = t
            .run(&TrainOptions {
                dry_run: true,
                ..Default::default()
            })
            .unwrap();
        assert_eq!(s.global_step, 1);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let dir = tempfile::tempdir().unwrap();
        let mut outs = Vec::new();
        for threads in [1, 3] {
            let (tr, te) = data();
            let mut t = Trainer::new(tiny_cfg(), tr, te, threads).unwrap();
            let out = dir.path().join(format!("t{threads}"));
            t.run(&TrainOptions {
                out_dir: out.clone(),
                threads,
                ..Default::default()
            })
            .unwrap();
            outs.push(fs::read_to_string(out.join("metrics.csv")).unwrap());
        }
        assert_eq!(outs[0], outs[1]);
        assert!(outs[0].lines().count() > 3);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, te) = data();
        let full = dir.path().join("full");
        Trainer::new(tiny_cfg(), tr.clone(), te.clone(), 1)
            .unwrap()
            .run(&TrainOptions {
                out_dir: full.clone(),
                ..Default::default()
            })
            .unwrap();
        let part = dir.path().join("part");
        let opts = TrainOptions {
            out_dir: part.clone(),
            save_every: 2,
            max_steps: Some(5),
            ..Default::default()
        };
        Trainer::new(tiny_cfg(), tr.clone(), te.clone(), 1).unwrap().run(&opts).unwrap();
        Trainer::new(tiny_cfg(), tr, te, 1)
            .unwrap()
            .run(&TrainOptions {
                resume: Some(part.join("latest.ckpt")),
                max_steps: None,
                ..opts
            })
            .unwrap();
        assert_eq!(
            fs::read_to_string(full.join("metrics.csv")).unwrap(),
            fs::read_to_string(part.join("metrics.csv")).unwrap()
        );
    }
}
