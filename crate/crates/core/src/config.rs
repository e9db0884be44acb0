//! Run configuration: flat `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backward::BackwardMode;
use crate::error::{Result, SpideError};
use crate::neuron::NeuronHyper;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronModel {
    If,
    Lif,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Built-in parameter sets that bypass random initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    None,
    /// One neuron, `F¹ = 1`, `b¹ = 0`, `W¹ = 0.5`, input `x = 1`, rate-space
    /// gradient `g = 0.3`.
    ScalarToy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub t_f: usize,
    pub t_b: usize,
    pub v_th: f64,
    pub u_reset: f64,
    pub v_th_b: f64,
    pub u_reset_b: f64,
    /// Membrane leak, used when `neuron = lif`.
    pub leak: f64,
    pub loss_scale: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub norm_c: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Input size followed by hidden layer widths.
    pub layers: Vec<usize>,
    pub feedback: bool,
    pub neuron: NeuronModel,
    /// Epochs (1-based) after which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub precision: Precision,
    pub data_dir: String,
    pub num_classes: usize,
    /// Use only the first `n` training samples; 0 keeps all.
    pub train_limit: usize,
    /// Evaluate on the first `n` test samples; 0 keeps all.
    pub test_limit: usize,
    pub backward_mode: BackwardMode,
    pub log_every: usize,
    pub hutchinson_samples: usize,
    /// Compare spike gradients with oracle gradients every `n` steps; 0
    /// disables the comparison.
    pub grad_check_every: usize,
    pub preset: Preset,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            t_f: 30,
            t_b: 100,
            v_th: 1.0,
            u_reset: -1.0,
            v_th_b: 0.5,
            u_reset_b: -0.5,
            leak: 0.95,
            loss_scale: 100.0,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            dropout: 0.0,
            norm_c: 2.0,
            batch_size: 128,
            epochs: 10,
            seed: 0,
            layers: vec![784, 400],
            feedback: true,
            neuron: NeuronModel::If,
            lr_decay_epochs: vec![30, 60, 90],
            lr_decay_factor: 0.1,
            precision: Precision::F64,
            data_dir: "data/mnist".into(),
            num_classes: 10,
            train_limit: 0,
            test_limit: 0,
            backward_mode: BackwardMode::Fast,
            log_every: 50,
            hutchinson_samples: 64,
            grad_check_every: 0,
            preset: Preset::None,
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> SpideError {
    SpideError::Config(format!("{key} = {value}: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "not a valid number"))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parse configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SpideError::Config(format!("line {}: expected key = value", no + 1)))?;
            let key = key.trim();
            if key.starts_with("state.") {
                // run state stored alongside the config in checkpoints
                continue;
            }
            if !seen.insert(key.to_string()) {
                return Err(SpideError::Config(format!("line {}: duplicate key `{key}`", no + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| SpideError::Config(format!("line {}: {}", no + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SpideError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "t_f" => self.t_f = num(key, value)?,
            "t_b" => self.t_b = num(key, value)?,
            "v_th" => self.v_th = num(key, value)?,
            "u_reset" => self.u_reset = num(key, value)?,
            "v_th_b" => self.v_th_b = num(key, value)?,
            "u_reset_b" => self.u_reset_b = num(key, value)?,
            "leak" => self.leak = num(key, value)?,
            "loss_scale" => self.loss_scale = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "norm_c" => self.norm_c = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "layers" => self.layers = list(key, value)?,
            "feedback" => {
                self.feedback = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(bad(key, value, "expected true or false")),
                }
            }
            "neuron" => {
                self.neuron = match value {
                    "if" => NeuronModel::If,
                    "lif" => NeuronModel::Lif,
                    _ => return Err(bad(key, value, "expected if or lif")),
                }
            }
            "lr_decay_epochs" => self.lr_decay_epochs = list(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key, value, "expected f32 or f64")),
                }
            }
            "data_dir" => self.data_dir = value.to_string(),
            "num_classes" => self.num_classes = num(key, value)?,
            "train_limit" => self.train_limit = num(key, value)?,
            "test_limit" => self.test_limit = num(key, value)?,
            "backward_mode" => self.backward_mode = value.parse()?,
            "log_every" => self.log_every = num(key, value)?,
            "hutchinson_samples" => self.hutchinson_samples = num(key, value)?,
            "grad_check_every" => self.grad_check_every = num(key, value)?,
            "preset" => {
                self.preset = match value {
                    "none" => Preset::None,
                    "scalar-toy" => Preset::ScalarToy,
                    _ => return Err(bad(key, value, "expected none or scalar-toy")),
                }
            }
            _ => return Err(SpideError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(SpideError::Config(m.to_string()));
        if self.precision == Precision::F32 {
            return err("precision f32 is not supported; all simulation runs in f64");
        }
        if self.t_f == 0 || self.t_b == 0 {
            return err("t_f and t_b must be at least 1");
        }
        if self.layers.len() < 2 || self.layers.contains(&0) {
            return err("layers needs an input size and at least one positive hidden width");
        }
        if self.num_classes < 2 && self.preset == Preset::None {
            return err("num_classes must be at least 2");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must lie in [0, 1)");
        }
        if !(self.norm_c > 0.0) || !(self.loss_scale > 0.0) || !(self.lr > 0.0) {
            return err("norm_c, loss_scale and lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.weight_decay) {
            return err("momentum and weight_decay must lie in [0, 1)");
        }
        if !(self.lr_decay_factor > 0.0) {
            return err("lr_decay_factor must be positive");
        }
        if self.hutchinson_samples == 0 || self.log_every == 0 {
            return err("hutchinson_samples and log_every must be at least 1");
        }
        if self.neuron == NeuronModel::Lif && !(self.leak > 0.0 && self.leak < 1.0) {
            return err("lif neurons need 0 < leak < 1");
        }
        self.forward_hyper()?;
        self.backward_hyper()?;
        Ok(())
    }

    pub fn effective_leak(&self) -> f64 {
        match self.neuron {
            NeuronModel::If => 1.0,
            NeuronModel::Lif => self.leak,
        }
    }

    pub fn forward_hyper(&self) -> Result<NeuronHyper> {
        NeuronHyper::new(self.v_th, self.u_reset, self.effective_leak())
    }

    pub fn backward_hyper(&self) -> Result<NeuronHyper> {
        NeuronHyper::new(self.v_th_b, self.u_reset_b, self.effective_leak())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("t_f", self.t_f.to_string());
        kv("t_b", self.t_b.to_string());
        kv("v_th", self.v_th.to_string());
        kv("u_reset", self.u_reset.to_string());
        kv("v_th_b", self.v_th_b.to_string());
        kv("u_reset_b", self.u_reset_b.to_string());
        kv("leak", self.leak.to_string());
        kv("loss_scale", self.loss_scale.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("dropout", self.dropout.to_string());
        kv("norm_c", self.norm_c.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("layers", join(&self.layers));
        kv("feedback", self.feedback.to_string());
        kv(
            "neuron",
            match self.neuron {
                NeuronModel::If => "if",
                NeuronModel::Lif => "lif",
            }
            .into(),
        );
        kv("lr_decay_epochs", join(&self.lr_decay_epochs));
        kv("lr_decay_factor", self.lr_decay_factor.to_string());
        kv(
            "precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
        );
        kv("data_dir", self.data_dir.clone());
        kv("num_classes", self.num_classes.to_string());
        kv("train_limit", self.train_limit.to_string());
        kv("test_limit", self.test_limit.to_string());
        kv(
            "backward_mode",
            match self.backward_mode {
                BackwardMode::Fast => "fast",
                BackwardMode::CoupledPair => "coupled",
            }
            .into(),
        );
        kv("log_every", self.log_every.to_string());
        kv("hutchinson_samples", self.hutchinson_samples.to_string());
        kv("grad_check_every", self.grad_check_every.to_string());
        kv(
            "preset",
            match self.preset {
                Preset::None => "none",
                Preset::ScalarToy => "scalar-toy",
            }
            .into(),
        );
        s
    }
}

fn strip_prefix(e: &SpideError) -> String {
    match e {
        SpideError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
