//! Flat `key=value` experiment configuration.
//!
//! One entry per line, `#` starts a comment, keys are dotted
//! (`gu.kappa=0.5`). Lists are comma-separated. Every field of
//! [`EpisodeConfig`] is addressable and [`EpisodeConfig::to_text`] writes
//! every key back out.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{GuError, Result};
use crate::gu_step::GuConfig;
use crate::models::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Quadratic,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    NoProjection,
    GuProjection,
    GuSignAware,
    SplitTheoryStep,
}

/// Retain objective for classifier models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetainObjective {
    /// KL divergence to the frozen reference model on retain inputs.
    Kl,
    /// Cross-entropy on retain labels.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSource {
    Optimizer,
    Identity,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, { $($variant:path => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }
        impl FromStr for $ty {
            type Err = GuError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(GuError::Config(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(ModelKind, "model kind", {
    ModelKind::Quadratic => "quadratic",
    ModelKind::Logistic => "logistic",
    ModelKind::Mlp => "mlp",
});
named_enum!(OptimizerKind, "optimizer", { OptimizerKind::Sgd => "sgd", OptimizerKind::Adam => "adam" });
named_enum!(Variant, "variant", {
    Variant::NoProjection => "no_projection",
    Variant::GuProjection => "gu_projection",
    Variant::GuSignAware => "gu_sign_aware",
    Variant::SplitTheoryStep => "split_theory_step",
});
named_enum!(RetainObjective, "retain objective", { RetainObjective::Kl => "kl", RetainObjective::CrossEntropy => "ce" });
named_enum!(MetricSource, "metric source", { MetricSource::Optimizer => "optimizer", MetricSource::Identity => "identity" });

#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    pub dimension: usize,
    pub forget_count: usize,
    pub retain_count: usize,
    pub overlap: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub classes: usize,
    pub init_scale: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub retain_objective: RetainObjective,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerParams {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub bias_corrected_metric: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryParams {
    /// When set, the split step uses `ρ = fraction × descent bound` (needs an
    /// exact retain Lipschitz constant); otherwise `gu.rho`.
    pub rho_bound_fraction: Option<f64>,
    pub metric: MetricSource,
    pub fd_step: f64,
    pub tolerance: f64,
}

/// Grid axes for `sweep`; an empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepGrid {
    pub kappa: Vec<f64>,
    pub tau: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub rho: Vec<f64>,
    pub overlap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub task: TaskParams,
    pub model: ModelParams,
    pub optimizer: OptimizerParams,
    pub gu: GuConfig,
    pub steps: usize,
    pub variant: Variant,
    pub theory: TheoryParams,
    pub compare_variants: Vec<Variant>,
    pub sweep: SweepGrid,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            task: TaskParams { dimension: 8, forget_count: 16, retain_count: 16, overlap: 0.8, seed: 7 },
            model: ModelParams {
                kind: ModelKind::Mlp,
                hidden: vec![8],
                activation: Activation::Tanh,
                classes: 2,
                init_scale: 0.5,
                pretrain_steps: 300,
                pretrain_lr: 0.05,
                retain_objective: RetainObjective::Kl,
            },
            optimizer: OptimizerParams {
                kind: OptimizerKind::Adam,
                learning_rate: 1e-2,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                bias_corrected_metric: true,
            },
            gu: GuConfig::default(),
            steps: 200,
            variant: Variant::GuProjection,
            theory: TheoryParams {
                rho_bound_fraction: None,
                metric: MetricSource::Optimizer,
                fd_step: 1e-5,
                tolerance: 1e-9,
            },
            compare_variants: vec![Variant::NoProjection, Variant::GuProjection, Variant::GuSignAware],
            sweep: SweepGrid::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| GuError::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(GuError::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl EpisodeConfig {
    /// Parses config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GuError::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GuError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "task.dimension" => self.task.dimension = parse(key, v)?,
            "task.forget_count" => self.task.forget_count = parse(key, v)?,
            "task.retain_count" => self.task.retain_count = parse(key, v)?,
            "task.overlap" => self.task.overlap = parse(key, v)?,
            "task.seed" => self.task.seed = parse(key, v)?,
            "model.kind" => self.model.kind = v.parse()?,
            "model.hidden" => self.model.hidden = parse_list(key, v)?,
            "model.activation" => {
                self.model.activation = Activation::parse(v).map_err(|e| GuError::Config(e.to_string()))?
            }
            "model.classes" => self.model.classes = parse(key, v)?,
            "model.init_scale" => self.model.init_scale = parse(key, v)?,
            "model.pretrain_steps" => self.model.pretrain_steps = parse(key, v)?,
            "model.pretrain_lr" => self.model.pretrain_lr = parse(key, v)?,
            "model.retain_objective" => self.model.retain_objective = v.parse()?,
            "optimizer.kind" => self.optimizer.kind = v.parse()?,
            "optimizer.learning_rate" => self.optimizer.learning_rate = parse(key, v)?,
            "optimizer.beta1" => self.optimizer.beta1 = parse(key, v)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse(key, v)?,
            "optimizer.epsilon" => self.optimizer.epsilon = parse(key, v)?,
            "optimizer.bias_corrected_metric" => self.optimizer.bias_corrected_metric = parse_bool(key, v)?,
            "gu.gamma" => self.gu.gamma = parse(key, v)?,
            "gu.alpha" => self.gu.alpha = parse(key, v)?,
            "gu.beta" => self.gu.beta = parse(key, v)?,
            "gu.kappa" => self.gu.kappa = parse(key, v)?,
            "gu.tau" => self.gu.tau = parse(key, v)?,
            "gu.rho" => self.gu.rho = parse(key, v)?,
            "gu.rank_cap" => self.gu.rank_cap = parse(key, v)?,
            "gu.residual_keep_thresh" => self.gu.residual_keep_thresh = parse(key, v)?,
            "gu.refresh_period" => self.gu.refresh_period = parse(key, v)?,
            "gu.sign_aware" => self.gu.sign_aware = parse_bool(key, v)?,
            "episode.steps" => self.steps = parse(key, v)?,
            "episode.variant" => self.variant = v.parse()?,
            "theory.rho_bound_fraction" => {
                self.theory.rho_bound_fraction = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "theory.metric" => self.theory.metric = v.parse()?,
            "theory.fd_step" => self.theory.fd_step = parse(key, v)?,
            "theory.tolerance" => self.theory.tolerance = parse(key, v)?,
            "compare.variants" => self.compare_variants = parse_list(key, v)?,
            "sweep.kappa" => self.sweep.kappa = parse_list(key, v)?,
            "sweep.tau" => self.sweep.tau = parse_list(key, v)?,
            "sweep.alpha" => self.sweep.alpha = parse_list(key, v)?,
            "sweep.beta" => self.sweep.beta = parse_list(key, v)?,
            "sweep.rho" => self.sweep.rho = parse_list(key, v)?,
            "sweep.overlap" => self.sweep.overlap = parse_list(key, v)?,
            other => return Err(GuError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("task.dimension", self.task.dimension.to_string());
        kv("task.forget_count", self.task.forget_count.to_string());
        kv("task.retain_count", self.task.retain_count.to_string());
        kv("task.overlap", self.task.overlap.to_string());
        kv("task.seed", self.task.seed.to_string());
        kv("model.kind", self.model.kind.to_string());
        kv("model.hidden", join(&self.model.hidden));
        kv("model.activation", self.model.activation.name().to_string());
        kv("model.classes", self.model.classes.to_string());
        kv("model.init_scale", self.model.init_scale.to_string());
        kv("model.pretrain_steps", self.model.pretrain_steps.to_string());
        kv("model.pretrain_lr", self.model.pretrain_lr.to_string());
        kv("model.retain_objective", self.model.retain_objective.to_string());
        kv("optimizer.kind", self.optimizer.kind.to_string());
        kv("optimizer.learning_rate", self.optimizer.learning_rate.to_string());
        kv("optimizer.beta1", self.optimizer.beta1.to_string());
        kv("optimizer.beta2", self.optimizer.beta2.to_string());
        kv("optimizer.epsilon", self.optimizer.epsilon.to_string());
        kv("optimizer.bias_corrected_metric", self.optimizer.bias_corrected_metric.to_string());
        kv("gu.gamma", self.gu.gamma.to_string());
        kv("gu.alpha", self.gu.alpha.to_string());
        kv("gu.beta", self.gu.beta.to_string());
        kv("gu.kappa", self.gu.kappa.to_string());
        kv("gu.tau", self.gu.tau.to_string());
        kv("gu.rho", self.gu.rho.to_string());
        kv("gu.rank_cap", self.gu.rank_cap.to_string());
        kv("gu.residual_keep_thresh", self.gu.residual_keep_thresh.to_string());
        kv("gu.refresh_period", self.gu.refresh_period.to_string());
        kv("gu.sign_aware", self.gu.sign_aware.to_string());
        kv("episode.steps", self.steps.to_string());
        kv("episode.variant", self.variant.to_string());
        kv(
            "theory.rho_bound_fraction",
            self.theory.rho_bound_fraction.map_or_else(|| "none".to_string(), |f| f.to_string()),
        );
        kv("theory.metric", self.theory.metric.to_string());
        kv("theory.fd_step", self.theory.fd_step.to_string());
        kv("theory.tolerance", self.theory.tolerance.to_string());
        kv("compare.variants", join(&self.compare_variants));
        kv("sweep.kappa", join(&self.sweep.kappa));
        kv("sweep.tau", join(&self.sweep.tau));
        kv("sweep.alpha", join(&self.sweep.alpha));
        kv("sweep.beta", join(&self.sweep.beta));
        kv("sweep.rho", join(&self.sweep.rho));
        kv("sweep.overlap", join(&self.sweep.overlap));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GuError::Config(m));
        self.gu.validate().map_err(|e| GuError::Config(e.to_string()))?;
        if self.steps == 0 {
            return fail("episode.steps must be at least 1".into());
        }
        if self.task.dimension < 2 || self.task.forget_count == 0 || self.task.retain_count == 0 {
            return fail("task needs dimension >= 2 and nonzero sample counts".into());
        }
        if !(0.0..=1.0).contains(&self.task.overlap) {
            return fail(format!("task.overlap must lie in [0, 1], got {}", self.task.overlap));
        }
        if self.model.kind == ModelKind::Mlp && (self.model.hidden.is_empty() || self.model.classes == 0) {
            return fail("mlp needs at least one hidden layer and one output class".into());
        }
        if !(self.optimizer.learning_rate > 0.0) || !(self.optimizer.epsilon > 0.0) {
            return fail("optimizer learning_rate and epsilon must be positive".into());
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return fail("optimizer decay rates must lie in [0, 1)".into());
        }
        if let Some(f) = self.theory.rho_bound_fraction {
            if !(f > 0.0 && f.is_finite()) {
                return fail(format!("theory.rho_bound_fraction must be positive, got {f}"));
            }
        }
        if !(self.theory.fd_step > 0.0) || !(self.theory.tolerance > 0.0) {
            return fail("theory.fd_step and theory.tolerance must be positive".into());
        }
        for &o in &self.sweep.overlap {
            if !(0.0..=1.0).contains(&o) {
                return fail(format!("sweep.overlap value {o} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Every grid point as a full config (the base config alone when the grid is empty).
    pub fn sweep_points(&self) -> Vec<EpisodeConfig> {
        fn axis(vals: &[f64], base: f64) -> Vec<f64> {
            if vals.is_empty() {
                vec![base]
            } else {
                vals.to_vec()
            }
        }
        let mut out = Vec::new();
        for &kappa in &axis(&self.sweep.kappa, self.gu.kappa) {
            for &tau in &axis(&self.sweep.tau, self.gu.tau) {
                for &alpha in &axis(&self.sweep.alpha, self.gu.alpha) {
                    for &beta in &axis(&self.sweep.beta, self.gu.beta) {
                        for &rho in &axis(&self.sweep.rho, self.gu.rho) {
                            for &overlap in &axis(&self.sweep.overlap, self.task.overlap) {
                                let mut c = self.clone();
                                c.gu.kappa = kappa;
                                c.gu.tau = tau;
                                c.gu.alpha = alpha;
                                c.gu.beta = beta;
                                c.gu.rho = rho;
                                c.task.overlap = overlap;
                                c.sweep = SweepGrid::default();
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}
