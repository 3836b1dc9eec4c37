use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{DeviceKind, DeviceSpec};
use crate::space::{
    default_cell_ops, default_layer_ops, FactorizedCellSpec, LayerwiseSpec, PerEdgeSpec,
    SearchSpace,
};
use crate::supernet::TaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Factorized,
    PerEdge,
    Layerwise,
}

/// The differentiable part of the search objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveBase {
    Train,
    Val,
    /// `train + lambda * |val - train|`.
    Gen,
    /// A planted table over the architecture space; no supernet involved.
    Planted,
}

/// Objective name as written in the config, e.g. `gen` or `gen+latency`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Objective {
    pub base: ObjectiveBase,
    pub latency: bool,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, latency) = match s.strip_suffix("+latency") {
            Some(h) => (h, true),
            None => (s, false),
        };
        let base = match head {
            "train" => ObjectiveBase::Train,
            "val" => ObjectiveBase::Val,
            "gen" => ObjectiveBase::Gen,
            "planted" => ObjectiveBase::Planted,
            _ => {
                return Err(Error::Config(format!(
                    "unknown objective `{s}`; expected train, val, gen or planted, optionally with +latency"
                )))
            }
        };
        Ok(Self { base, latency })
    }
}

impl TryFrom<String> for Objective {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head = match self.base {
            ObjectiveBase::Train => "train",
            ObjectiveBase::Val => "val",
            ObjectiveBase::Gen => "gen",
            ObjectiveBase::Planted => "planted",
        };
        write!(f, "{head}{}", if self.latency { "+latency" } else { "" })
    }
}

impl From<Objective> for String {
    fn from(o: Objective) -> String {
        o.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchEstimator {
    #[serde(rename = "reinforce")]
    Reinforce,
    #[serde(rename = "reinforce_baseline")]
    ReinforceBaseline,
    #[serde(rename = "rebar")]
    Rebar,
    /// REBAR on the differentiable part plus RELAX on the latency part.
    #[serde(rename = "relax-combined")]
    RelaxCombined,
    #[serde(rename = "gs_only")]
    GsOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureSchedule {
    Constant,
    /// Linear from `temperature` to `temperature_end` over the search steps.
    Linear,
}

/// Every knob of a search run. Keys are flat; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub space: SpaceKind,
    pub n_nodes: usize,
    pub n_layers: usize,
    /// Operation labels; the space default when absent.
    pub ops: Option<Vec<String>>,

    pub objective: Objective,
    pub estimator: SearchEstimator,
    pub lambda_gen: f64,
    /// Use the signed gap instead of its absolute value when false.
    pub gen_absolute: bool,
    pub lambda_arch: f64,
    /// Final value of the linearly annealed latency weight.
    pub lambda_lat_max: f64,
    /// Latency target in ms; when absent, the `latency_target_quantile` of
    /// random-architecture latency.
    pub latency_target: Option<f64>,
    pub latency_target_quantile: f64,

    pub temperature: f64,
    pub temperature_end: f64,
    pub temperature_schedule: TemperatureSchedule,
    /// Share Gumbel noise between the discrete and relaxed samples.
    pub couple: bool,

    pub warmup_steps: usize,
    pub total_steps: usize,
    pub arch_samples_per_step: usize,
    pub batches_per_phi_step: usize,
    pub w_steps_per_phi_step: usize,
    pub batch_size: usize,
    pub arch_lr: f64,
    pub arch_lr_end: f64,
    pub weight_lr: f64,
    pub weight_lr_end: f64,
    pub skip_dropout_p: f64,
    pub seed: u64,

    pub task_dim: usize,
    pub task_classes: usize,
    pub task_train_size: usize,
    pub task_val_size: usize,
    pub task_separation: f64,
    pub task_label_noise: f64,
    pub task_modes: usize,
    pub task_seed: u64,

    pub device_kind: DeviceKind,
    pub device_seed: u64,
    pub device_sigma: f64,
    pub device_interaction: f64,
    pub surrogate_samples: usize,

    pub planted_seed: u64,
    /// Weight steps used by `eval` when retraining an architecture.
    pub eval_steps: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let task = TaskSpec::default();
        let device = DeviceSpec::default();
        Self {
            space: SpaceKind::Factorized,
            n_nodes: 4,
            n_layers: 8,
            ops: None,
            objective: Objective {
                base: ObjectiveBase::Gen,
                latency: false,
            },
            estimator: SearchEstimator::Rebar,
            lambda_gen: 0.5,
            gen_absolute: true,
            lambda_arch: 0.2,
            lambda_lat_max: 0.1,
            latency_target: None,
            latency_target_quantile: 0.3,
            temperature: 0.4,
            temperature_end: 0.4,
            temperature_schedule: TemperatureSchedule::Constant,
            couple: true,
            warmup_steps: 50,
            total_steps: 300,
            arch_samples_per_step: 1,
            batches_per_phi_step: 1,
            w_steps_per_phi_step: 1,
            batch_size: 64,
            arch_lr: 2e-3,
            arch_lr_end: 3e-4,
            weight_lr: 6e-4,
            weight_lr_end: 1e-4,
            skip_dropout_p: 0.1,
            seed: 0,
            task_dim: task.dim,
            task_classes: task.classes,
            task_train_size: task.train_size,
            task_val_size: task.val_size,
            task_separation: task.separation,
            task_label_noise: task.label_noise,
            task_modes: task.modes,
            task_seed: task.seed,
            device_kind: device.kind,
            device_seed: device.seed,
            device_sigma: device.sigma,
            device_interaction: device.interaction,
            surrogate_samples: 10_000,
            planted_seed: 0,
            eval_steps: 300,
        }
    }
}

impl SearchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn search_space(&self) -> SearchSpace {
        match self.space {
            SpaceKind::Factorized => SearchSpace::Factorized(FactorizedCellSpec {
                n_nodes: self.n_nodes,
                op_names: self.ops.clone().unwrap_or_else(default_cell_ops),
            }),
            SpaceKind::PerEdge => SearchSpace::PerEdge(PerEdgeSpec {
                n_nodes: self.n_nodes,
                op_names: self.ops.clone().unwrap_or_else(default_cell_ops),
            }),
            SpaceKind::Layerwise => SearchSpace::Layerwise(LayerwiseSpec {
                n_layers: self.n_layers,
                op_names: self.ops.clone().unwrap_or_else(default_layer_ops),
            }),
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            dim: self.task_dim,
            classes: self.task_classes,
            train_size: self.task_train_size,
            val_size: self.task_val_size,
            separation: self.task_separation,
            label_noise: self.task_label_noise,
            modes: self.task_modes,
            seed: self.task_seed,
        }
    }

    pub fn device_spec(&self) -> DeviceSpec {
        DeviceSpec {
            kind: self.device_kind,
            seed: self.device_seed,
            sigma: self.device_sigma,
            interaction: self.device_interaction,
        }
    }

    pub fn layerwise_spec(&self) -> Result<LayerwiseSpec> {
        match self.search_space() {
            SearchSpace::Layerwise(s) => Ok(s),
            _ => Err(Error::Config("latency needs space = \"layerwise\"".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.search_space().validate()?;
        for (name, v) in [
            ("lambda_gen", self.lambda_gen),
            ("lambda_arch", self.lambda_arch),
            ("lambda_lat_max", self.lambda_lat_max),
            ("arch_lr", self.arch_lr),
            ("arch_lr_end", self.arch_lr_end),
            ("weight_lr", self.weight_lr),
            ("weight_lr_end", self.weight_lr_end),
            ("device_sigma", self.device_sigma),
            ("device_interaction", self.device_interaction),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!(
                    "{name} must be a finite nonnegative number, got {v}"
                ));
            }
        }
        for (name, t) in [
            ("temperature", self.temperature),
            ("temperature_end", self.temperature_end),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("{name} must be positive, got {t}"));
            }
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.arch_samples_per_step == 0 || self.batches_per_phi_step == 0 || self.batch_size == 0
        {
            return bad(
                "arch_samples_per_step, batches_per_phi_step and batch_size must be at least 1"
                    .into(),
            );
        }
        if !(0.0..1.0).contains(&self.skip_dropout_p) {
            return bad(format!(
                "skip_dropout_p must lie in [0, 1), got {}",
                self.skip_dropout_p
            ));
        }
        if !(0.0..=1.0).contains(&self.latency_target_quantile) {
            return bad("latency_target_quantile must lie in [0, 1]".into());
        }
        if let Some(t) = self.latency_target {
            if t.is_nan() || t <= 0.0 {
                return bad(format!("latency_target must be positive, got {t}"));
            }
        }
        if self.objective.latency {
            self.layerwise_spec()?;
            if self.estimator == SearchEstimator::Rebar {
                return bad("rebar needs a differentiable objective; use estimator = \"relax-combined\" with +latency".into());
            }
            if self.surrogate_samples == 0 {
                return bad("surrogate_samples must be at least 1".into());
            }
        }
        if self.objective.base != ObjectiveBase::Planted {
            self.task_spec();
            if self.task_dim == 0 || self.task_classes < 2 {
                return bad("task_dim must be >= 1 and task_classes >= 2".into());
            }
            for name in self.search_space().op_names() {
                crate::supernet::OpKind::from_name(name)?;
            }
        }
        Ok(())
    }

    /// Temperature at search step `k` of `n`.
    pub fn temperature_at(&self, k: usize, n: usize) -> f64 {
        match self.temperature_schedule {
            TemperatureSchedule::Constant => self.temperature,
            TemperatureSchedule::Linear => {
                let frac = if n <= 1 {
                    1.0
                } else {
                    k as f64 / (n - 1) as f64
                };
                self.temperature + (self.temperature_end - self.temperature) * frac
            }
        }
    }

    /// Latency weight at global step `s`: linear from 0 to `lambda_lat_max`.
    pub fn lambda_lat_at(&self, s: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        self.lambda_lat_max * s as f64 / self.total_steps as f64
    }
}
