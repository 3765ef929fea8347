//! Run configuration: one TOML file describes a run completely.
//!
//! Every section has defaults, so an empty file is the desk configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use slora_core::alloc::{AllocError, AllocationConfig, Strategy};
use slora_core::hessian::{ProbeConfig, ProbeError};
use slora_core::metrics::{MetricError, MetricParams};
use slora_core::model::{
    Activation, Dataset, InputDistribution, ModelError, ModelSpec, Objective, Split, SynthKind, SynthTask, TrainParams,
};
use slora_core::robustness::{OrderingSettings, RobustnessConfig, RobustnessError};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("config error in `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Drives model init, the teacher and the adapter seed of `e2e`.
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub probe: ProbeConfig,
    pub metrics: MetricParams,
    pub allocation: AllocationConfig,
    pub finetune: FinetuneSection,
    pub compare: CompareSection,
    pub robustness: RobustnessSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            model: ModelSection::default(),
            data: DataSection::default(),
            probe: ProbeConfig::default(),
            metrics: MetricParams::default(),
            allocation: AllocationConfig::default(),
            finetune: FinetuneSection::default(),
            compare: CompareSection::default(),
            robustness: RobustnessSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub attention_blocks: usize,
    pub seq_len: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub task: Objective,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden_dims: vec![16; 5],
            attention_blocks: 0,
            seq_len: 1,
            output_dim: 4,
            activation: Activation::Relu,
            task: Objective::RegressionMse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub generator: SynthKind,
    pub noise_std: f64,
    pub input_distribution: InputDistribution,
    pub train: SplitSection,
    pub calibration: SplitSection,
    pub eval: SplitSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            generator: SynthKind::HeterogeneousTeacher,
            noise_std: 0.01,
            input_distribution: InputDistribution::Gaussian,
            train: SplitSection { size: 2048, seed: 1 },
            calibration: SplitSection { size: 512, seed: 2 },
            eval: SplitSection { size: 1024, seed: 3 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lora_scale: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let p = TrainParams::default();
        Self {
            epochs: p.epochs,
            lr: p.lr,
            batch_size: p.batch_size,
            lora_scale: 1.0,
        }
    }
}

impl FinetuneSection {
    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Uniform, Strategy::Sra],
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSection {
    /// Input laws for the cross-domain table.
    pub domains: Vec<InputDistribution>,
    pub domain_size: usize,
    pub domain_seed: u64,
    /// Also report τ on the orthogonal two-channel control model.
    pub negative_control: bool,
    pub protocol: RobustnessConfig,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        Self {
            domains: vec![
                InputDistribution::Gaussian,
                InputDistribution::Uniform,
                InputDistribution::Laplace,
            ],
            domain_size: 512,
            domain_seed: 7,
            negative_control: true,
            protocol: RobustnessConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

/// What each command needs validated beyond the shared sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Probe,
    Allocate,
    Compare,
    Robustness,
    EndToEnd,
}

/// The three datasets of a run plus the task that labels them.
#[derive(Debug, Clone)]
pub struct Materialized {
    pub task: SynthTask,
    pub train: Dataset,
    pub calibration: Dataset,
    pub eval: Dataset,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| spanned_key(text, s)).unwrap_or_default();
            ConfigError::new(if field.is_empty() { "<document>".into() } else { field }, e.message())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            input_dim: m.input_dim,
            hidden_dims: m.hidden_dims.clone(),
            attention_blocks: m.attention_blocks,
            seq_len: m.seq_len,
            output_dim: m.output_dim,
            activation: m.activation,
            task: m.task,
            seed: self.seed,
        }
    }

    pub fn ordering_settings(&self) -> OrderingSettings {
        OrderingSettings {
            probe: self.probe,
            metrics: self.metrics,
        }
    }

    pub fn validate(&self, scope: Scope) -> Result<(), ConfigError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::new(
                "schema_version",
                format!("expected {CONFIG_SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.model_spec().validate().map_err(|e| model_field("model", e))?;
        let d = &self.data;
        if !d.noise_std.is_finite() || d.noise_std < 0.0 {
            return Err(ConfigError::new("data.noise_std", "must be finite and >= 0"));
        }
        for (name, split) in [("train", d.train), ("calibration", d.calibration), ("eval", d.eval)] {
            if split.size == 0 {
                return Err(ConfigError::new(format!("data.{name}.size"), "must be >= 1"));
            }
        }
        if d.generator == SynthKind::HeterogeneousTeacher && self.model.hidden_dims.len() < 2 {
            return Err(ConfigError::new("data.generator", "heterogeneous_teacher needs at least 2 hidden layers"));
        }
        self.probe.validate().map_err(probe_field)?;
        self.metrics.validate().map_err(metric_field)?;
        self.allocation.validate().map_err(alloc_field)?;
        let f = &self.finetune;
        f.train_params().validate().map_err(|e| model_field("finetune", e))?;
        if !f.lora_scale.is_finite() {
            return Err(ConfigError::new("finetune.lora_scale", "must be finite"));
        }
        if self.output.dir.is_empty() {
            return Err(ConfigError::new("output.dir", "must not be empty"));
        }
        match scope {
            Scope::Compare => self.validate_compare(),
            Scope::Robustness => self.validate_robustness(),
            _ => Ok(()),
        }
    }

    fn validate_compare(&self) -> Result<(), ConfigError> {
        let c = &self.compare;
        let mut s = c.strategies.clone();
        s.sort();
        s.dedup();
        if s.len() != c.strategies.len() {
            return Err(ConfigError::new("compare.strategies", "contains a duplicate"));
        }
        if s.len() < 2 {
            return Err(ConfigError::new("compare.strategies", "needs at least 2 strategies"));
        }
        let mut seeds = c.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if seeds.len() != c.seeds.len() {
            return Err(ConfigError::new("compare.seeds", "contains a duplicate"));
        }
        if seeds.len() < 3 {
            return Err(ConfigError::new("compare.seeds", "needs at least 3 seeds"));
        }
        Ok(())
    }

    fn validate_robustness(&self) -> Result<(), ConfigError> {
        let r = &self.robustness;
        if r.domains.len() < 2 {
            return Err(ConfigError::new("robustness.domains", "needs at least 2 domains"));
        }
        if r.domain_size == 0 {
            return Err(ConfigError::new("robustness.domain_size", "must be >= 1"));
        }
        r.protocol.validate().map_err(|e| match e {
            RobustnessError::InvalidConfig { field, reason } => {
                ConfigError::new(format!("robustness.protocol.{field}"), reason)
            }
            other => ConfigError::new("robustness.protocol", other.to_string()),
        })?;
        if r.protocol.epoch_avg_rank == 0 {
            return Err(ConfigError::new("robustness.protocol.epoch_avg_rank", "must be >= 1"));
        }
        Ok(())
    }

    /// Builds the task and draws the three splits.
    pub fn materialize(&self) -> Result<Materialized, ConfigError> {
        let task = SynthTask::new(self.data.generator, self.model_spec(), self.seed)
            .map_err(|e| model_field("data.generator", e))?
            .with_noise(self.data.noise_std)
            .with_input_distribution(self.data.input_distribution);
        let d = &self.data;
        Ok(Materialized {
            train: task.dataset(d.train.size, d.train.seed, Split::Train),
            calibration: task.dataset(d.calibration.size, d.calibration.seed, Split::Calibration),
            eval: task.dataset(d.eval.size, d.eval.seed, Split::Eval),
            task,
        })
    }
}

/// Dotted key path of the table entry covering `span`, best effort.
fn spanned_key(text: &str, span: std::ops::Range<usize>) -> String {
    let before = &text[..span.start.min(text.len())];
    let table = before
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = &text[line_start..];
    let line = line.lines().next().unwrap_or("");
    let key = line.split('=').next().unwrap_or("").trim();
    let key = if line.contains('=') && !key.starts_with('[') { key } else { "" };
    match (table, key) {
        (Some(t), "") => t,
        (Some(t), k) => format!("{t}.{k}"),
        (None, k) => k.to_string(),
    }
}

fn model_field(section: &str, e: ModelError) -> ConfigError {
    match e {
        ModelError::InvalidSpec(msg) => {
            // messages lead with the field name when one field is at fault
            const FIELDS: [&str; 7] = ["input_dim", "output_dim", "seq_len", "hidden_dims", "epochs", "lr", "batch_size"];
            match msg.split_whitespace().next().filter(|w| FIELDS.contains(w)) {
                Some(f) => ConfigError::new(format!("{section}.{f}"), msg[f.len()..].trim()),
                None => ConfigError::new(section, msg),
            }
        }
        other => ConfigError::new(section, other.to_string()),
    }
}

fn probe_field(e: ProbeError) -> ConfigError {
    match e {
        ProbeError::InvalidConfig { field, reason } => ConfigError::new(format!("probe.{field}"), reason),
        other => ConfigError::new("probe", other.to_string()),
    }
}

fn metric_field(e: MetricError) -> ConfigError {
    match e {
        MetricError::InvalidParams { field, reason } => ConfigError::new(format!("metrics.{field}"), reason),
        other => ConfigError::new("metrics", other.to_string()),
    }
}

fn alloc_field(e: AllocError) -> ConfigError {
    match e {
        AllocError::InvalidConfig { field, reason } => ConfigError::new(format!("allocation.{field}"), reason),
        other => ConfigError::new("allocation", other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate(Scope::EndToEnd).unwrap();
        cfg.validate(Scope::Compare).unwrap();
        cfg.validate(Scope::Robustness).unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn validation_names_the_field() {
        let e = RunConfig::from_toml_str("[probe]\ndamping_fraction = -0.1\n")
            .unwrap()
            .validate(Scope::Probe)
            .unwrap_err();
        assert_eq!(e.field, "probe.damping_fraction");

        let e = RunConfig::from_toml_str("[compare]\nstrategies = [\"sra\"]\n")
            .unwrap()
            .validate(Scope::Compare)
            .unwrap_err();
        assert_eq!(e.field, "compare.strategies");

        let e = RunConfig::from_toml_str("[robustness.protocol]\nsubset_fractions = [0.1, 0.5]\n")
            .unwrap()
            .validate(Scope::Robustness)
            .unwrap_err();
        assert_eq!(e.field, "robustness.protocol.subset_fractions");

        let e = RunConfig::from_toml_str("[finetune]\nepochs = 0\n")
            .unwrap()
            .validate(Scope::EndToEnd)
            .unwrap_err();
        assert_eq!(e.field, "finetune.epochs");
    }

    #[test]
    fn parse_errors_point_at_the_key() {
        let e = RunConfig::from_toml_str("[probe]\nblock_size = \"big\"\n").unwrap_err();
        assert_eq!(e.field, "probe.block_size");
        let e = RunConfig::from_toml_str("[allocation]\nbogus = 1\n").unwrap_err();
        assert!(e.field.starts_with("allocation"), "{e}");
        assert!(e.reason.contains("bogus"), "{e}");
        let e = RunConfig::from_toml_str("[allocation]\nstrategy = \"greedy\"\n").unwrap_err();
        assert_eq!(e.field, "allocation.strategy");
    }

    #[test]
    fn scope_limits_cross_section_checks() {
        let cfg = RunConfig::from_toml_str("[compare]\nstrategies = [\"sra\"]\n").unwrap();
        cfg.validate(Scope::Allocate).unwrap();
        assert!(cfg.validate(Scope::Compare).is_err());
    }

    #[test]
    fn materialize_draws_configured_sizes() {
        let mut cfg = RunConfig::default();
        cfg.data.train.size = 10;
        cfg.data.calibration.size = 11;
        cfg.data.eval.size = 12;
        let m = cfg.materialize().unwrap();
        assert_eq!((m.train.len(), m.calibration.len(), m.eval.len()), (10, 11, 12));
        assert_eq!(m.task.base_model().dims().len(), 6);
    }
}
