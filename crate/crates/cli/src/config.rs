//! Experiment configuration: one JSON file, dotted `--set` overrides, and
//! per-stage seeds derived from the master seed.

use std::path::{Path, PathBuf};

use memgen_core::analysis::ProbeConfig;
use memgen_core::datagen::{build_name_color_binding, ArithConfig, InContextConfig, TaskConfig, TaskKind};
use memgen_core::model::{ModelConfig, TrainConfig};
use memgen_core::rng::{derive_indexed, derive_seed, rng_from_seed};
use memgen_core::steer::Scope;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArithSettings {
    pub operand_range: [u32; 2],
    pub n_patterns: usize,
    pub mem_sample_prob: f64,
    pub cot_enabled: bool,
}

impl Default for ArithSettings {
    fn default() -> Self {
        ArithSettings { operand_range: [1, 999], n_patterns: 10, mem_sample_prob: 0.01, cot_enabled: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InContextSettings {
    pub context_length: usize,
    pub colors_per_name: usize,
    pub bound_answer_prob: f64,
    pub unresolved_story_prob: f64,
}

impl Default for InContextSettings {
    fn default() -> Self {
        InContextSettings { context_length: 8, colors_per_name: 5, bound_answer_prob: 1.0, unresolved_story_prob: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSettings {
    /// Training examples written to disk for inspection. Training itself
    /// draws a fresh seeded stream.
    pub train_sample_size: usize,
    /// Candidate examples for steering evaluation, before pre-filtering.
    pub steer_eval_size: usize,
}

impl Default for DatagenSettings {
    fn default() -> Self {
        DatagenSettings { train_sample_size: 1000, steer_eval_size: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings { n_layers: 4, hidden_size: 128, n_heads: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureSettings {
    pub target_pairs: usize,
    pub max_attempts: usize,
}

impl Default for CaptureSettings {
    fn default() -> Self {
        CaptureSettings { target_pairs: 2000, max_attempts: 40_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        let p = ProbeConfig::default();
        ProbeSettings {
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            max_epochs: p.max_epochs,
            patience: p.patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerSettings {
    pub top_n_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    /// Examples evaluated per direction and grid cell.
    pub n_eval: usize,
    pub scope: Scope,
}

impl Default for SteerSettings {
    fn default() -> Self {
        SteerSettings {
            top_n_grid: vec![0.005, 0.01, 0.02, 0.05],
            alpha_grid: vec![1.0, 2.0, 4.0, 8.0],
            n_eval: 100,
            scope: Scope::AllPositions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSettings {
    /// Retrain the primary task with a different data seed and apply the
    /// primary spec to it.
    pub retrain: bool,
    /// Train the other task on the same architecture and apply specs across
    /// tasks in both directions.
    pub cross_task: bool,
    /// Training settings for the other task's model.
    pub cross_train: TrainConfig,
}

impl Default for TransferSettings {
    fn default() -> Self {
        TransferSettings { retrain: true, cross_task: true, cross_train: TrainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub master_seed: u64,
    pub output_dir: Option<PathBuf>,
    pub arith: ArithSettings,
    pub incontext: InContextSettings,
    pub datagen: DatagenSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub capture: CaptureSettings,
    pub probe: ProbeSettings,
    pub steer: SteerSettings,
    pub transfer: TransferSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskKind::Arithmetic,
            master_seed: 0,
            output_dir: None,
            arith: ArithSettings::default(),
            incontext: InContextSettings::default(),
            datagen: DatagenSettings::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            capture: CaptureSettings::default(),
            probe: ProbeSettings::default(),
            steer: SteerSettings::default(),
            transfer: TransferSettings::default(),
        }
    }
}

/// Pipeline stages in execution order. The index feeds seed derivation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Datagen,
    Train,
    Capture,
    Analyze,
    Probe,
    Steer,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Datagen, Stage::Train, Stage::Capture, Stage::Analyze, Stage::Probe, Stage::Steer];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Datagen => "datagen",
            Stage::Train => "train",
            Stage::Capture => "capture",
            Stage::Analyze => "analyze",
            Stage::Probe => "probe",
            Stage::Steer => "steer",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

fn config_err(what: impl std::fmt::Display) -> CliError {
    CliError::Config(what.to_string())
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| {
            config_err(format!("{origin}: line {} column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Applies `section.field=value` overrides. Values parse as JSON when
    /// they can and fall back to plain strings.
    pub fn with_overrides(self, overrides: &[String]) -> CliResult<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut root = serde_json::to_value(&self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| config_err(format!("--set {item:?}: expected key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| config_err(format!("--set {key}: {} is not a section", parts[..i].join("."))))?;
                if !obj.contains_key(*part) {
                    return Err(config_err(format!("--set {key}: unknown field {part:?}")));
                }
                node = obj.get_mut(*part).unwrap();
            }
            *node = value;
        }
        serde_json::from_value(root).map_err(|e| config_err(format!("--set: {e}")))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.task_config(self.task)?.validate()?;
        if self.transfer.cross_task {
            self.task_config(self.task.other())?.validate()?;
        }
        self.model_config(self.task)?.validate()?;
        self.train.validate()?;
        if self.transfer.cross_task {
            self.transfer.cross_train.validate()?;
        }
        self.probe_config().validate()?;
        if self.capture.target_pairs == 0 || self.capture.max_attempts == 0 {
            return Err(config_err("capture.target_pairs and capture.max_attempts must be positive"));
        }
        let s = &self.steer;
        if s.top_n_grid.is_empty() || s.alpha_grid.is_empty() {
            return Err(config_err("steer grids must be non-empty"));
        }
        if s.top_n_grid.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return Err(config_err("steer.top_n_grid values must lie in (0, 1]"));
        }
        if s.alpha_grid.iter().any(|a| !a.is_finite()) {
            return Err(config_err("steer.alpha_grid values must be finite"));
        }
        if s.n_eval == 0 || self.datagen.steer_eval_size == 0 {
            return Err(config_err("steer.n_eval and datagen.steer_eval_size must be positive"));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_indexed(self.master_seed, stage.index())
    }

    /// Task generator settings, seeded from the datagen stage seed.
    pub fn task_config(&self, kind: TaskKind) -> CliResult<TaskConfig> {
        let seed = derive_seed(self.stage_seed(Stage::Datagen), kind.as_str());
        Ok(match kind {
            TaskKind::Arithmetic => {
                let a = &self.arith;
                TaskConfig::Arithmetic(ArithConfig::generate_with(
                    seed,
                    a.operand_range,
                    a.n_patterns,
                    a.mem_sample_prob,
                    a.cot_enabled,
                )?)
            }
            TaskKind::InContext => {
                let s = &self.incontext;
                let mut cfg = InContextConfig::generate(seed)?;
                cfg.context_length = s.context_length;
                cfg.colors_per_name = s.colors_per_name;
                cfg.bound_answer_prob = s.bound_answer_prob;
                cfg.unresolved_story_prob = s.unresolved_story_prob;
                let mut rng = rng_from_seed(derive_seed(seed, "incontext-binding"));
                TaskConfig::InContext(build_name_color_binding(cfg, &mut rng)?)
            }
        })
    }

    /// Every task model shares the init seed so that parameters common to
    /// both vocabularies start identical.
    pub fn model_config(&self, kind: TaskKind) -> CliResult<ModelConfig> {
        let task = self.task_config(kind)?;
        Ok(ModelConfig {
            n_layers: self.model.n_layers,
            hidden_size: self.model.hidden_size,
            n_heads: self.model.n_heads,
            vocab_size: task.vocab().len(),
            max_seq_len: task.max_sequence_len(),
            seed: derive_seed(self.stage_seed(Stage::Train), "init"),
        })
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = &self.probe;
        ProbeConfig {
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            max_epochs: p.max_epochs,
            patience: p.patience,
            seed: self.stage_seed(Stage::Probe),
        }
    }

    pub fn to_pretty_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["train.learning_rate=0.001".into(), "task=incontext".into(), "steer.scope=generation_only".into()])
            .unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.task, TaskKind::InContext);
        assert_eq!(cfg.steer.scope, Scope::GenerationOnly);
        let err = ExperimentConfig::default().with_overrides(&["train.lr=1".into()]).unwrap_err();
        assert!(err.to_string().contains("unknown field \"lr\""), "{err}");
    }

    #[test]
    fn json_errors_carry_position() {
        let err = ExperimentConfig::from_json("{\n  \"master_seed\": 1,\n  \"bogus\": 2\n}", "cfg.json").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"train": {"learning_rate": 0.01}}"#, "x").unwrap();
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.learning_rate, 0.01);
        cfg.validate().unwrap();
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let cfg = ExperimentConfig { master_seed: 9, ..Default::default() };
        let seeds: Vec<u64> = Stage::ALL.iter().map(|&s| cfg.stage_seed(s)).collect();
        for (i, a) in seeds.iter().enumerate() {
            assert!(!seeds[i + 1..].contains(a));
        }
        assert_eq!(cfg.task_config(TaskKind::InContext).unwrap(), cfg.task_config(TaskKind::InContext).unwrap());
        assert_eq!(cfg.model_config(TaskKind::Arithmetic).unwrap().seed, cfg.model_config(TaskKind::InContext).unwrap().seed);
    }
}
