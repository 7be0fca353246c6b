//! Experiment configuration, loaded from TOML with command-line overrides.

use std::path::{Path, PathBuf};

use flipflop_core::datagen::{GenConfig, PressureConfig, Task};
use flipflop_core::model::ModelConfig;
use flipflop_core::probes::{PredictionMode, ToggleTarget};
use flipflop_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable that overrides `output_root`.
pub const OUTPUT_ROOT_ENV: &str = "UNDO_FF_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub id_test_size: usize,
    pub ood_test_size: usize,
    /// Leading ID-test sequences used for convergence checks during training.
    pub eval_subset: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_size: 10_000, id_test_size: 2_000, ood_test_size: 2_000, eval_subset: 1_000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub toggle_target: ToggleTarget,
    pub prediction_mode: PredictionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    /// Run directory name under the output root; derived when absent.
    pub name: Option<String>,
    pub output_root: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GenConfig,
    pub data: DataConfig,
    pub pressure: PressureConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Undo,
            seed: 0,
            name: None,
            output_root: PathBuf::from("runs"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generator: GenConfig::default(),
            data: DataConfig::default(),
            pressure: PressureConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

/// Named sub-seeds. Each is a fixed function of the global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub global: u64,
    pub train_data: u64,
    pub id_test_data: u64,
    pub ood_test_data: u64,
    pub pressure: u64,
    pub model_init: u64,
    pub shuffle: u64,
}

/// SplitMix64 finalizer over the global seed mixed with an FNV-1a hash of
/// `label`.
pub fn derive_seed(global: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = global ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Seeds {
    pub fn from_global(global: u64) -> Self {
        Self {
            global,
            train_data: derive_seed(global, "data/train"),
            id_test_data: derive_seed(global, "data/id_test"),
            ood_test_data: derive_seed(global, "data/ood_test"),
            pressure: derive_seed(global, "data/pressure"),
            model_init: derive_seed(global, "model/init"),
            shuffle: derive_seed(global, "train/shuffle"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub task: Option<Task>,
    pub layers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.task {
            self.task = t;
        }
        if let Some(l) = o.layers {
            self.model.n_layers = l;
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_global(self.seed)
    }

    /// Generator settings for the configured task.
    pub fn gen_config(&self) -> GenConfig {
        self.generator.for_task(self.task)
    }

    /// Model config with the derived init seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { seed: self.seeds().model_init, ..self.model.clone() }
    }

    /// Training config with the derived shuffle seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seeds().shuffle, ..self.train.clone() }
    }

    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let task = match self.task {
                Task::Standard => "standard",
                Task::Undo => "undo",
            };
            format!("{task}-{}l-seed{}", self.model.n_layers, self.seed)
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.gen_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.pressure.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let d = &self.data;
        if d.train_size == 0 || d.id_test_size == 0 || d.ood_test_size == 0 || d.eval_subset == 0 {
            return Err(CliError::Config("dataset sizes must be at least 1".into()));
        }
        if d.eval_subset > d.id_test_size {
            return Err(CliError::Config(format!(
                "eval_subset {} exceeds id_test_size {}",
                d.eval_subset, d.id_test_size
            )));
        }
        if d.train_size < self.train.batch_size {
            return Err(CliError::Config(format!(
                "train_size {} is smaller than one batch of {}",
                d.train_size, self.train.batch_size
            )));
        }
        Ok(())
    }
}

/// Run directory: `--out` when given, else `<root>/<run name>` where the
/// root comes from the environment or the config.
pub fn resolve_run_dir(cfg: &ExperimentConfig, out: Option<&Path>, env_root: Option<&str>) -> PathBuf {
    if let Some(o) = out {
        return o.to_path_buf();
    }
    let root = env_root.filter(|s| !s.is_empty()).map(PathBuf::from).unwrap_or_else(|| cfg.output_root.clone());
    root.join(cfg.run_name())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("task = \"standard\"\nseed = 4\n[model]\nn_layers = 1\n").unwrap();
        assert_eq!(cfg.task, Task::Standard);
        assert_eq!(cfg.model.n_layers, 1);
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.run_name(), "standard-1l-seed4");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("sede = 1\n"), Err(CliError::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[train]\nlearning_rat = 1.0\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn seeds_are_deterministic_and_distinct() {
        let a = Seeds::from_global(7);
        assert_eq!(a, Seeds::from_global(7));
        let all = [a.train_data, a.id_test_data, a.ood_test_data, a.pressure, a.model_init, a.shuffle];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_ne!(Seeds::from_global(8).train_data, a.train_data);
    }

    #[test]
    fn overrides_and_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides { seed: Some(3), task: Some(Task::Standard), layers: Some(1) });
        assert_eq!((cfg.seed, cfg.task, cfg.model.n_layers), (3, Task::Standard, 1));
        cfg.data.eval_subset = 5000;
        assert!(cfg.validate().is_err());
        let mut bad = ExperimentConfig::default();
        bad.pressure.rollback_depth = 20;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn run_dir_precedence() {
        let cfg = ExperimentConfig::default();
        assert_eq!(resolve_run_dir(&cfg, Some(Path::new("/x")), Some("/env")), PathBuf::from("/x"));
        assert_eq!(resolve_run_dir(&cfg, None, Some("/env")), PathBuf::from("/env/undo-2l-seed0"));
        assert_eq!(resolve_run_dir(&cfg, None, None), PathBuf::from("runs/undo-2l-seed0"));
    }
}
