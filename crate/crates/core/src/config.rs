//! Run configuration: a TOML file with `[model]`, `[train]`, `[data]` and
//! `[io]` sections. Every key has a default; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_steps")]
    pub steps: u64,
    #[serde(default = "TrainConfig::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "TrainConfig::default_lr_start")]
    pub lr_start: f64,
    #[serde(default = "TrainConfig::default_lr_end")]
    pub lr_end: f64,
    #[serde(default = "TrainConfig::default_seed")]
    pub seed: u64,
    #[serde(default = "TrainConfig::default_weight_decay")]
    pub weight_decay: f64,
    /// Save a checkpoint every this many steps (and always at the end).
    #[serde(default = "TrainConfig::default_checkpoint_every")]
    pub checkpoint_every: u64,
}

impl TrainConfig {
    fn default_steps() -> u64 {
        500
    }
    fn default_batch_size() -> usize {
        2
    }
    fn default_lr_start() -> f64 {
        1e-3
    }
    fn default_lr_end() -> f64 {
        1e-4
    }
    fn default_seed() -> u64 {
        1
    }
    fn default_weight_decay() -> f64 {
        0.0
    }
    fn default_checkpoint_every() -> u64 {
        100
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: Self::default_steps(),
            batch_size: Self::default_batch_size(),
            lr_start: Self::default_lr_start(),
            lr_end: Self::default_lr_end(),
            seed: Self::default_seed(),
            weight_decay: Self::default_weight_decay(),
            checkpoint_every: Self::default_checkpoint_every(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    ListFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "DataConfig::default_source")]
    pub source: DataSource,
    /// Image extents (height, width); must be multiples of 32.
    #[serde(default = "DataConfig::default_size")]
    pub size: [usize; 2],
    /// Number of synthetic samples to generate.
    #[serde(default = "DataConfig::default_count")]
    pub count: usize,
    /// Path of the "image_path depth_path" listing when source = list_file.
    #[serde(default)]
    pub list: String,
}

impl DataConfig {
    fn default_source() -> DataSource {
        DataSource::Synthetic
    }
    fn default_size() -> [usize; 2] {
        [224, 224]
    }
    fn default_count() -> usize {
        4
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: Self::default_source(),
            size: Self::default_size(),
            count: Self::default_count(),
            list: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    #[serde(default = "IoConfig::default_out_dir")]
    pub out_dir: String,
    /// Checkpoint path; empty means `<out_dir>/model.ckpt`.
    #[serde(default)]
    pub checkpoint: String,
}

impl IoConfig {
    fn default_out_dir() -> String {
        "runs/default".into()
    }

    pub fn checkpoint_path(&self) -> std::path::PathBuf {
        if self.checkpoint.is_empty() {
            std::path::Path::new(&self.out_dir).join("model.ckpt")
        } else {
            self.checkpoint.clone().into()
        }
    }
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { out_dir: Self::default_out_dir(), checkpoint: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub io: IoConfig,
}

impl RunConfig {
    /// Desk-scale preset: 500 steps at lr 1e-3 on four 224x224 synthetic
    /// scenes, batch 2, no weight decay.
    pub fn toy() -> Self {
        RunConfig::default()
    }

    /// Full-size training schedule: lr 4e-5 decayed linearly to 4e-6,
    /// batch 8, weight decay 1e-2. Step count approximates 20 epochs over
    /// a 50k-image corpus.
    pub fn paper_scale() -> Self {
        RunConfig {
            model: ModelConfig::paper_scale(),
            train: TrainConfig {
                steps: 125_000,
                batch_size: 8,
                lr_start: 4e-5,
                lr_end: 4e-6,
                seed: 1,
                weight_decay: 1e-2,
                checkpoint_every: 6_250,
            },
            data: DataConfig { size: [480, 640], count: 50_000, ..DataConfig::default() },
            io: IoConfig { out_dir: "runs/paper".into(), checkpoint: String::new() },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper_scale()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected toy or paper)"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.train.lr_start > 0.0) || !(self.train.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.data.size[0] % 32 != 0 || self.data.size[1] % 32 != 0 {
            return Err(Error::Config(format!(
                "data size {:?} must be divisible by 32",
                self.data.size
            )));
        }
        if self.data.source == DataSource::Synthetic && self.data.count == 0 {
            return Err(Error::Config("synthetic data needs count >= 1".into()));
        }
        if self.data.source == DataSource::ListFile && self.data.list.is_empty() {
            return Err(Error::Config("source = list_file requires data.list".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip_is_identity() {
        for cfg in [RunConfig::toy(), RunConfig::paper_scale()] {
            let text = cfg.render();
            let back = RunConfig::parse(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn empty_config_uses_documented_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::toy());
        assert_eq!(cfg.train.steps, 500);
        assert_eq!(cfg.model.n_bins, 64);
        assert_eq!(cfg.data.size, [224, 224]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[train]\nsteps = 5\nbogus_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(RunConfig::parse("[nonsense]\nx = 1\n").is_err());
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let cfg = RunConfig::parse("[train]\nsteps = 7\n[model]\nn_bins = 32\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.model.n_bins, 32);
        assert_eq!(cfg.model.window_size, 7);
    }

    #[test]
    fn validation_rejects_bad_sizes_and_sources() {
        assert!(RunConfig::parse("[data]\nsize = [100, 224]\n").is_err());
        assert!(RunConfig::parse("[data]\nsource = \"list_file\"\n").is_err());
        assert!(RunConfig::parse("[train]\nbatch_size = 0\n").is_err());
    }
}
