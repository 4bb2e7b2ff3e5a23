//! Run configuration (TOML) and its canonical hashes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::AdamWConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::mask::MaskSchedule;
use crate::model::ModelConfig;
use crate::scene::SceneSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    /// Scene seeds are `first_seed + i`; evaluation scenes follow the
    /// training scenes.
    pub first_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 64,
            n_eval: 16,
            first_seed: 1000,
        }
    }
}

impl DataConfig {
    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.n_train as u64).map(|i| self.first_seed + i).collect()
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        let base = self.first_seed + self.n_train as u64;
        (0..self.n_eval as u64).map(|i| base + i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_azimuth: usize,
    pub n_elevation: usize,
    /// Ratios used by `eval --sweep`.
    pub mask_ratios: Vec<f64>,
    pub mask_seed: u64,
    /// Euler steps at inference; `None` uses `flow.n_euler_steps`.
    pub n_euler_steps: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_azimuth: 360,
            n_elevation: 8,
            mask_ratios: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            mask_seed: 77,
            n_euler_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub scan_lengths: Vec<usize>,
    pub euler_steps: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scan_lengths: vec![256, 1024, 4096],
            euler_steps: vec![1, 2, 4, 8],
            repeats: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for parameter initialization and every training draw.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub mask: MaskSchedule,
    pub optimizer: AdamWConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            scene: SceneSpec::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            flow: FlowConfig::default(),
            mask: MaskSchedule::default(),
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn to_toml<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config types serialize to TOML")
}

/// The fields that determine a trained model.
#[derive(Serialize)]
struct TrainingIdentity<'a> {
    seed: u64,
    scene: &'a SceneSpec,
    data: &'a DataConfig,
    model: &'a ModelConfig,
    flow: &'a FlowConfig,
    mask: &'a MaskSchedule,
    optimizer: &'a AdamWConfig,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct SceneIdentity<'a> {
    scene: &'a SceneSpec,
    first_seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.flow.validate()?;
        self.train.validate()?;
        if !(0.0..=100.0).contains(&self.mask.beta) {
            return Err(Error::Config(format!("mask.beta {} outside [0, 100]", self.mask.beta)));
        }
        if self.data.n_train == 0 {
            return Err(Error::Config("data.n_train must be positive".into()));
        }
        if self.eval.n_azimuth < 4 || self.eval.n_elevation == 0 {
            return Err(Error::Config("eval needs n_azimuth >= 4 and n_elevation >= 1".into()));
        }
        if self.eval.mask_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("eval.mask_ratios must lie in [0, 1]".into()));
        }
        if self.eval.n_euler_steps == Some(0) {
            return Err(Error::Config("eval.n_euler_steps must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        Ok(())
    }

    /// Canonical text form: every field, defaults included, in fixed order.
    pub fn canonical_text(&self) -> String {
        to_toml(self)
    }

    /// Hash of the training-relevant fields; stored in checkpoints.
    /// Output paths and evaluation/bench settings are excluded.
    pub fn config_hash(&self) -> String {
        sha256_hex(&to_toml(&TrainingIdentity {
            seed: self.seed,
            scene: &self.scene,
            data: &self.data,
            model: &self.model,
            flow: &self.flow,
            mask: &self.mask,
            optimizer: &self.optimizer,
            train: &self.train,
        }))
    }

    /// Hash of the fields that determine the generated scenes.
    pub fn scene_hash(&self) -> String {
        sha256_hex(&to_toml(&SceneIdentity {
            scene: &self.scene,
            first_seed: self.data.first_seed,
        }))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out_dir.join("runs")
    }

    pub fn inference_steps(&self) -> usize {
        self.eval.n_euler_steps.unwrap_or(self.flow.n_euler_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.canonical_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[scene]\ncolour = 3\n").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        assert!(RunConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::parse("seed = 7\n[train]\nepochs = 3\n[flow]\nt_sampling = { fixed = 0.5 }\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.flow.t_sampling, crate::flow::TimeSampling::Fixed(0.5));
    }

    #[test]
    fn hashes_track_the_right_fields() {
        let base = RunConfig::default();
        let mut moved = base.clone();
        moved.out_dir = "elsewhere".into();
        moved.eval.n_azimuth = 90;
        assert_eq!(base.config_hash(), moved.config_hash());
        assert_eq!(base.scene_hash(), moved.scene_hash());

        let mut mt_off = base.clone();
        mt_off.mask.enabled = false;
        assert_ne!(base.config_hash(), mt_off.config_hash());
        assert_eq!(base.scene_hash(), mt_off.scene_hash());

        let mut bigger = base.clone();
        bigger.scene.noise_sigma = 0.5;
        assert_ne!(base.scene_hash(), bigger.scene_hash());
        assert_ne!(base.config_hash(), bigger.config_hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[flow]\nn_euler_steps = 0\n").is_err());
        assert!(RunConfig::parse("[mask]\nbeta = 120.0\n").is_err());
        assert!(RunConfig::parse("[eval]\nmask_ratios = [1.5]\n").is_err());
    }
}
