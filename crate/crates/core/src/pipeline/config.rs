use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mae::{FinetuneConfig, MaeConfig, Pooling};
use crate::masking::{BudgetSpec, Strategy};
use crate::numerics::{AdamConfig, LrSchedule, OptimizerConfig};
use crate::tokenizer::TokenizerConfig;
use crate::video::{patch_grid, Background, SceneSpec};

pub const SEED_ENV: &str = "LVMAE_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainTokenizer,
    Pretrain,
    Finetune,
    Eval,
    Masks,
    Cost,
    Viz,
    GenData,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::TrainTokenizer,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Eval,
        Stage::Masks,
        Stage::Cost,
        Stage::Viz,
        Stage::GenData,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainTokenizer => "train-tokenizer",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Masks => "masks",
            Stage::Cost => "cost",
            Stage::Viz => "viz",
            Stage::GenData => "gen-data",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config("bad_stage", format!("unknown stage {s:?}")))
    }
}

/// What the generated clips are labelled with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Free sprite scenes, every label 0.
    Scenes,
    /// One horizontally moving sprite; label 1 when it moves right.
    Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub min_lr: f64,
    pub optimizer: OptimizerConfig,
    /// Write a resumable checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            steps: 200,
            batch_size: 4,
            peak_lr: 1e-3,
            warmup_steps: 20,
            min_lr: 0.0,
            optimizer: OptimizerConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl Schedule {
    pub fn lr(&self) -> LrSchedule {
        LrSchedule { peak_lr: self.peak_lr, warmup_steps: self.warmup_steps, total_steps: self.steps, min_lr: self.min_lr }
    }

    /// Learning rate of 0-based step `step`; warmup reaches the peak on its last step.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        self.lr().lr_at(step + 1)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("bad_schedule", format!("{what}: steps and batch_size must be positive")));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::config("bad_schedule", format!("{what}: warmup_steps must be below steps")));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) || !(0.0..=self.peak_lr).contains(&self.min_lr) {
            return Err(Error::config("bad_schedule", format!("{what}: need 0 <= min_lr <= peak_lr, peak_lr > 0")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Frames per crop; 0 means the whole clip.
    pub crop_frames: usize,
    pub n_crops: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { crop_frames: 0, n_crops: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    pub frames: Vec<usize>,
    pub rho_d: Vec<f64>,
    pub bytes_per_value: usize,
    pub batch: usize,
    /// Activation budget in bytes; rows are flagged as fitting or not.
    pub activation_budget: Option<f64>,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            frames: vec![16, 32, 64, 128],
            rho_d: vec![0.0, 0.15, 0.3, 0.45, 0.6, 0.75, 0.85],
            bytes_per_value: 4,
            batch: 1,
            activation_budget: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Clips (`.rvid`, optional `.rflo`, `labels.csv`); generated in memory when unset.
    pub data_dir: Option<PathBuf>,
    /// Validation clips for fine-tuning and evaluation.
    pub val_dir: Option<PathBuf>,
    /// Frozen tokenizer checkpoint.
    pub tokenizer: Option<PathBuf>,
    /// Input checkpoint: MAE weights for fine-tuning, the classifier for eval.
    pub checkpoint: Option<PathBuf>,
    /// Pre-training checkpoint to resume from.
    pub resume: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub stage: Stage,
    pub seed: u64,
    /// Clip geometry and generator settings for in-memory or generated data.
    pub scene: SceneSpec,
    pub task: Task,
    /// Clips generated when no data directory is given.
    pub clips: usize,
    pub val_clips: usize,
    pub budget: BudgetSpec,
    pub strategy: String,
    pub uniform_step: usize,
    pub mae: MaeConfig,
    pub tokenizer: TokenizerConfig,
    pub finetune: FinetuneConfig,
    pub tokenizer_schedule: Schedule,
    pub pretrain_schedule: Schedule,
    pub finetune_schedule: Schedule,
    pub eval: EvalConfig,
    pub cost: CostConfig,
    /// Write every step's masks during pre-training.
    pub dump_masks: bool,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Small geometry and models that train in minutes on one core.
    pub fn desk() -> Self {
        ExperimentConfig {
            stage: Stage::Pretrain,
            seed: 0,
            scene: SceneSpec::default(),
            task: Task::Scenes,
            clips: 8,
            val_clips: 32,
            budget: BudgetSpec::default(),
            strategy: Strategy::Adaptive.name().to_string(),
            uniform_step: 7,
            mae: MaeConfig::default(),
            tokenizer: TokenizerConfig::default(),
            finetune: FinetuneConfig::default(),
            tokenizer_schedule: Schedule {
                steps: 2000,
                batch_size: 2,
                peak_lr: 3e-3,
                warmup_steps: 100,
                optimizer: OptimizerConfig::Adam(AdamConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 }),
                ..Schedule::default()
            },
            pretrain_schedule: Schedule { steps: 200, batch_size: 4, peak_lr: 1e-3, warmup_steps: 20, ..Schedule::default() },
            finetune_schedule: Schedule { steps: 500, batch_size: 8, peak_lr: 1e-3, warmup_steps: 20, ..Schedule::default() },
            eval: EvalConfig::default(),
            // 512 MiB: a small accelerator's activation headroom at desk scale.
            cost: CostConfig { activation_budget: Some(512.0 * 1024.0 * 1024.0), ..CostConfig::default() },
            dump_masks: false,
            paths: Paths { output_dir: PathBuf::from("runs/desk"), ..Paths::default() },
        }
    }

    /// Full-size hyperparameters: 128 frames at 224x224, ViT-B, 2x16x16
    /// tubelets, the 18-bit FSQ tokenizer. Step counts are nominal.
    pub fn full() -> Self {
        let desk = Self::desk();
        ExperimentConfig {
            scene: SceneSpec {
                frames: 128,
                height: 224,
                width: 224,
                tubelet: [2, 16, 16],
                size_min: 24,
                size_max: 48,
                background: Background::Noise,
                ..SceneSpec::default()
            },
            mae: MaeConfig::full(),
            tokenizer: TokenizerConfig::full(),
            finetune: FinetuneConfig { pooling: Pooling::Mean, drop_ratio: 0.2, ..FinetuneConfig::default() },
            tokenizer_schedule: Schedule {
                steps: 100_000,
                batch_size: 256,
                peak_lr: 1e-4,
                warmup_steps: 5_000,
                optimizer: OptimizerConfig::Adam(AdamConfig { beta1: 0.0, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 }),
                ..Schedule::default()
            },
            pretrain_schedule: Schedule {
                steps: 1600,
                batch_size: 512,
                peak_lr: 1.5e-4,
                warmup_steps: 40,
                optimizer: OptimizerConfig::Adam(AdamConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }),
                checkpoint_every: 100,
                ..Schedule::default()
            },
            finetune_schedule: Schedule {
                steps: 200,
                batch_size: 64,
                peak_lr: 0.5,
                warmup_steps: 3,
                optimizer: OptimizerConfig::Momentum { beta: 0.9, weight_decay: 0.0 },
                ..Schedule::default()
            },
            eval: EvalConfig { crop_frames: 128, n_crops: 1 },
            cost: CostConfig::default(),
            paths: Paths { output_dir: PathBuf::from("runs/full"), ..Paths::default() },
            ..desk
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(Error::config("bad_preset", format!("unknown preset {name:?}; expected desk or full"))),
        }
    }

    pub fn strategy(&self) -> Result<Strategy> {
        Strategy::parse(&self.strategy)
    }

    pub fn validate(&self) -> Result<()> {
        let geometry = |e: Error| Error::config("bad_geometry", e.to_string());
        self.strategy()?;
        if self.scene.tubelet != self.mae.tubelet {
            return Err(Error::config(
                "bad_geometry",
                format!("scene tubelet {:?} differs from MAE tubelet {:?}", self.scene.tubelet, self.mae.tubelet),
            ));
        }
        patch_grid(self.scene.frames, self.scene.height, self.scene.width, self.scene.tubelet).map_err(geometry)?;
        self.budget.check_ranges().map_err(|e| Error::config("bad_budget", e.to_string()))?;
        self.mae.validate().map_err(|e| Error::config("bad_model", e.to_string()))?;
        self.tokenizer.validate().map_err(|e| Error::config("bad_model", e.to_string()))?;
        if self.clips == 0 || self.val_clips == 0 {
            return Err(Error::config("bad_data", "clips and val_clips must be positive"));
        }
        if self.uniform_step == 0 {
            return Err(Error::config("bad_strategy", "uniform_step must be positive"));
        }
        self.tokenizer_schedule.validate("tokenizer_schedule")?;
        self.pretrain_schedule.validate("pretrain_schedule")?;
        self.finetune_schedule.validate("finetune_schedule")?;
        if self.eval.n_crops == 0 {
            return Err(Error::config("bad_eval", "n_crops must be positive"));
        }
        if self.cost.frames.is_empty() || self.cost.rho_d.is_empty() {
            return Err(Error::config("bad_cost", "cost sweep needs frames and rho_d values"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("bad_config", format!("config JSON: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("missing_input", format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the compact JSON form; stable across parse/serialize cycles.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(compact))
    }

    /// Applies `key.path=value` overrides. Values parse as JSON and fall back
    /// to plain strings; every key must already exist in the config.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for set in sets {
            let set = set.as_ref();
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::config("bad_override", format!("override {set:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut tree;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::config("unknown_key", format!("no config key {key:?}")))?;
            }
            *node = value;
        }
        serde_json::from_value(tree).map_err(|e| Error::config("bad_override", format!("override does not fit the config: {e}")))
    }

    /// Replaces the seed with `LVMAE_SEED` when that variable is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::config("bad_seed", format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }
}
