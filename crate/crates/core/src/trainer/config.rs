use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Codec, Direction, NoiseSpec, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nn::ModelConfig;

/// Architecture knobs shared by both directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub base_width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    /// Extra encoder stages with attention; the bottleneck always has it.
    pub attention_at: Vec<usize>,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self { base_width: 16, depth: 2, embed_dim: 32, attention_at: Vec::new() }
    }
}

impl ModelShape {
    pub fn config(&self, direction: Direction) -> ModelConfig {
        let mut c = ModelConfig::new(direction, self.base_width, self.depth);
        c.embed_dim = self.embed_dim;
        for &s in &self.attention_at {
            if !c.attention_at.contains(&s) {
                c.attention_at.push(s);
            }
        }
        c.attention_at.sort_unstable();
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    #[default]
    Annotated,
    Wild,
}

/// Learning-rate decay over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` at step 0 to zero at `steps`.
    Cosine,
}

/// One dataset split and its share of every batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub root: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
    pub ratio: f64,
    #[serde(default)]
    pub kind: SourceKind,
}

fn default_split() -> String {
    "train".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Set for independent training; `None` selects joint cycle training.
    pub direction: Option<Direction>,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub grad_clip: f64,
    pub dropout_p: f64,
    pub lambda_cyc: f64,
    pub use_task_loss_in_cycle: bool,
    /// Stop cycle gradients at the intermediate prediction.
    pub detach_cycle: bool,
    /// Feed the forward model predicted rather than ground-truth intrinsics
    /// in the X → I → X chain.
    pub cycle_x_from_prediction: bool,
    pub wild_caption: String,
    pub seed: u64,
    pub sources: Vec<DataSource>,
    pub model: ModelShape,
    pub schedule: ScheduleConfig,
    pub noise: NoiseSpec,
    pub codec: Codec,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            direction: Some(Direction::Rgb2x),
            steps: 1000,
            batch_size: 4,
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            grad_clip: 1.0,
            dropout_p: 0.3,
            lambda_cyc: 1.0,
            use_task_loss_in_cycle: true,
            detach_cycle: false,
            cycle_x_from_prediction: false,
            wild_caption: "a photo".into(),
            seed: 0,
            sources: Vec::new(),
            model: ModelShape::default(),
            schedule: ScheduleConfig::default(),
            noise: NoiseSpec::default(),
            codec: Codec::Identity,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate for the update that follows `step` completed steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let f = (step.min(self.steps) as f64 / self.steps as f64) * std::f64::consts::PI;
                self.lr * 0.5 * (1.0 + f.cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lr and grad_clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1]", self.dropout_p)));
        }
        if !(self.lambda_cyc >= 0.0) {
            return Err(Error::Config("lambda_cyc must be non-negative".into()));
        }
        self.noise.validate()?;
        self.schedule.build()?;
        if !self.sources.is_empty() {
            let sum: f64 = self.sources.iter().map(|s| s.ratio).sum();
            if (sum - 1.0).abs() > 1e-9 || self.sources.iter().any(|s| !(s.ratio >= 0.0)) {
                return Err(Error::Config(format!("source ratios must be non-negative and sum to 1, got {sum}")));
            }
        }
        if self.direction.is_some() && self.sources.iter().any(|s| s.kind == SourceKind::Wild) {
            return Err(Error::Config("wild sources are only allowed in joint training".into()));
        }
        for d in [Direction::Rgb2x, Direction::X2rgb] {
            self.model.config(d).validate()?;
        }
        Ok(())
    }
}
