//! Run configuration: one flat TOML table, validated and echoed into every
//! training output directory.

use std::path::{Path, PathBuf};

use ikno::archive::Precision;
use ikno::datagen::Task;
use ikno::inn::InnConfig;
use ikno::model::IknoConfig;
use ikno::spectral::{Activation, TruncationSpec};
use ikno::train::TrainConfig;
use ikno::{IknoError, Result};
use serde::{Deserialize, Serialize};

/// Everything a training run depends on besides the dataset bytes.
///
/// Model defaults: 16 retained modes per axis, 4 Koopman layers, `K^2`
/// per layer and a 32-dimensional observable (block width 16). Optimizer
/// defaults: Adam at `1e-3`, batch 10, 500 epochs, learning rate halved
/// every 100 epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub precision: Precision,

    /// Snapshots per input window (`T_d`).
    pub window: usize,
    /// Rollout steps the model is evaluated on (`T_p`).
    pub horizon: usize,
    pub layers: usize,
    /// Number of invertible coupling blocks.
    pub depth: usize,
    /// Width of the last coupling block; the observable dimension is twice this.
    pub block_dim: usize,
    pub hidden_dim: usize,
    /// Retained Fourier modes on every spatial axis.
    pub modes: usize,
    /// Power applied to each layer's Koopman matrices.
    pub power: usize,
    pub activation: Activation,

    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_halving_period: usize,
    /// Rollout steps used in the loss; defaults to `horizon`.
    pub train_horizon: Option<usize>,
    pub grad_clip: Option<f64>,
    pub curriculum: bool,
    pub checkpoint_every: usize,
    /// Track loss on the test split each epoch and keep the best parameters.
    pub validate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_task(Task::Burgers1d)
    }
}

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        let (window, horizon) = match task {
            Task::Burgers1d => (10, 20),
            Task::Heat2d => (4, 10),
            Task::Darcy2d => (3, 1),
        };
        let train = TrainConfig::default();
        Self {
            task,
            dataset: PathBuf::from(format!("{task}.ikno")),
            output_dir: PathBuf::from(format!("runs/{task}")),
            seed: 0,
            precision: Precision::Double,
            window,
            horizon,
            layers: 4,
            depth: 2,
            block_dim: 16,
            hidden_dim: 32,
            modes: 16,
            power: 2,
            activation: Activation::Gelu,
            lr0: train.lr0,
            batch_size: train.batch_size,
            epochs: train.epochs,
            lr_halving_period: train.lr_halving_period,
            train_horizon: None,
            grad_clip: None,
            curriculum: false,
            checkpoint_every: train.checkpoint_every,
            validate: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| IknoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn spatial_rank(&self) -> usize {
        match self.task {
            Task::Burgers1d => 1,
            Task::Darcy2d | Task::Heat2d => 2,
        }
    }

    pub fn model_config(&self) -> Result<IknoConfig> {
        let first = self.window.div_ceil(2).min(self.block_dim);
        let mut block_dims = vec![self.block_dim; self.depth];
        if let Some(b) = block_dims.first_mut() {
            *b = (*b).max(first);
        }
        let inn = InnConfig {
            input_dim: self.window,
            block_dims,
            hidden_dims: vec![self.hidden_dim; self.depth],
        };
        let cfg = IknoConfig {
            window: self.window,
            horizon: self.horizon,
            layers: self.layers,
            inn,
            spec: TruncationSpec::new(vec![self.modes; self.spatial_rank()], self.power)?,
            activation: self.activation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_halving_period: self.lr_halving_period,
            horizon: self.train_horizon,
            seed: self.seed,
            precision: self.precision,
            grad_clip: self.grad_clip,
            curriculum: self.curriculum,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.block_dim == 0 || self.hidden_dim == 0 {
            return Err(IknoError::Config("depth, block_dim and hidden_dim must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(IknoError::Config("checkpoint_every must be positive".into()));
        }
        self.model_config()?;
        self.train_config().validate()
    }
}
