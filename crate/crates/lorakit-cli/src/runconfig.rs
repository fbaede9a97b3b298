//! Flat `key = value` run configuration files.
//!
//! One file describes one training run: the task, the model shape, the
//! adaptation strategy, and optimizer hyperparameters. Lines starting
//! with `#` are comments. Unknown keys are rejected rather than ignored
//! so typos fail loudly. Every hyperparameter is optional; omitted ones
//! fall back to the shipped per-strategy recipe.

use std::fs;
use std::path::Path;

use lorakit_core::adapters::AdaptationStrategy;
use lorakit_core::model::{LrSchedule, ModelConfig, Task, TaskDataset, TrainConfig};
use lorakit_core::CoreError;

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub strategy: Option<AdaptationStrategy>,
    pub seed: u64,
    pub n_pairs: Option<usize>,
    pub out_dir: Option<String>,
    // Optimizer overrides; `None` means "use the recipe default".
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub warmup_steps: Option<usize>,
    pub lr_schedule: Option<LrSchedule>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::PretrainCopy,
            model: ModelConfig::toy(),
            strategy: None,
            seed: 42,
            n_pairs: None,
            out_dir: None,
            epochs: None,
            batch_size: None,
            lr: None,
            weight_decay: None,
            warmup_steps: None,
            lr_schedule: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let bad = |line: usize, why: String| {
            CliError::Core(CoreError::Config(format!("config line {}: {why}", line + 1)))
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(idx, format!("expected key = value, got '{line}'")))?;
            let key = key.trim();
            let value = value.trim();
            let as_usize = || {
                value
                    .parse::<usize>()
                    .map_err(|_| bad(idx, format!("'{value}' is not a number for {key}")))
            };
            let as_f64 = || {
                value
                    .parse::<f64>()
                    .map_err(|_| bad(idx, format!("'{value}' is not a float for {key}")))
            };
            match key {
                "task" => cfg.task = Task::parse(value)?,
                "strategy" => cfg.strategy = Some(AdaptationStrategy::parse(value)?),
                "seed" => {
                    cfg.seed = value
                        .parse::<u64>()
                        .map_err(|_| bad(idx, format!("'{value}' is not a seed")))?
                }
                "n_pairs" => cfg.n_pairs = Some(as_usize()?),
                "out_dir" => cfg.out_dir = Some(value.to_string()),
                "epochs" => cfg.epochs = Some(as_usize()?),
                "batch_size" => cfg.batch_size = Some(as_usize()?),
                "lr" | "learning_rate" => cfg.lr = Some(as_f64()?),
                "weight_decay" => cfg.weight_decay = Some(as_f64()?),
                "warmup_steps" => cfg.warmup_steps = Some(as_usize()?),
                "lr_schedule" => {
                    cfg.lr_schedule = Some(match value {
                        "constant" => LrSchedule::Constant,
                        "linear" => LrSchedule::Linear { warmup_steps: 0 },
                        other => {
                            return Err(bad(idx, format!("unknown schedule '{other}'")))
                        }
                    })
                }
                "model.n_layers" => cfg.model.n_layers = as_usize()?,
                "model.d_model" => cfg.model.d_model = as_usize()?,
                "model.n_heads" => cfg.model.n_heads = as_usize()?,
                "model.d_ffn" => cfg.model.d_ffn = as_usize()?,
                "model.vocab_size" => cfg.model.vocab_size = as_usize()?,
                "model.max_seq_len" => cfg.model.max_seq_len = as_usize()?,
                other => return Err(bad(idx, format!("unknown key '{other}'"))),
            }
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Training hyperparameters: the strategy recipe with this file's
    /// overrides applied. `strategy = None` selects the pretrain recipe.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = match &self.strategy {
            Some(s) => TrainConfig::adapt_default(s),
            None => TrainConfig::pretrain_default(),
        };
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        if let Some(lr) = self.lr {
            t.optimizer.lr = lr;
        }
        if let Some(wd) = self.weight_decay {
            t.optimizer.weight_decay = wd;
        }
        match (self.lr_schedule, self.warmup_steps) {
            (Some(LrSchedule::Constant), _) => t.schedule = LrSchedule::Constant,
            (Some(LrSchedule::Linear { .. }), w) => {
                let prev = match t.schedule {
                    LrSchedule::Linear { warmup_steps } => warmup_steps,
                    LrSchedule::Constant => 0,
                };
                t.schedule = LrSchedule::Linear { warmup_steps: w.unwrap_or(prev) };
            }
            (None, Some(w)) => {
                t.schedule = LrSchedule::Linear { warmup_steps: w };
            }
            (None, None) => {}
        }
        t
    }

    /// Generates the dataset this run trains or evaluates on.
    pub fn dataset(&self) -> TaskDataset {
        let n = self.n_pairs.unwrap_or_else(|| self.task.default_pairs());
        self.task.generate(&self.model, n, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_file() {
        let cfg = RunConfig::parse(
            "# adaptation run\n\
             task = reverse\n\
             strategy = lora:r=4:qv\n\
             seed = 7\n\
             epochs = 120\n\
             lr = 0.02\n\
             model.n_layers = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.task, Task::Reverse);
        assert_eq!(cfg.seed, 7);
        let t = cfg.train_config();
        assert_eq!(t.epochs, 120);
        assert_eq!(t.optimizer.lr, 0.02);
        // Unset keys fall back to the low-rank recipe.
        assert_eq!(t.batch_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("learning = 3").is_err());
        assert!(RunConfig::parse("task = reverse\nfoo = 1").is_err());
        assert!(RunConfig::parse("no_equals_sign").is_err());
    }

    #[test]
    fn recipe_defaults_depend_on_strategy() {
        let ft = RunConfig::parse("task = reverse\nstrategy = ft\n").unwrap();
        let lora = RunConfig::parse("task = reverse\nstrategy = lora:r=4:qv\n").unwrap();
        assert!(ft.train_config().optimizer.lr < lora.train_config().optimizer.lr);
    }
}
