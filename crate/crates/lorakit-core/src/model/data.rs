//! Synthetic context-target datasets.
//!
//! There are three generators: a corpus with local-copy structure for
//! pre-training, and two downstream tasks (sequence reversal and key-value
//! lookup) so that adapting, merging, and switching between two tasks can
//! all be demonstrated. All are fabricated for desk scale; none comes from
//! a real corpus.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::CoreError;
use crate::model::config::ModelConfig;
use crate::rng::derived_rng;
use crate::Result;

/// A list of `(context, target)` token sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl TaskDataset {
    /// Checks token range and sequence budget. `reserved_slots` is the
    /// number of positions claimed by prefix/infix tuning, which shrinks
    /// the usable task length.
    pub fn validate(&self, config: &ModelConfig, reserved_slots: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(CoreError::Config("dataset is empty".into()));
        }
        let budget = config
            .max_seq_len
            .checked_sub(reserved_slots)
            .ok_or_else(|| CoreError::Config("prefix slots exceed max_seq_len".into()))?;
        for (i, (x, y)) in self.pairs.iter().enumerate() {
            if x.len() + y.len() > budget {
                return Err(CoreError::Config(format!(
                    "pair {i} is {} tokens but only {budget} fit after reserving {reserved_slots} slots",
                    x.len() + y.len()
                )));
            }
            if y.is_empty() {
                return Err(CoreError::Config(format!("pair {i} has an empty target")));
            }
            if x.iter().chain(y).any(|&t| t >= config.vocab_size) {
                return Err(CoreError::Config(format!("pair {i} has a token out of range")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// The synthetic tasks understood by the trainer and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Task {
    /// Pre-training corpus: token streams biased toward repeating recent
    /// tokens. Context is empty; the whole stream is the target.
    PretrainCopy,
    /// Downstream task A: the target is the reversed context.
    Reverse,
    /// Downstream task B: the context lists key-value pairs and ends with
    /// a query key; the target is the matching value.
    KvLookup,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::PretrainCopy => "pretrain-copy",
            Task::Reverse => "reverse",
            Task::KvLookup => "kv-lookup",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "pretrain-copy" => Ok(Task::PretrainCopy),
            "reverse" => Ok(Task::Reverse),
            "kv-lookup" => Ok(Task::KvLookup),
            other => Err(CoreError::Config(format!("unknown task '{other}'"))),
        }
    }

    /// Dataset size used when a run does not specify one.
    pub fn default_pairs(&self) -> usize {
        match self {
            Task::PretrainCopy => 256,
            Task::Reverse | Task::KvLookup => 192,
        }
    }

    /// Generates `n_pairs` examples. Deterministic in `(task, seed)`.
    pub fn generate(&self, config: &ModelConfig, n_pairs: usize, seed: u64) -> TaskDataset {
        let mut rng = derived_rng(seed, 0x44_41_54_41); // data stream
        let vocab = config.vocab_size;
        let mut pairs = Vec::with_capacity(n_pairs);
        match self {
            Task::PretrainCopy => {
                let len = 16.min(config.max_seq_len);
                for _ in 0..n_pairs {
                    let mut y = Vec::with_capacity(len);
                    for t in 0..len {
                        let roll: f64 = rng.random();
                        let tok = if t >= 1 && roll < 0.55 {
                            y[t - 1]
                        } else if t >= 2 && roll < 0.70 {
                            y[t - 2]
                        } else {
                            rng.random_range(0..vocab)
                        };
                        y.push(tok);
                    }
                    pairs.push((Vec::new(), y));
                }
            }
            Task::Reverse => {
                let len = 5.min(config.max_seq_len / 2);
                for _ in 0..n_pairs {
                    let x: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
                    let y: Vec<usize> = x.iter().rev().copied().collect();
                    pairs.push((x, y));
                }
            }
            Task::KvLookup => {
                let half = vocab / 2;
                let n_slots = 4;
                for _ in 0..n_pairs {
                    // Distinct keys from the lower half, values from the
                    // upper half.
                    let mut keys: Vec<usize> = Vec::with_capacity(n_slots);
                    while keys.len() < n_slots {
                        let k = rng.random_range(0..half);
                        if !keys.contains(&k) {
                            keys.push(k);
                        }
                    }
                    let vals: Vec<usize> =
                        (0..n_slots).map(|_| rng.random_range(half..vocab)).collect();
                    let mut x = Vec::with_capacity(2 * n_slots + 1);
                    for i in 0..n_slots {
                        x.push(keys[i]);
                        x.push(vals[i]);
                    }
                    let pick = rng.random_range(0..n_slots);
                    x.push(keys[pick]);
                    pairs.push((x, alloc::vec![vals[pick]]));
                }
            }
        }
        TaskDataset { pairs }
    }
}

/// Human-readable one-liner for logs and metric files.
pub fn describe(task: Task) -> String {
    String::from(task.name())
}
