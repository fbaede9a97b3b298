//! Closed-form trainable-parameter, checkpoint-size, and optimizer-state
//! budgets for every adaptation strategy.
//!
//! The formulas here are the accounting side of the artifact: for any
//! `(config, strategy)` pair they predict exactly how many scalars train,
//! how big a delta checkpoint is, and how much optimizer state Adam must
//! hold. On the toy model the numbers are required to match the live
//! census to the integer; on large named configs they reproduce published
//! counts.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adapters::AdaptationStrategy;
use crate::error::CoreError;
use crate::model::config::ModelConfig;
use crate::Result;

/// Bytes per scalar for checkpoint-size arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Fp16,
    Fp32,
    Fp64,
}

impl Precision {
    pub fn bytes(&self) -> u64 {
        match self {
            Precision::Fp16 => 2,
            Precision::Fp32 => 4,
            Precision::Fp64 => 8,
        }
    }
}

/// Budget for one `(config, strategy)` pair.
///
/// Checkpoint byte counts cover the tensor payload only; the on-disk
/// format adds a small self-describing header on top, which callers
/// account for separately.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBudget {
    pub strategy: AdaptationStrategy,
    pub trainable_params: u64,
    pub checkpoint_bytes_fp16: u64,
    pub checkpoint_bytes_fp32: u64,
    /// Adam first and second moments: two scalars per trainable scalar.
    pub optimizer_state_scalars: u64,
}

/// The general bottleneck-adapter count:
/// `l_adapters * (2 * d_model * r_b + r_b + d_model) + 2 * l_layer_norms * d_model`.
///
/// Exposed on its own so pruned-adapter variants (which drop some layers
/// and are otherwise out of scope) can still be budgeted.
pub fn adapter_param_count(
    l_adapters: u64,
    l_layer_norms: u64,
    d_model: u64,
    r_b: u64,
) -> u64 {
    l_adapters * (2 * d_model * r_b + r_b + d_model) + 2 * l_layer_norms * d_model
}

/// The low-rank count: `2 * l_sites * d_model * r`, where `l_sites` is
/// the number of weight matrices carrying an update.
pub fn lora_param_count(l_sites: u64, d_model: u64, rank: u64) -> u64 {
    2 * l_sites * d_model * rank
}

/// Exact trainable-parameter budget for a strategy on a config.
pub fn count(config: &ModelConfig, strategy: &AdaptationStrategy) -> Result<ParamBudget> {
    config.validate()?;
    let d = config.d_model as u64;
    let l = config.n_layers as u64;
    let trainable: u64 = match strategy {
        AdaptationStrategy::FullFineTune => config.total_params() as u64,
        AdaptationStrategy::FineTuneTop2 => {
            // Last two blocks plus the output head.
            let blocks = l.min(2);
            let per_block = (4 * d * d
                + 4 * d
                + 2 * (config.d_ffn as u64) * d
                + config.d_ffn as u64
                + d
                + 4 * d) as u64;
            blocks * per_block + (config.vocab_size as u64) * d
        }
        AdaptationStrategy::BitFit => config.bias_and_ln_shift_params() as u64,
        AdaptationStrategy::PrefixEmbed { l_p, l_i } => {
            check_slots(config, *l_p, *l_i)?;
            d * (*l_p + *l_i) as u64
        }
        AdaptationStrategy::PrefixLayer { l_p, l_i } => {
            check_slots(config, *l_p, *l_i)?;
            l * d * (*l_p + *l_i) as u64
        }
        AdaptationStrategy::AdapterH { r_b } => {
            check_bottleneck(config, *r_b)?;
            adapter_param_count(2 * l, 0, d, *r_b as u64)
        }
        AdaptationStrategy::AdapterL { r_b } => {
            check_bottleneck(config, *r_b)?;
            adapter_param_count(l, l, d, *r_b as u64)
        }
        AdaptationStrategy::Lora(spec) => {
            check_rank(config, spec.rank)?;
            let sites = l * spec.targets.len() as u64;
            lora_param_count(sites, d, spec.rank as u64)
                + if spec.train_biases { config.bias_params() as u64 } else { 0 }
        }
        AdaptationStrategy::LoraPlusPrefixEmbed { lora, l_p, l_i } => {
            check_rank(config, lora.rank)?;
            check_slots(config, *l_p, *l_i)?;
            let sites = l * lora.targets.len() as u64;
            lora_param_count(sites, d, lora.rank as u64)
                + d * (*l_p + *l_i) as u64
                + if lora.train_biases { config.bias_params() as u64 } else { 0 }
        }
        AdaptationStrategy::LoraPlusPrefixLayer { lora, l_p, l_i } => {
            check_rank(config, lora.rank)?;
            check_slots(config, *l_p, *l_i)?;
            let sites = l * lora.targets.len() as u64;
            lora_param_count(sites, d, lora.rank as u64)
                + l * d * (*l_p + *l_i) as u64
                + if lora.train_biases { config.bias_params() as u64 } else { 0 }
        }
    };
    Ok(ParamBudget {
        strategy: strategy.clone(),
        trainable_params: trainable,
        checkpoint_bytes_fp16: trainable * Precision::Fp16.bytes(),
        checkpoint_bytes_fp32: trainable * Precision::Fp32.bytes(),
        optimizer_state_scalars: 2 * trainable,
    })
}

fn check_slots(config: &ModelConfig, l_p: usize, l_i: usize) -> Result<()> {
    if l_p + l_i >= config.max_seq_len {
        return Err(CoreError::Config(format!(
            "{} prefix slots exhaust the sequence budget of {}",
            l_p + l_i,
            config.max_seq_len
        )));
    }
    Ok(())
}

fn check_bottleneck(config: &ModelConfig, r_b: usize) -> Result<()> {
    if r_b == 0 || r_b >= config.d_model {
        return Err(CoreError::Config(format!(
            "bottleneck {r_b} outside 1..{}",
            config.d_model
        )));
    }
    Ok(())
}

fn check_rank(config: &ModelConfig, rank: usize) -> Result<()> {
    if rank == 0 || rank > config.d_model {
        return Err(CoreError::Config(format!(
            "rank {rank} outside 1..={}",
            config.d_model
        )));
    }
    Ok(())
}

/// Tensor payload bytes for the budget at a given storage precision
/// (excludes the file header; an empty budget is a header-only file).
pub fn checkpoint_size(budget: &ParamBudget, precision: Precision) -> u64 {
    budget.trainable_params * precision.bytes()
}

/// Formats `n` scalars the way the literature tables do: one decimal in
/// millions (or as-is below one hundred thousand).
pub fn display_millions(n: u64) -> String {
    if n < 100_000 {
        format!("{n}")
    } else {
        format!("{:.1}M", n as f64 / 1.0e6)
    }
}

/// One row of [`budget_table`].
#[derive(Debug, Clone)]
pub struct BudgetRow {
    pub label: String,
    pub budget: ParamBudget,
}

/// Computes budgets for a list of strategies and renders them as CSV and
/// as an aligned text table. Returns `(rows, csv, text)`.
pub fn budget_table(
    config: &ModelConfig,
    strategies: &[AdaptationStrategy],
) -> Result<(Vec<BudgetRow>, String, String)> {
    let mut rows = Vec::with_capacity(strategies.len());
    for s in strategies {
        rows.push(BudgetRow { label: s.spec_string(), budget: count(config, s)? });
    }
    let mut csv = String::from(
        "strategy,trainable_params,trainable_display,checkpoint_bytes_fp16,checkpoint_bytes_fp32,optimizer_state_scalars\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            r.budget.trainable_params,
            display_millions(r.budget.trainable_params),
            r.budget.checkpoint_bytes_fp16,
            r.budget.checkpoint_bytes_fp32,
            r.budget.optimizer_state_scalars
        ));
    }

    let mut text = String::new();
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(8).max(8);
    text.push_str(&format!(
        "{:<label_w$}  {:>14}  {:>10}  {:>14}  {:>16}\n",
        "strategy", "trainable", "display", "fp16 bytes", "adam state"
    ));
    for r in &rows {
        text.push_str(&format!(
            "{:<label_w$}  {:>14}  {:>10}  {:>14}  {:>16}\n",
            r.label,
            r.budget.trainable_params,
            display_millions(r.budget.trainable_params),
            r.budget.checkpoint_bytes_fp16,
            r.budget.optimizer_state_scalars
        ));
    }
    Ok((rows, csv, text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AttnWeight, LoraSpec};

    /// The 96-layer, d=12288 configuration used for published counts.
    fn gpt3_like() -> ModelConfig {
        ModelConfig::new(96, 12288, 96, 50257, 2048)
    }

    fn lora(rank: usize, targets: &[AttnWeight]) -> AdaptationStrategy {
        AdaptationStrategy::Lora(LoraSpec::new(rank, targets))
    }

    #[test]
    fn published_counts_reproduce_exactly() {
        let cfg = gpt3_like();
        // rank 2 on one weight type across 96 layers: 4,718,592.
        let b = count(&cfg, &lora(2, &[AttnWeight::V])).unwrap();
        assert_eq!(b.trainable_params, 4_718_592);
        // adapters, r_b = 1, two per block, no extra norms: 7,078,080.
        let b = count(&cfg, &AdaptationStrategy::AdapterH { r_b: 1 }).unwrap();
        assert_eq!(b.trainable_params, 7_078_080);
        // prefix-embedding with 256 + 8 slots: 3,244,032.
        let b = count(&cfg, &AdaptationStrategy::PrefixEmbed { l_p: 256, l_i: 8 }).unwrap();
        assert_eq!(b.trainable_params, 3_244_032);
        // rank 8 on one type: 18,874,368.
        let b = count(&cfg, &lora(8, &[AttnWeight::Q])).unwrap();
        assert_eq!(b.trainable_params, 18_874_368);
        // rank 8 on two types: 37,748,736.
        let b = count(&cfg, &lora(8, &[AttnWeight::Q, AttnWeight::V])).unwrap();
        assert_eq!(b.trainable_params, 37_748_736);
    }

    #[test]
    fn roberta_base_lora_count() {
        let cfg = ModelConfig::new(12, 768, 12, 50265, 512);
        let b = count(&cfg, &lora(8, &[AttnWeight::Q, AttnWeight::V])).unwrap();
        assert_eq!(b.trainable_params, 294_912);
    }

    #[test]
    fn zero_rank_is_rejected() {
        let cfg = ModelConfig::toy();
        assert!(count(&cfg, &lora(0, &[AttnWeight::Q])).is_err());
    }

    #[test]
    fn invariants_hold() {
        let cfg = ModelConfig::toy();
        let strategies = [
            AdaptationStrategy::FullFineTune,
            AdaptationStrategy::FineTuneTop2,
            AdaptationStrategy::BitFit,
            AdaptationStrategy::PrefixEmbed { l_p: 4, l_i: 2 },
            AdaptationStrategy::PrefixLayer { l_p: 2, l_i: 2 },
            AdaptationStrategy::AdapterH { r_b: 8 },
            AdaptationStrategy::AdapterL { r_b: 8 },
            lora(4, &[AttnWeight::Q, AttnWeight::V]),
        ];
        let ft = count(&cfg, &AdaptationStrategy::FullFineTune).unwrap().trainable_params;
        for s in &strategies {
            let b = count(&cfg, s).unwrap();
            assert_eq!(b.optimizer_state_scalars, 2 * b.trainable_params);
            assert_eq!(b.checkpoint_bytes_fp16, 2 * b.trainable_params);
            assert_eq!(b.checkpoint_bytes_fp32, 2 * b.checkpoint_bytes_fp16);
            assert!(ft >= b.trainable_params, "{s:?} exceeds full fine-tuning");
        }
    }

    #[test]
    fn lora_count_is_monotone_in_rank_and_targets() {
        let cfg = ModelConfig::toy();
        let mut last = 0;
        for r in [1, 2, 4, 8, 16] {
            let n = count(&cfg, &lora(r, &[AttnWeight::Q, AttnWeight::V]))
                .unwrap()
                .trainable_params;
            assert!(n > last);
            last = n;
        }
        let one = count(&cfg, &lora(4, &[AttnWeight::Q])).unwrap().trainable_params;
        let two = count(&cfg, &lora(4, &[AttnWeight::Q, AttnWeight::V]))
            .unwrap()
            .trainable_params;
        let four = count(&cfg, &lora(4, &AttnWeight::ALL)).unwrap().trainable_params;
        assert!(one < two && two < four);

        let mut last = 0;
        for r_b in [1, 2, 4, 8] {
            let n = count(&cfg, &AdaptationStrategy::AdapterH { r_b })
                .unwrap()
                .trainable_params;
            assert!(n > last);
            last = n;
        }
    }

    #[test]
    fn checkpoint_arithmetic_matches_published_scale() {
        // rank 4 on two weight types: 18,874,368 scalars; fp16 payload is
        // 37,748,736 bytes (37.7 MB), about 9,272x below a 350 GB model.
        let cfg = gpt3_like();
        let b = count(&cfg, &lora(4, &[AttnWeight::Q, AttnWeight::V])).unwrap();
        let bytes = checkpoint_size(&b, Precision::Fp16);
        assert_eq!(bytes, 37_748_736);
        let full_model_bytes: u64 = 350_000_000_000;
        assert!(full_model_bytes / bytes >= 9_000);
        // Zero-size edge: nothing to store beyond the header.
        let empty = ParamBudget {
            strategy: AdaptationStrategy::BitFit,
            trainable_params: 0,
            checkpoint_bytes_fp16: 0,
            checkpoint_bytes_fp32: 0,
            optimizer_state_scalars: 0,
        };
        assert_eq!(checkpoint_size(&empty, Precision::Fp16), 0);
        assert_eq!(
            checkpoint_size(&b, Precision::Fp32),
            2 * checkpoint_size(&b, Precision::Fp16)
        );
    }

    #[test]
    fn table_renders_csv_and_text() {
        let cfg = gpt3_like();
        let rows = [
            lora(2, &[AttnWeight::V]),
            lora(1, &[AttnWeight::Q, AttnWeight::V]),
            lora(2, &[AttnWeight::Q, AttnWeight::V]),
            lora(1, &AttnWeight::ALL),
            lora(4, &[AttnWeight::Q, AttnWeight::V]),
            lora(2, &AttnWeight::ALL),
            lora(8, &[AttnWeight::Q, AttnWeight::V]),
            lora(4, &AttnWeight::ALL),
            lora(64, &[AttnWeight::Q, AttnWeight::V]),
            lora(64, &AttnWeight::ALL),
        ];
        let (rows, csv, text) = budget_table(&cfg, &rows).unwrap();
        let display: Vec<String> =
            rows.iter().map(|r| display_millions(r.budget.trainable_params)).collect();
        assert_eq!(
            display,
            ["4.7M", "4.7M", "9.4M", "9.4M", "18.9M", "18.9M", "37.7M", "37.7M", "302.0M",
             "604.0M"]
        );
        assert!(csv.lines().count() == 11);
        assert!(text.contains("strategy"));
        // Empty list: header only.
        let (_, csv, _) = budget_table(&cfg, &[]).unwrap();
        assert_eq!(csv.lines().count(), 1);
    }
}
