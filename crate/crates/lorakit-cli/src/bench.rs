//! Inference-latency microbenchmark.
//!
//! Measures single forward passes of a mid-sized decoder (12 layers,
//! d_model 512 by default) under five variants: the plain model, a model
//! with low-rank updates folded into its weights, the same updates left
//! unmerged, and the two bottleneck-adapter designs. Folded updates
//! execute the exact operation sequence of the base model — verified
//! structurally before any timing — so their latency difference is pure
//! measurement noise. Adapters add two sequential matmuls per adapter
//! layer and show up as real slowdown, largest when the per-call GEMM
//! work is smallest (batch 1, short sequences).
//!
//! Weights are random: latency depends on shapes, not values.

use std::time::Instant;

use lorakit_core::adapters::{AdaptState, AdaptationStrategy, AttnWeight, LoraSpec};
use lorakit_core::matrix::Matrix;
use lorakit_core::model::{
    adapt, forward_batch, ModelConfig, SeqExample, Task, TrainConfig, TransformerModel,
};
use lorakit_core::rng::derived_rng;
use lorakit_core::CoreError;
use rand::Rng as _;

use crate::error::{CliError, Result};

/// Latency variants, in reporting order.
pub const VARIANTS: [&str; 5] =
    ["base", "lora_merged", "lora_unmerged", "adapter_H", "adapter_L"];

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub model: ModelConfig,
    /// `(batch, seq_len)` grid points.
    pub grid: Vec<(usize, usize)>,
    /// Low-rank ranks / adapter bottlenecks to measure.
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            // Larger than the training toy so per-pass times dwarf timer
            // noise; the narrow MLP keeps a full grid under a few minutes.
            model: ModelConfig::new(12, 512, 8, 256, 512).with_d_ffn(512),
            grid: vec![(1, 128), (32, 4)],
            sizes: vec![16, 64],
            trials: 100,
            warmup: 3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatencyRecord {
    pub variant: String,
    pub batch: usize,
    pub seq_len: usize,
    /// Rank or bottleneck width; 0 for the base variant.
    pub size: usize,
    pub trials: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Median of ten group means; robust to scheduler outliers.
    pub median_of_means_ms: f64,
    /// Percent over the base variant measured in the same session.
    pub slowdown_pct: f64,
}

/// The spec'd CSV shape: `variant,batch,seq_len,size,trials,mean_ms,std_ms,slowdown_pct`.
pub fn latency_csv(records: &[LatencyRecord]) -> String {
    let mut out = String::from("variant,batch,seq_len,size,trials,mean_ms,std_ms,slowdown_pct\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.4},{:.3}\n",
            r.variant, r.batch, r.seq_len, r.size, r.trials, r.mean_ms, r.std_ms, r.slowdown_pct
        ));
    }
    out
}

fn random_tokens(vocab: usize, n: usize, rng: &mut lorakit_core::rng::Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Randomizes factor/adapter weights so folded updates actually change
/// the host weights (latency itself is value-independent).
fn randomize_state(state: &mut AdaptState, seed: u64) {
    let mut rng = derived_rng(seed, 0x42_4e_43_48);
    for m in &mut state.lora {
        m.b = Matrix::randn(m.b.rows(), m.b.cols(), 0.02, &mut rng);
    }
    for a in &mut state.adapters {
        a.w_up = Matrix::randn(a.w_up.rows(), a.w_up.cols(), 0.02, &mut rng);
    }
}

struct TimedStats {
    mean_ms: f64,
    std_ms: f64,
    median_of_means_ms: f64,
}

fn summarize(samples_ms: &[f64]) -> TimedStats {
    let trials = samples_ms.len();
    let mean = samples_ms.iter().sum::<f64>() / trials as f64;
    let var =
        samples_ms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / trials as f64;
    // Median of ~10 group means.
    let groups = 10.min(trials).max(1);
    let group_len = (trials / groups).max(1);
    let mut means: Vec<f64> = samples_ms
        .chunks(group_len)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let median = means[means.len() / 2];
    TimedStats { mean_ms: mean, std_ms: var.sqrt(), median_of_means_ms: median }
}

/// Times every variant with interleaved rounds — one forward per variant
/// per round, in a freshly shuffled order each round — so both slow drift
/// and periodic frequency changes hit all variants alike instead of
/// biasing whichever position they occupy.
///
/// Returns per-variant stats plus the median over rounds of each
/// variant's time divided by the base (index 0) time of the same round;
/// pairing within rounds cancels machine-speed changes between rounds.
fn time_variants(
    variants: &[(&TransformerModel, Option<&AdaptState>)],
    batch: &[SeqExample],
    trials: usize,
    warmup: usize,
    rng: &mut lorakit_core::rng::Rng,
) -> Result<(Vec<TimedStats>, Vec<f64>)> {
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(trials); variants.len()];
    for &(model, state) in variants {
        for _ in 0..warmup {
            forward_batch(model, state, batch)?;
        }
    }
    let mut order: Vec<usize> = (0..variants.len()).collect();
    for _ in 0..trials {
        // Fisher-Yates with the session RNG.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for &idx in &order {
            let (model, state) = variants[idx];
            let t = Instant::now();
            forward_batch(model, state, batch)?;
            samples[idx].push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mut ratios = Vec::with_capacity(variants.len());
    for v in 0..variants.len() {
        let mut per_round: Vec<f64> = samples[v]
            .iter()
            .zip(&samples[0])
            .map(|(t, base)| t / base)
            .collect();
        per_round.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        ratios.push(per_round[per_round.len() / 2]);
    }
    Ok((samples.iter().map(|s| summarize(s)).collect(), ratios))
}

/// Pins the current thread to one CPU so frequency and migration noise
/// stay out of the measurements (no-op where unsupported).
fn pin_to_cpu0() {
    #[cfg(target_os = "linux")]
    // Safety: CPU_ZERO/CPU_SET write only into the local cpu_set_t and
    // sched_setaffinity reads it; failures are ignored.
    #[allow(unsafe_code)]
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        libc::CPU_SET(0, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
    }
}

/// Runs the full latency grid.
///
/// Before any timing, the operation counts of each variant are compared
/// against the base model: folded low-rank variants must match exactly
/// and adapter variants must add exactly two matmuls per adapter layer.
pub fn run_latency(cfg: &BenchConfig) -> Result<Vec<LatencyRecord>> {
    pin_to_cpu0();
    cfg.model.validate()?;
    if cfg.trials < 100 {
        return Err(CliError::Core(CoreError::Config(format!(
            "latency records require at least 100 trials, got {}",
            cfg.trials
        ))));
    }
    if cfg.grid.is_empty() || cfg.sizes.is_empty() {
        return Err(CliError::Core(CoreError::Config("empty benchmark grid".into())));
    }
    let base = TransformerModel::init(cfg.model, cfg.seed)?;
    let mut records = Vec::new();
    let mut rng = derived_rng(cfg.seed, 0x54_4f_4b_53);

    // One merged-weights model is shared by all grid points: after
    // folding, the executed math no longer depends on the rank.
    let merge_rank = cfg.sizes[0];
    let mut merged_model = base.clone();
    let mut merged_state = AdaptState::attach(
        &cfg.model,
        AdaptationStrategy::Lora(LoraSpec::new(merge_rank, &[AttnWeight::Q, AttnWeight::V])),
        cfg.seed,
    )?;
    randomize_state(&mut merged_state, cfg.seed);
    merged_state.merge_all(&mut merged_model)?;

    // Unmerged and adapter states share the base weights.
    let mut unmerged_states = Vec::new();
    let mut adapter_states = Vec::new();
    for &size in &cfg.sizes {
        let mut st = AdaptState::attach(
            &cfg.model,
            AdaptationStrategy::Lora(LoraSpec::new(size, &[AttnWeight::Q, AttnWeight::V])),
            cfg.seed,
        )?;
        randomize_state(&mut st, cfg.seed);
        unmerged_states.push((size, st));
        for (variant, strategy) in [
            ("adapter_H", AdaptationStrategy::AdapterH { r_b: size }),
            ("adapter_L", AdaptationStrategy::AdapterL { r_b: size }),
        ] {
            let mut st = AdaptState::attach(&cfg.model, strategy, cfg.seed)?;
            randomize_state(&mut st, cfg.seed);
            adapter_states.push((variant, size, st));
        }
    }

    for &(batch, seq) in &cfg.grid {
        if batch == 0 || seq == 0 || seq > cfg.model.max_seq_len {
            return Err(CliError::Core(CoreError::Config(format!(
                "bad grid point ({batch}, {seq})"
            ))));
        }
        let seqs: Vec<Vec<usize>> =
            (0..batch).map(|_| random_tokens(cfg.model.vocab_size, seq, &mut rng)).collect();
        let examples: Vec<SeqExample> =
            seqs.iter().map(|s| SeqExample { x: s, y: &[] }).collect();

        // Structural audit before any clock starts.
        let (_, base_ops) = forward_batch(&base, None, &examples)?;
        let (_, merged_ops) = forward_batch(&merged_model, Some(&merged_state), &examples)?;
        if merged_ops != base_ops {
            return Err(CliError::Format(
                "merged forward does not execute the base operation sequence".to_string(),
            ));
        }
        for (size, st) in &unmerged_states {
            let (_, ops) = forward_batch(&base, Some(st), &examples)?;
            if ops.matmuls != base_ops.matmuls + 2 * st.lora.len() {
                return Err(CliError::Format(format!(
                    "unmerged rank-{size} forward ran {} matmuls, expected {}",
                    ops.matmuls,
                    base_ops.matmuls + 2 * st.lora.len()
                )));
            }
        }
        for (variant, size, st) in &adapter_states {
            let (_, ops) = forward_batch(&base, Some(st), &examples)?;
            let expected = base_ops.matmuls + 2 * st.adapters.len();
            if ops.matmuls != expected {
                return Err(CliError::Format(format!(
                    "{variant} (size {size}) ran {} matmuls, expected {expected}",
                    ops.matmuls
                )));
            }
        }

        // Interleaved timing of every variant at this grid point.
        let mut labels: Vec<(&str, usize)> = vec![("base", 0), ("lora_merged", merge_rank)];
        let mut contexts: Vec<(&TransformerModel, Option<&AdaptState>)> =
            vec![(&base, None), (&merged_model, Some(&merged_state))];
        for (size, st) in &unmerged_states {
            labels.push(("lora_unmerged", *size));
            contexts.push((&base, Some(st)));
        }
        for (variant, size, st) in &adapter_states {
            labels.push((variant, *size));
            contexts.push((&base, Some(st)));
        }
        let (stats, ratios) =
            time_variants(&contexts, &examples, cfg.trials, cfg.warmup, &mut rng)?;

        let base_mean = stats[0].mean_ms;
        if base_mean < 0.05 {
            return Err(CliError::Format(format!(
                "forward pass at ({batch}, {seq}) takes {base_mean:.4} ms, too close to \
                 timer resolution; use a larger model or longer sequences"
            )));
        }
        for (((label, size), t), ratio) in labels.iter().zip(&stats).zip(&ratios) {
            records.push(LatencyRecord {
                variant: (*label).into(),
                batch,
                seq_len: seq,
                size: *size,
                trials: cfg.trials,
                mean_ms: t.mean_ms,
                std_ms: t.std_ms,
                median_of_means_ms: t.median_of_means_ms,
                slowdown_pct: (ratio - 1.0) * 100.0,
            });
        }
    }
    Ok(records)
}

/// Checks the folded-update latency bound: every `lora_merged` record must
/// sit within `bound_pct` of its base.
pub fn check_merged_bound(records: &[LatencyRecord], bound_pct: f64) -> Result<()> {
    for r in records.iter().filter(|r| r.variant == "lora_merged") {
        if r.slowdown_pct.abs() > bound_pct {
            return Err(CliError::BenchBound(format!(
                "lora_merged at batch {} seq {} size {} is {:+.2}% vs base (bound {:.1}%)",
                r.batch, r.seq_len, r.size, r.slowdown_pct, bound_pct
            )));
        }
    }
    Ok(())
}

/// Training-throughput comparison: full fine-tuning vs a rank-4 update on
/// the toy model, over the same number of optimizer steps.
#[derive(Debug, Clone)]
pub struct ThroughputRecord {
    pub strategy: String,
    pub steps: usize,
    pub tokens_per_sec: f64,
    /// Scalars receiving gradients each step (exact census).
    pub gradient_scalars: usize,
}

pub fn throughput_probe(steps: usize, seed: u64) -> Result<(ThroughputRecord, ThroughputRecord)> {
    if steps == 0 {
        return Err(CliError::Core(CoreError::Config(
            "throughput probe needs at least one step".into(),
        )));
    }
    let config = ModelConfig::toy();
    let batch_size = 16;
    let data = Task::Reverse.generate(&config, batch_size * steps, seed);
    let (base, _) = lorakit_core::model::pretrain(
        config,
        &Task::PretrainCopy.generate(&config, 64, seed),
        &TrainConfig { epochs: 2, ..TrainConfig::pretrain_default() },
        seed,
    )?;
    let tokens_per_pair = data.pairs[0].0.len() + data.pairs[0].1.len();
    let total_tokens = (batch_size * steps * tokens_per_pair) as f64;

    let run = |strategy: AdaptationStrategy| -> Result<ThroughputRecord> {
        let label = strategy.label().to_string();
        let train = TrainConfig {
            epochs: 1,
            batch_size,
            ..TrainConfig::adapt_default(&strategy)
        };
        let mut model = base.clone();
        let t = Instant::now();
        let (_, report) = adapt(&mut model, &data, strategy, &train, seed)?;
        let secs = t.elapsed().as_secs_f64();
        Ok(ThroughputRecord {
            strategy: label,
            steps: report.steps,
            tokens_per_sec: total_tokens / secs,
            gradient_scalars: report.trainable_params,
        })
    };
    let ft = run(AdaptationStrategy::FullFineTune)?;
    let lora = run(AdaptationStrategy::Lora(LoraSpec::new(
        4,
        &[AttnWeight::Q, AttnWeight::V],
    )))?;
    Ok((ft, lora))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A miniature grid so unit tests stay fast; the real defaults run in
    /// the acceptance suite.
    fn quick_cfg() -> BenchConfig {
        BenchConfig {
            model: ModelConfig::new(2, 64, 4, 32, 64),
            grid: vec![(2, 16)],
            sizes: vec![4],
            trials: 100,
            warmup: 1,
            seed: 1,
        }
    }

    #[test]
    fn structural_checks_and_record_shape() {
        let records = run_latency(&quick_cfg()).unwrap();
        assert_eq!(records.len(), 5);
        assert_eq!(records[0].variant, "base");
        for r in &records {
            assert!(r.trials >= 100);
            assert!(r.mean_ms > 0.0);
        }
        let csv = latency_csv(&records);
        assert!(csv.starts_with("variant,batch,seq_len,size,trials,mean_ms,std_ms,slowdown_pct"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn degenerate_configs_error() {
        let mut cfg = quick_cfg();
        cfg.model.n_layers = 0;
        assert!(run_latency(&cfg).is_err());
        let mut cfg = quick_cfg();
        cfg.trials = 10;
        assert!(run_latency(&cfg).is_err());
        let mut cfg = quick_cfg();
        cfg.grid = vec![];
        assert!(run_latency(&cfg).is_err());
    }

    #[test]
    fn merged_bound_checker_flags_violations() {
        let mut records = run_latency(&quick_cfg()).unwrap();
        assert!(check_merged_bound(&records, 1e9).is_ok());
        records[1].slowdown_pct = 50.0;
        assert!(matches!(
            check_merged_bound(&records, 2.0),
            Err(CliError::BenchBound(_))
        ));
    }

    #[test]
    fn throughput_probe_counts_gradient_scalars_exactly() {
        let (ft, lora) = throughput_probe(2, 3).unwrap();
        assert_eq!(ft.gradient_scalars, ModelConfig::toy().total_params());
        assert_eq!(lora.gradient_scalars, 2048);
        assert!(lora.gradient_scalars < ft.gradient_scalars);
        assert!(ft.tokens_per_sec > 0.0 && lora.tokens_per_sec > 0.0);
        assert!(throughput_probe(0, 1).is_err());
    }
}
