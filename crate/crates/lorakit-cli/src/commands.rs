//! Implementations behind the CLI subcommands.
//!
//! Every command is an ordinary function over paths and parsed configs so
//! integration tests drive them directly; `main` only parses arguments
//! and maps errors to exit codes. Commands compose through checkpoint
//! and CSV files, never shared memory.

use std::path::Path;
use std::time::Instant;

use lorakit_core::adapters::{AdaptState, AdaptationStrategy, AttnWeight, LoraModule};
use lorakit_core::analysis::{
    projection_study, rank_sweep_cell, seed_pair_study, similarity_grid, RankSweepCell,
};
use lorakit_core::budget::{budget_table, count, display_millions};
use lorakit_core::model::{
    adapt_with, eval_loss, eval_token_accuracy, pretrain_with, Task, TaskDataset, TrainConfig,
    TransformerModel,
};
use lorakit_core::CoreError;

use crate::bench::{
    check_merged_bound, latency_csv, run_latency, throughput_probe, BenchConfig,
};
use crate::checkpoint::{
    load_full_model, load_lora_delta, save_full_model, save_lora_delta, Dtype,
};
use crate::error::{CliError, Result};
use crate::metrics::{write_epoch_csv, write_grid_csv, write_grid_pgm, write_text, EpochRow};
use crate::runconfig::RunConfig;

/// Pre-trains a model per the run config; writes `model.ckpt` and
/// `metrics.csv` under `out_dir`.
pub fn cmd_pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let dataset = cfg.dataset();
    let train = cfg.train_config();
    let mut rows: Vec<EpochRow> = Vec::with_capacity(train.epochs);
    let total = cfg.model.total_params();
    let mut last = Instant::now();
    let (model, report) = pretrain_with(cfg.model, &dataset, &train, cfg.seed, |epoch, loss| {
        rows.push(EpochRow {
            epoch,
            loss,
            trainable_params: total,
            wall_ms: last.elapsed().as_secs_f64() * 1e3,
        });
        last = Instant::now();
    })?;
    write_epoch_csv(&out_dir.join("metrics.csv"), &rows)?;
    save_full_model(&out_dir.join("model.ckpt"), &model, None, cfg.seed, Dtype::F64)?;
    println!(
        "pretrained {} on {}: loss {:.4} -> {:.4} over {} steps ({} params)",
        cfg.task.name(),
        cfg.model.total_params(),
        report.initial_loss,
        report.final_loss,
        report.steps,
        display_millions(total as u64),
    );
    Ok(())
}

/// Adapts a pre-trained checkpoint; writes the delta (or adapted full
/// model), `metrics.csv`, and prints the budget summary.
pub fn cmd_adapt(cfg: &RunConfig, base: &Path, out_dir: &Path) -> Result<()> {
    let strategy = cfg.strategy.clone().ok_or_else(|| {
        CliError::Core(CoreError::Config("adapt requires strategy = ... in the config".into()))
    })?;
    let (mut model, _, _) = load_full_model(base)?;
    if model.config != cfg.model {
        return Err(CliError::Format(
            "base checkpoint architecture differs from the run config".to_string(),
        ));
    }
    let dataset = cfg.dataset();
    let train = cfg.train_config();
    let budget = count(&cfg.model, &strategy)?;

    let mut rows: Vec<EpochRow> = Vec::with_capacity(train.epochs);
    let trainable = budget.trainable_params as usize;
    let mut last = Instant::now();
    let (state, report) =
        adapt_with(&mut model, &dataset, strategy.clone(), &train, cfg.seed, |epoch, loss| {
            rows.push(EpochRow {
                epoch,
                loss,
                trainable_params: trainable,
                wall_ms: last.elapsed().as_secs_f64() * 1e3,
            });
            last = Instant::now();
        })?;
    write_epoch_csv(&out_dir.join("metrics.csv"), &rows)?;

    // The live census must agree with the closed-form budget.
    if report.trainable_params as u64 != budget.trainable_params {
        return Err(CliError::Format(format!(
            "live census {} disagrees with budget {}",
            report.trainable_params, budget.trainable_params
        )));
    }

    let artifact = if matches!(strategy, AdaptationStrategy::Lora(_)) {
        let path = out_dir.join("delta.ckpt");
        save_lora_delta(&path, &cfg.model, &state.lora, &strategy, cfg.seed, Dtype::F64)?;
        path
    } else {
        let path = out_dir.join("adapted.ckpt");
        save_full_model(&path, &model, Some(&state), cfg.seed, Dtype::F64)?;
        path
    };
    println!(
        "adapted with {}: loss {:.4} -> {:.4}; trainable {} ({}), optimizer state {} scalars",
        strategy.spec_string(),
        report.initial_loss,
        report.final_loss,
        budget.trainable_params,
        display_millions(budget.trainable_params),
        report.optimizer_state_scalars,
    );
    println!("wrote {}", artifact.display());
    Ok(())
}

/// Evaluates a checkpoint (optionally with a delta applied) on a task.
/// Returns `(loss, accuracy)` and prints them.
pub fn cmd_eval(
    model_path: &Path,
    delta: Option<&Path>,
    task: Task,
    seed: u64,
    n_pairs: Option<usize>,
) -> Result<(f64, f64)> {
    let (model, mut state, _) = load_full_model(model_path)?;
    if let Some(delta_path) = delta {
        let (modules, header) = load_lora_delta(delta_path)?;
        let strategy = header
            .strategy
            .as_deref()
            .map(AdaptationStrategy::parse)
            .transpose()?
            .unwrap_or(AdaptationStrategy::FullFineTune);
        state = Some(AdaptState {
            strategy,
            lora: modules,
            adapters: Vec::new(),
            prefix: None,
        });
    }
    let dataset = task.generate(&model.config, n_pairs.unwrap_or_else(|| task.default_pairs()), seed);
    let loss = eval_loss(&model, state.as_ref(), &dataset, 16)?;
    let acc = eval_token_accuracy(&model, state.as_ref(), &dataset, 16)?;
    println!("eval {}: loss {loss:.6} accuracy {acc:.4}", task.name());
    Ok((loss, acc))
}

/// Folds a delta into a pristine base model and writes a standalone
/// full-model checkpoint (`merged.ckpt` under `out_dir`).
pub fn cmd_merge(base: &Path, delta: &Path, out_dir: &Path) -> Result<std::path::PathBuf> {
    let (mut model, _, header) = load_full_model(base)?;
    let (mut modules, delta_header) = load_lora_delta(delta)?;
    check_compatible(&model, &delta_header.model_config, &modules)?;
    for m in &mut modules {
        let host = model.attn_weight_mut(m.layer, m.target)?;
        m.merge_into(host)?;
    }
    let out = out_dir.join("merged.ckpt");
    save_full_model(&out, &model, None, header.seed, Dtype::F64)?;
    println!("wrote {}", out.display());
    Ok(out)
}

/// Swaps one deployed delta for another: the input model is assumed to
/// contain `old` merged; the output contains `new` instead.
///
/// The two updates are differenced site by site before touching the host
/// weights, so switching a delta for itself is an exact no-op.
pub fn cmd_switch(
    deployed: &Path,
    old: &Path,
    new: &Path,
    out_dir: &Path,
) -> Result<std::path::PathBuf> {
    let (mut model, _, header) = load_full_model(deployed)?;
    let (old_modules, old_header) = load_lora_delta(old)?;
    let (new_modules, new_header) = load_lora_delta(new)?;
    check_compatible(&model, &old_header.model_config, &old_modules)?;
    check_compatible(&model, &new_header.model_config, &new_modules)?;

    let mut sites: Vec<(usize, AttnWeight)> = old_modules
        .iter()
        .chain(new_modules.iter())
        .map(|m| (m.layer, m.target))
        .collect();
    sites.sort();
    sites.dedup();
    for (layer, target) in sites {
        let find = |mods: &[LoraModule]| {
            mods.iter()
                .find(|m| m.layer == layer && m.target == target)
                .map(LoraModule::delta)
        };
        let diff = match (find(&new_modules), find(&old_modules)) {
            (Some(n), Some(o)) => n.sub(&o)?,
            (Some(n), None) => n,
            (None, Some(o)) => o.scale(-1.0),
            (None, None) => continue,
        };
        model.attn_weight_mut(layer, target)?.axpy(1.0, &diff)?;
    }
    let out = out_dir.join("switched.ckpt");
    save_full_model(&out, &model, None, header.seed, Dtype::F64)?;
    println!("wrote {}", out.display());
    Ok(out)
}

fn check_compatible(
    model: &TransformerModel,
    delta_config: &lorakit_core::model::ModelConfig,
    modules: &[LoraModule],
) -> Result<()> {
    if model.config != *delta_config {
        return Err(CliError::Format(
            "delta was trained for a different architecture".to_string(),
        ));
    }
    for m in modules {
        if m.layer >= model.config.n_layers {
            return Err(CliError::Format(format!(
                "delta targets layer {} but the model has {}",
                m.layer, model.config.n_layers
            )));
        }
    }
    Ok(())
}

/// Budget tables for a named preset or explicit config.
pub fn cmd_budget(
    config: lorakit_core::model::ModelConfig,
    strategies: &[String],
    csv_out: Option<&Path>,
) -> Result<String> {
    let parsed: Vec<AdaptationStrategy> = strategies
        .iter()
        .map(|s| AdaptationStrategy::parse(s))
        .collect::<lorakit_core::Result<_>>()?;
    for s in &parsed {
        if let Some(spec) = s.lora_spec() {
            if let Some(w) = lorakit_core::adapters::rank_warning(&config, spec.rank) {
                eprintln!("note: {w}");
            }
        }
    }
    let (_, csv, text) = budget_table(&config, &parsed)?;
    if let Some(path) = csv_out {
        write_text(path, &csv)?;
    }
    print!("{text}");
    Ok(text)
}

/// Runs the latency grid and throughput probe; writes `latency.csv`,
/// `throughput.csv`, and a human-readable summary. Errors with the
/// bench-bound exit code if a folded update strays beyond 2% of base.
pub fn cmd_bench(cfg: &BenchConfig, out_dir: &Path) -> Result<()> {
    let records = run_latency(cfg)?;
    write_text(&out_dir.join("latency.csv"), &latency_csv(&records))?;

    let (ft, lora) = throughput_probe(8, cfg.seed)?;
    let mut tp = String::from("strategy,steps,tokens_per_sec,gradient_scalars\n");
    for r in [&ft, &lora] {
        tp.push_str(&format!(
            "{},{},{:.1},{}\n",
            r.strategy, r.steps, r.tokens_per_sec, r.gradient_scalars
        ));
    }
    write_text(&out_dir.join("throughput.csv"), &tp)?;

    let mut summary = String::new();
    summary.push_str(&format!(
        "# single-process CPU latency, {} trials per record; multi-device sharding\n\
         # effects are out of scope for this harness\n",
        cfg.trials
    ));
    summary.push_str(&format!(
        "# model: {} layers, d_model {}, d_ffn {}\n",
        cfg.model.n_layers, cfg.model.d_model, cfg.model.d_ffn
    ));
    for r in &records {
        summary.push_str(&format!(
            "{:<14} batch {:>3} seq {:>4} size {:>3}: mean {:>9.3} ms (std {:>7.3}, \
             median-of-means {:>9.3}) slowdown {:+.2}%\n",
            r.variant, r.batch, r.seq_len, r.size, r.mean_ms, r.std_ms,
            r.median_of_means_ms, r.slowdown_pct
        ));
    }
    summary.push_str(&format!(
        "training throughput: {} {:.1} tok/s ({} grad scalars) vs {} {:.1} tok/s ({} grad scalars)\n",
        ft.strategy, ft.tokens_per_sec, ft.gradient_scalars,
        lora.strategy, lora.tokens_per_sec, lora.gradient_scalars
    ));
    write_text(&out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");

    check_merged_bound(&records, 2.0)
}

/// Pairwise subspace-similarity grids between the factor matrices of two
/// delta checkpoints (which may be the same file).
pub fn cmd_analyze_subspace(left: &Path, right: &Path, out_dir: &Path) -> Result<()> {
    let (a, _) = load_lora_delta(left)?;
    let (b, _) = load_lora_delta(right)?;
    for ma in &a {
        let Some(mb) = b.iter().find(|m| m.layer == ma.layer && m.target == ma.target)
        else {
            continue;
        };
        let i_max = ma.rank.min(ma.a.cols());
        let j_max = mb.rank.min(mb.a.cols());
        let report = similarity_grid(
            &ma.a,
            &mb.a,
            i_max,
            j_max,
            &format!("left/layer{}.{}", ma.layer, ma.target.name()),
            &format!("right/layer{}.{}", mb.layer, mb.target.name()),
        )?;
        let stem = format!("subspace_layer{}_{}", ma.layer, ma.target.name());
        write_grid_csv(&out_dir.join(format!("{stem}.csv")), &report)?;
        write_grid_pgm(&out_dir.join(format!("{stem}.pgm")), &report.grid)?;
    }
    println!("wrote subspace grids to {}", out_dir.display());
    Ok(())
}

/// Seed-pair comparison of two runs plus a matched random baseline.
pub fn cmd_analyze_seedpair(
    left: &Path,
    right: &Path,
    draws: usize,
    out_dir: &Path,
) -> Result<()> {
    let (a, _) = load_lora_delta(left)?;
    let (b, _) = load_lora_delta(right)?;
    let report = seed_pair_study(&a, &b, draws, 9)?;
    let mut top1 = report.baseline_top1.clone();
    top1.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    let p99 = top1[(top1.len() * 99 / 100).min(top1.len() - 1)];

    let mut summary = String::from("site,top1_phi,baseline_p99,exceeds\n");
    for site in &report.per_site {
        let grid_top1 = site.grid.get(0, 0);
        summary.push_str(&format!(
            "{},{},{},{}\n",
            site.left_label,
            grid_top1,
            p99,
            grid_top1 > p99
        ));
        let stem = site.left_label.replace('/', "_");
        write_grid_csv(&out_dir.join(format!("{stem}.csv")), site)?;
        write_grid_pgm(&out_dir.join(format!("{stem}.pgm")), &site.grid)?;
    }
    write_grid_csv(&out_dir.join("baseline_mean.csv"), &report.baseline_mean)?;
    write_grid_pgm(&out_dir.join("baseline_mean.pgm"), &report.baseline_mean.grid)?;
    let mut base_csv = String::from("draw,top1_phi\n");
    for (i, v) in report.baseline_top1.iter().enumerate() {
        base_csv.push_str(&format!("{i},{v}\n"));
    }
    write_text(&out_dir.join("baseline_top1.csv"), &base_csv)?;
    write_text(&out_dir.join("seedpair_summary.csv"), &summary)?;
    println!("wrote seed-pair study to {}", out_dir.display());
    Ok(())
}

/// Projection-norm study of each update against its host weight.
pub fn cmd_analyze_projection(base: &Path, delta: &Path, out_dir: &Path) -> Result<()> {
    let (model, _, _) = load_full_model(base)?;
    let (modules, header) = load_lora_delta(delta)?;
    let mut csv = String::from(
        "site,rank,norm_w,norm_dw,proj_update_basis,proj_host_basis,proj_random_basis,amplification\n",
    );
    for m in &modules {
        let w = model.attn_weight(m.layer, m.target)?;
        let dw = m.delta();
        let rep = projection_study(w, &dw, m.rank.min(w.rows().min(w.cols())), header.seed)?;
        csv.push_str(&format!(
            "layer{}.{},{},{},{},{},{},{},{}\n",
            m.layer,
            m.target.name(),
            m.rank,
            rep.norm_w,
            rep.norm_dw,
            rep.projected_update_basis,
            rep.projected_host_basis,
            rep.projected_random_basis,
            rep.amplification
        ));
    }
    write_text(&out_dir.join("projection.csv"), &csv)?;
    println!("wrote {}", out_dir.join("projection.csv").display());
    Ok(())
}

/// Trains one adaptation per `(rank, target-set)` cell and writes the
/// results as a grid, with the full-fine-tune reference and the
/// budget-matched pair called out.
pub fn cmd_ranksweep(
    cfg: &RunConfig,
    base: &Path,
    ranks: &[usize],
    variants: &[Vec<AttnWeight>],
    threads: usize,
    out_dir: &Path,
) -> Result<()> {
    let (model, _, _) = load_full_model(base)?;
    if model.config != cfg.model {
        return Err(CliError::Format(
            "base checkpoint architecture differs from the run config".to_string(),
        ));
    }
    let dataset = cfg.dataset();
    let strategy_for_recipe = AdaptationStrategy::Lora(lorakit_core::adapters::LoraSpec::new(
        ranks.first().copied().unwrap_or(4),
        variants.first().map(Vec::as_slice).unwrap_or(&[AttnWeight::Q, AttnWeight::V]),
    ));
    let mut train = TrainConfig::adapt_default(&strategy_for_recipe);
    if let Some(e) = cfg.epochs {
        train.epochs = e;
    }
    if let Some(lr) = cfg.lr {
        train.optimizer.lr = lr;
    }

    let cells = run_cells(&model, &dataset, ranks, variants, &train, cfg.seed, threads)?;

    // Grid CSV: one row per target set, one column per rank.
    let mut csv = String::from("targets");
    for r in ranks {
        csv.push_str(&format!(",r={r}"));
    }
    csv.push('\n');
    for variant in variants {
        let label: String = variant.iter().map(|t| t.name().chars().last().unwrap()).collect();
        csv.push_str(&label);
        for r in ranks {
            let cell = cells
                .iter()
                .find(|c| c.rank == *r && &c.targets == variant)
                .expect("cell computed");
            csv.push_str(&format!(",{:.6}", cell.final_loss));
        }
        csv.push('\n');
    }
    write_text(&out_dir.join("ranksweep_loss.csv"), &csv)?;

    let mut detail = String::from("targets,rank,trainable_params,final_loss,accuracy\n");
    for c in &cells {
        let label: String = c.targets.iter().map(|t| t.name().chars().last().unwrap()).collect();
        detail.push_str(&format!(
            "{label},{},{},{:.6},{:.4}\n",
            c.rank, c.trainable_params, c.final_loss, c.accuracy
        ));
    }
    // Full fine-tuning reference under its own recipe.
    let mut ft_model = model.clone();
    let ft_train = TrainConfig::adapt_default(&AdaptationStrategy::FullFineTune);
    let (ft_state, ft_report) = lorakit_core::model::adapt(
        &mut ft_model,
        &dataset,
        AdaptationStrategy::FullFineTune,
        &ft_train,
        cfg.seed,
    )?;
    let ft_acc = eval_token_accuracy(&ft_model, Some(&ft_state), &dataset, 16)?;
    detail.push_str(&format!(
        "ft,0,{},{:.6},{:.4}\n",
        ft_report.trainable_params, ft_report.final_loss, ft_acc
    ));
    write_text(&out_dir.join("ranksweep_detail.csv"), &detail)?;
    println!("wrote rank sweep to {}", out_dir.display());
    Ok(())
}

/// Fans sweep cells out over up to `threads` workers; each cell owns a
/// private model clone, so workers share nothing mutable.
fn run_cells(
    model: &TransformerModel,
    dataset: &TaskDataset,
    ranks: &[usize],
    variants: &[Vec<AttnWeight>],
    train: &TrainConfig,
    seed: u64,
    threads: usize,
) -> Result<Vec<RankSweepCell>> {
    let jobs: Vec<(usize, Vec<AttnWeight>)> = variants
        .iter()
        .flat_map(|v| ranks.iter().map(move |&r| (r, v.clone())))
        .collect();
    let threads = threads.max(1).min(jobs.len().max(1));
    if threads == 1 {
        return jobs
            .iter()
            .map(|(r, t)| Ok(rank_sweep_cell(model, dataset, *r, t, train, seed)?))
            .collect();
    }
    let mut out: Vec<Option<RankSweepCell>> = vec![None; jobs.len()];
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (chunk_idx, chunk) in jobs.chunks(jobs.len().div_ceil(threads)).enumerate() {
            let start = chunk_idx * jobs.len().div_ceil(threads);
            handles.push((
                start,
                scope.spawn(move || -> lorakit_core::Result<Vec<RankSweepCell>> {
                    chunk
                        .iter()
                        .map(|(r, t)| rank_sweep_cell(model, dataset, *r, t, train, seed))
                        .collect()
                }),
            ));
        }
        for (start, h) in handles {
            let cells = h.join().expect("worker panicked")?;
            for (i, c) in cells.into_iter().enumerate() {
                out[start + i] = Some(c);
            }
        }
        Ok(())
    })?;
    Ok(out.into_iter().map(|c| c.expect("all cells filled")).collect())
}
