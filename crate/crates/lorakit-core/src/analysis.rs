//! Subspace analysis of learned low-rank updates.
//!
//! Three tools: a normalized subspace-similarity score between the
//! right-singular bases of two factor matrices (with its projection-
//! metric counterpart), a projection study that measures how much of a
//! host weight lives in the update's singular subspace (and the implied
//! amplification factor), and a rank sweep that trains one adaptation per
//! `(rank, target-set)` cell and tabulates the resulting losses.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adapters::{AdaptationStrategy, AttnWeight, LoraModule, LoraSpec};
use crate::error::CoreError;
use crate::fmath;
use crate::matrix::Matrix;
use crate::model::{adapt, eval_loss, eval_token_accuracy, TaskDataset, TrainConfig, TransformerModel};
use crate::rng::{derived_rng, Rng};
use crate::svd::svd;
use crate::Result;

/// Grid of similarity values `phi(A, B, i, j)` for `i <= i_max`,
/// `j <= j_max`, plus the labels of the two runs it compares.
#[derive(Debug, Clone)]
pub struct SubspaceReport {
    pub left_label: String,
    pub right_label: String,
    /// `i_max x j_max`; entry `(i-1, j-1)` holds `phi(.., i, j)`.
    pub grid: Matrix,
    pub i_max: usize,
    pub j_max: usize,
}

/// Normalized similarity between the spans of the top `i` right-singular
/// vectors of `a1` and the top `j` of `a2`:
/// `phi = ||U1^T U2||_F^2 / min(i, j)`, always in `[0, 1]`.
pub fn subspace_similarity(a1: &Matrix, a2: &Matrix, i: usize, j: usize) -> Result<f64> {
    let (u1, u2) = right_bases(a1, a2, i, j)?;
    let m = u1.matmul_tn(&u2)?;
    let fro2 = m.data().iter().map(|v| v * v).sum::<f64>();
    Ok((fro2 / i.min(j) as f64).clamp(0.0, 1.0))
}

/// Computes the projection metric `d = sqrt(p - sum sigma_k^2)` and the
/// similarity `phi` from the same pair of truncated bases, then checks
/// the algebraic identity `phi = (p - d^2) / p` across the two
/// independent routes (Frobenius norm vs. singular values).
pub fn projection_metric_check(
    a1: &Matrix,
    a2: &Matrix,
    i: usize,
    j: usize,
) -> Result<(f64, f64)> {
    let (u1, u2) = right_bases(a1, a2, i, j)?;
    let m = u1.matmul_tn(&u2)?;
    let p = i.min(j) as f64;

    // Route 1: singular values of the interaction matrix.
    let sigma_sq: f64 = svd(&m)?.s.iter().map(|s| s * s).sum();
    let dist = fmath::sqrt((p - sigma_sq).max(0.0));

    // Route 2: plain Frobenius norm, no SVD involved.
    let phi = (m.data().iter().map(|v| v * v).sum::<f64>() / p).clamp(0.0, 1.0);

    let implied = (p - dist * dist) / p;
    if (phi - implied).abs() > 1e-10 {
        return Err(CoreError::Contract(format!(
            "projection-metric identity violated: phi {phi} vs (p - d^2)/p {implied}"
        )));
    }
    Ok((dist, phi))
}

fn right_bases(a1: &Matrix, a2: &Matrix, i: usize, j: usize) -> Result<(Matrix, Matrix)> {
    if a1.cols() != a2.cols() {
        return Err(CoreError::shape("subspace_similarity", a1.shape(), a2.shape()));
    }
    let p1 = a1.rows().min(a1.cols());
    let p2 = a2.rows().min(a2.cols());
    if i == 0 || j == 0 || i > p1 || j > p2 {
        return Err(CoreError::Config(format!(
            "requested ranks ({i}, {j}) exceed available singular vectors ({p1}, {p2})"
        )));
    }
    Ok((svd(a1)?.v_top(i), svd(a2)?.v_top(j)))
}

/// Full `i_max x j_max` similarity grid between two factor matrices.
///
/// Both SVDs are computed once; submatrix norms come from a prefix-sum
/// table over the squared interaction entries.
pub fn similarity_grid(
    a1: &Matrix,
    a2: &Matrix,
    i_max: usize,
    j_max: usize,
    left_label: &str,
    right_label: &str,
) -> Result<SubspaceReport> {
    let (u1, u2) = right_bases(a1, a2, i_max, j_max)?;
    let m = u1.matmul_tn(&u2)?;
    // prefix[i][j] = sum of squares over the leading i x j block.
    let mut prefix = Matrix::zeros(i_max + 1, j_max + 1);
    for i in 1..=i_max {
        for j in 1..=j_max {
            let v = m.get(i - 1, j - 1);
            let val = v * v + prefix.get(i - 1, j) + prefix.get(i, j - 1)
                - prefix.get(i - 1, j - 1);
            prefix.set(i, j, val);
        }
    }
    let grid = Matrix::from_fn(i_max, j_max, |i0, j0| {
        let (i, j) = (i0 + 1, j0 + 1);
        (prefix.get(i, j) / i.min(j) as f64).clamp(0.0, 1.0)
    });
    Ok(SubspaceReport {
        left_label: String::from(left_label),
        right_label: String::from(right_label),
        grid,
        i_max,
        j_max,
    })
}

/// Comparison of two independently trained low-rank runs, target by
/// target, against a matched random-Gaussian baseline.
#[derive(Debug, Clone)]
pub struct SeedPairReport {
    /// One grid per `(layer, target)` site present in both runs.
    pub per_site: Vec<SubspaceReport>,
    /// Entrywise mean similarity grid over the baseline draws.
    pub baseline_mean: SubspaceReport,
    /// Top-1 similarity of each baseline draw (for percentile tests).
    pub baseline_top1: Vec<f64>,
}

/// Compares the `A` factors of two runs trained from different seeds.
/// Both runs must carry identical `(layer, target, rank)` sites.
pub fn seed_pair_study(
    run_a: &[LoraModule],
    run_b: &[LoraModule],
    baseline_draws: usize,
    seed: u64,
) -> Result<SeedPairReport> {
    if run_a.len() != run_b.len() || run_a.is_empty() {
        return Err(CoreError::Contract(String::from(
            "seed-pair study requires two runs with matching module sets",
        )));
    }
    let mut per_site = Vec::with_capacity(run_a.len());
    for ma in run_a {
        let mb = run_b
            .iter()
            .find(|m| m.layer == ma.layer && m.target == ma.target)
            .ok_or_else(|| {
                CoreError::Contract(format!(
                    "run B lacks a module for layer {} {}",
                    ma.layer,
                    ma.target.name()
                ))
            })?;
        if mb.rank != ma.rank {
            return Err(CoreError::Contract(format!(
                "rank mismatch at layer {} {}: {} vs {}",
                ma.layer,
                ma.target.name(),
                ma.rank,
                mb.rank
            )));
        }
        let r = ma.rank.min(ma.a.cols());
        per_site.push(similarity_grid(
            &ma.a,
            &mb.a,
            r,
            r,
            &format!("seed-a/layer{}.{}", ma.layer, ma.target.name()),
            &format!("seed-b/layer{}.{}", mb.layer, mb.target.name()),
        )?);
    }

    // Matched random baseline: same shape as the first site's factor.
    let shape = (run_a[0].a.rows(), run_a[0].a.cols());
    let r = run_a[0].rank.min(shape.1);
    let mut rng = derived_rng(seed, 0x42_41_53_45); // baseline stream
    let mut mean = Matrix::zeros(r, r);
    let mut top1 = Vec::with_capacity(baseline_draws);
    for _ in 0..baseline_draws {
        let g1 = Matrix::randn(shape.0, shape.1, 1.0, &mut rng);
        let g2 = Matrix::randn(shape.0, shape.1, 1.0, &mut rng);
        let grid = similarity_grid(&g1, &g2, r, r, "gauss-a", "gauss-b")?;
        top1.push(grid.grid.get(0, 0));
        mean.axpy(1.0 / baseline_draws as f64, &grid.grid)?;
    }
    Ok(SeedPairReport {
        per_site,
        baseline_mean: SubspaceReport {
            left_label: String::from("gauss-a"),
            right_label: String::from("gauss-b"),
            grid: mean,
            i_max: r,
            j_max: r,
        },
        baseline_top1: top1,
    })
}

/// Norms of a host weight projected into three rank-`r` subspaces.
#[derive(Debug, Clone)]
pub struct ProjectionReport {
    pub norm_w: f64,
    pub norm_dw: f64,
    /// `||U^T W V||_F` with `U, V` from the update's SVD.
    pub projected_update_basis: f64,
    /// Same with the host weight's own top-`r` singular vectors.
    pub projected_host_basis: f64,
    /// Same with a random orthonormal basis.
    pub projected_random_basis: f64,
    /// `||dW||_F / ||U^T W V||_F` (update basis); infinite when the
    /// projection vanishes.
    pub amplification: f64,
}

/// Projects `w` onto the top-`r` singular subspaces of the update, of
/// itself, and of a random basis, and derives the amplification factor.
pub fn projection_study(w: &Matrix, dw: &Matrix, r: usize, seed: u64) -> Result<ProjectionReport> {
    if w.shape() != dw.shape() {
        return Err(CoreError::shape("projection_study", w.shape(), dw.shape()));
    }
    let p = w.rows().min(w.cols());
    if r == 0 || r > p {
        return Err(CoreError::Config(format!("rank {r} outside 1..={p}")));
    }
    let svd_dw = svd(dw)?;
    let svd_w = svd(w)?;
    let project = |u: &Matrix, v: &Matrix| -> Result<f64> {
        Ok(u.matmul_tn(w)?.matmul(v)?.frobenius_norm())
    };
    let projected_update_basis = project(&svd_dw.u_top(r), &svd_dw.v_top(r))?;
    let projected_host_basis = project(&svd_w.u_top(r), &svd_w.v_top(r))?;
    let mut rng = derived_rng(seed, 0x50_52_4f_4a); // projection stream
    let projected_random_basis = project(
        &random_orthonormal(w.rows(), r, &mut rng),
        &random_orthonormal(w.cols(), r, &mut rng),
    )?;
    let norm_dw = dw.frobenius_norm();
    let amplification =
        if projected_update_basis == 0.0 { f64::INFINITY } else { norm_dw / projected_update_basis };
    Ok(ProjectionReport {
        norm_w: w.frobenius_norm(),
        norm_dw,
        projected_update_basis,
        projected_host_basis,
        projected_random_basis,
        amplification,
    })
}

/// Random matrix with `r` orthonormal columns (Gaussian + twice-iterated
/// Gram-Schmidt).
pub fn random_orthonormal(rows: usize, r: usize, rng: &mut Rng) -> Matrix {
    assert!(r <= rows, "cannot build {r} orthonormal columns in dimension {rows}");
    let mut m = Matrix::randn(rows, r, 1.0, rng);
    for _pass in 0..2 {
        for j in 0..r {
            for k in 0..j {
                let dot: f64 = (0..rows).map(|i| m.get(i, j) * m.get(i, k)).sum();
                for i in 0..rows {
                    let v = m.get(i, j) - dot * m.get(i, k);
                    m.set(i, j, v);
                }
            }
            let norm = fmath::sqrt((0..rows).map(|i| m.get(i, j) * m.get(i, j)).sum());
            for i in 0..rows {
                let v = m.get(i, j) / norm;
                m.set(i, j, v);
            }
        }
    }
    m
}

/// One trained cell of the rank sweep.
#[derive(Debug, Clone)]
pub struct RankSweepCell {
    pub rank: usize,
    pub targets: Vec<AttnWeight>,
    pub final_loss: f64,
    pub accuracy: f64,
    pub trainable_params: usize,
}

/// Sweep results plus the full-fine-tuning reference row.
#[derive(Debug, Clone)]
pub struct RankSweepResult {
    pub cells: Vec<RankSweepCell>,
    pub ft_loss: f64,
    pub ft_accuracy: f64,
    pub ft_trainable_params: usize,
}

/// Trains one low-rank adaptation per `(rank, targets)` pair on a clone
/// of the base model and records final loss and token accuracy.
pub fn rank_sweep(
    base: &TransformerModel,
    dataset: &TaskDataset,
    ranks: &[usize],
    target_variants: &[Vec<AttnWeight>],
    train: &TrainConfig,
    seed: u64,
) -> Result<RankSweepResult> {
    let mut cells = Vec::with_capacity(ranks.len() * target_variants.len());
    for targets in target_variants {
        for &rank in ranks {
            cells.push(rank_sweep_cell(base, dataset, rank, targets, train, seed)?);
        }
    }
    let mut ft_model = base.clone();
    let (ft_state, ft_report) =
        adapt(&mut ft_model, dataset, AdaptationStrategy::FullFineTune, train, seed)?;
    let ft_accuracy =
        eval_token_accuracy(&ft_model, Some(&ft_state), dataset, train.batch_size)?;
    Ok(RankSweepResult {
        cells,
        ft_loss: ft_report.final_loss,
        ft_accuracy,
        ft_trainable_params: ft_report.trainable_params,
    })
}

/// One cell of the sweep; independent of every other cell, so callers
/// may fan these out across workers.
pub fn rank_sweep_cell(
    base: &TransformerModel,
    dataset: &TaskDataset,
    rank: usize,
    targets: &[AttnWeight],
    train: &TrainConfig,
    seed: u64,
) -> Result<RankSweepCell> {
    let mut model = base.clone();
    let strategy = AdaptationStrategy::Lora(LoraSpec::new(rank, targets));
    let (state, report) = adapt(&mut model, dataset, strategy, train, seed)?;
    let accuracy = eval_token_accuracy(&model, Some(&state), dataset, train.batch_size)?;
    let final_loss = eval_loss(&model, Some(&state), dataset, train.batch_size)?;
    Ok(RankSweepCell {
        rank,
        targets: targets.to_vec(),
        final_loss,
        accuracy,
        trainable_params: report.trainable_params,
    })
}
