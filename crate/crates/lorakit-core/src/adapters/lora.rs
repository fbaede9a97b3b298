//! Low-rank update modules.
//!
//! A [`LoraModule`] pairs a frozen host weight `W0` (d x k) with trainable
//! factors `B` (d x r) and `A` (r x k). The effective update is always
//! `(alpha / r) * B * A`; the host sees it either added on the fly during
//! the forward pass (unmerged) or folded into its own entries (merged),
//! and the two are numerically interchangeable.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::fmath;
use crate::matrix::Matrix;
use crate::model::config::ModelConfig;
use crate::rng::Rng;
use crate::Result;

/// The four attention projection matrices a module can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AttnWeight {
    Q,
    K,
    V,
    O,
}

impl AttnWeight {
    pub const ALL: [AttnWeight; 4] = [AttnWeight::Q, AttnWeight::K, AttnWeight::V, AttnWeight::O];

    pub fn name(&self) -> &'static str {
        match self {
            AttnWeight::Q => "w_q",
            AttnWeight::K => "w_k",
            AttnWeight::V => "w_v",
            AttnWeight::O => "w_o",
        }
    }

    /// Accepts `w_q`/`q` style names.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "w_q" | "q" => Ok(AttnWeight::Q),
            "w_k" | "k" => Ok(AttnWeight::K),
            "w_v" | "v" => Ok(AttnWeight::V),
            "w_o" | "o" => Ok(AttnWeight::O),
            other => Err(CoreError::Config(format!("unknown attention weight '{other}'"))),
        }
    }
}

/// One low-rank attachment on a single `(layer, weight)` site.
#[derive(Debug, Clone)]
pub struct LoraModule {
    pub layer: usize,
    pub target: AttnWeight,
    /// `r x k` factor, Gaussian-initialized.
    pub a: Matrix,
    /// `d x r` factor, zero-initialized so the update starts at zero.
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
    /// True while the update is folded into the host weight.
    pub merged: bool,
}

impl LoraModule {
    /// The `alpha / r` factor applied to the raw product `B A`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The effective update `(alpha / r) * B * A`, shape `d x k`.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("factor shapes agree").scale(self.scaling())
    }

    /// Adapted forward pass in column convention:
    /// `h = W0 x + (alpha/r) * B (A x)` for `x` of shape `k x m`.
    ///
    /// Refuses to run while merged — the host already contains the update
    /// and applying it again would double it.
    pub fn forward(&self, w0: &Matrix, x: &Matrix) -> Result<Matrix> {
        if self.merged {
            return Err(CoreError::Contract(String::from(
                "lora forward on a merged module would double-apply the update",
            )));
        }
        let base = w0.matmul(x)?;
        let ax = self.a.matmul(x)?;
        let update = self.b.matmul(&ax)?.scale(self.scaling());
        base.add(&update)
    }

    /// Folds the update into the host weight: `host += (alpha/r) B A`.
    pub fn merge_into(&mut self, host: &mut Matrix) -> Result<()> {
        if self.merged {
            return Err(CoreError::Contract(String::from("module is already merged")));
        }
        host.axpy(1.0, &self.delta())?;
        self.merged = true;
        Ok(())
    }

    /// Reverses [`LoraModule::merge_into`]: `host -= (alpha/r) B A`.
    pub fn unmerge_from(&mut self, host: &mut Matrix) -> Result<()> {
        if !self.merged {
            return Err(CoreError::Contract(String::from("module is not merged")));
        }
        host.axpy(-1.0, &self.delta())?;
        self.merged = false;
        Ok(())
    }

    pub fn trainable_scalars(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Creates one module per `(layer, target)` pair.
///
/// `A` entries are drawn from `N(0, 1/r)` — the paper-style Gaussian init
/// with variance chosen so the update scale is stable across ranks — and
/// `B` starts at zero, making the attached model output-identical to the
/// base until training moves `B`.
pub fn lora_attach(
    config: &ModelConfig,
    targets: &[AttnWeight],
    rank: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Vec<LoraModule>> {
    let d = config.d_model;
    if rank == 0 || rank > d {
        return Err(CoreError::Config(format!(
            "rank {rank} outside 1..={d} for d_model {d}"
        )));
    }
    if alpha <= 0.0 {
        return Err(CoreError::Config(format!("alpha must be positive, got {alpha}")));
    }
    if targets.is_empty() {
        return Err(CoreError::Config("no target weights given".into()));
    }
    let mut order: Vec<AttnWeight> = targets.to_vec();
    order.sort();
    order.dedup();

    let sigma = fmath::sqrt(1.0 / rank as f64);
    let mut modules = Vec::with_capacity(config.n_layers * order.len());
    for layer in 0..config.n_layers {
        for &target in &order {
            modules.push(LoraModule {
                layer,
                target,
                a: Matrix::randn(rank, d, sigma, rng),
                b: Matrix::zeros(d, rank),
                rank,
                alpha,
                merged: false,
            });
        }
    }
    Ok(modules)
}

/// Advice surfaced by the CLI when a rank stops being "low".
pub fn rank_warning(config: &ModelConfig, rank: usize) -> Option<String> {
    if rank > config.d_model / 4 {
        Some(format!(
            "rank {rank} exceeds d_model/4 = {}; the update is no longer low-rank in any useful sense",
            config.d_model / 4
        ))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn attach_counts_and_init() {
        let cfg = ModelConfig::toy();
        let mut rng = seeded_rng(1);
        let mods =
            lora_attach(&cfg, &[AttnWeight::Q, AttnWeight::V], 4, 4.0, &mut rng).unwrap();
        // L=2 layers x 2 targets = 4 modules.
        assert_eq!(mods.len(), 4);
        for m in &mods {
            assert_eq!(m.a.shape(), (4, 64));
            assert_eq!(m.b.shape(), (64, 4));
            assert!(!m.merged);
            assert_eq!(m.b.max_abs(), 0.0);
            assert!(m.a.max_abs() > 0.0);
        }
    }

    #[test]
    fn different_seeds_differ_in_a_not_b() {
        let cfg = ModelConfig::toy();
        let a1 = lora_attach(&cfg, &[AttnWeight::Q], 2, 2.0, &mut seeded_rng(1)).unwrap();
        let a2 = lora_attach(&cfg, &[AttnWeight::Q], 2, 2.0, &mut seeded_rng(2)).unwrap();
        assert!(a1[0].a.max_abs_diff(&a2[0].a) > 0.0);
        assert_eq!(a1[0].b, a2[0].b);
    }

    #[test]
    fn forward_hand_case() {
        // W0 = I2, B = [[1],[0]], A = [[0,1]], alpha = r = 1, x = (1,2)^T:
        // h = (1,2)^T + (2,0)^T = (3,2)^T.
        let module = LoraModule {
            layer: 0,
            target: AttnWeight::Q,
            a: Matrix::from_rows(&[&[0.0, 1.0]]),
            b: Matrix::from_rows(&[&[1.0], &[0.0]]),
            rank: 1,
            alpha: 1.0,
            merged: false,
        };
        let w0 = Matrix::identity(2);
        let x = Matrix::from_rows(&[&[1.0], &[2.0]]);
        let h = module.forward(&w0, &x).unwrap();
        assert_eq!(h, Matrix::from_rows(&[&[3.0], &[2.0]]));
    }

    #[test]
    fn zero_b_gives_plain_matmul_and_alpha_is_linear() {
        let cfg = ModelConfig::toy();
        let mut rng = seeded_rng(3);
        let mut module =
            lora_attach(&cfg, &[AttnWeight::Q], 4, 4.0, &mut rng).unwrap().remove(0);
        let w0 = Matrix::randn(64, 64, 0.1, &mut rng);
        let x = Matrix::randn(64, 3, 1.0, &mut rng);
        // B = 0: exact equality with the base product.
        assert_eq!(module.forward(&w0, &x).unwrap(), w0.matmul(&x).unwrap());

        // Doubling alpha exactly doubles h - W0 x.
        module.b = Matrix::randn(64, 4, 0.2, &mut rng);
        let base = w0.matmul(&x).unwrap();
        let d1 = module.forward(&w0, &x).unwrap().sub(&base).unwrap();
        module.alpha *= 2.0;
        let d2 = module.forward(&w0, &x).unwrap().sub(&base).unwrap();
        assert!(d2.max_abs_diff(&d1.scale(2.0)) <= 1e-15 * d2.max_abs().max(1.0));
    }

    #[test]
    fn merge_unmerge_round_trip_and_state_flags() {
        let cfg = ModelConfig::toy();
        let mut rng = seeded_rng(4);
        let mut module =
            lora_attach(&cfg, &[AttnWeight::V], 4, 8.0, &mut rng).unwrap().remove(0);
        module.b = Matrix::randn(64, 4, 0.3, &mut rng);
        let mut host = Matrix::randn(64, 64, 0.1, &mut rng);
        let pristine = host.clone();

        module.merge_into(&mut host).unwrap();
        assert!(module.merged);
        // Double merge is a contract error, as is forward while merged.
        assert!(module.merge_into(&mut host).is_err());
        let x = Matrix::randn(64, 2, 1.0, &mut rng);
        assert!(module.forward(&host, &x).is_err());

        module.unmerge_from(&mut host).unwrap();
        assert!(!module.merged);
        assert!(module.unmerge_from(&mut host).is_err());
        assert!(host.max_abs_diff(&pristine) <= 1e-10);
    }

    #[test]
    fn merged_forward_equals_unmerged_forward() {
        let cfg = ModelConfig::toy();
        let mut rng = seeded_rng(5);
        let mut module =
            lora_attach(&cfg, &[AttnWeight::Q], 8, 16.0, &mut rng).unwrap().remove(0);
        module.b = Matrix::randn(64, 8, 0.5, &mut rng);
        let mut host = Matrix::randn(64, 64, 0.1, &mut rng);

        for trial in 0..100 {
            let x = Matrix::randn(64, 1, 1.0, &mut seeded_rng(100 + trial));
            let unmerged = module.forward(&host, &x).unwrap();
            module.merge_into(&mut host).unwrap();
            let merged = host.matmul(&x).unwrap();
            module.unmerge_from(&mut host).unwrap();
            let rel = merged.max_abs_diff(&unmerged) / merged.max_abs().max(1e-12);
            assert!(rel <= 1e-10, "trial {trial}: relative diff {rel}");
        }
    }

    #[test]
    fn task_switch_reaches_fresh_merge_state() {
        let cfg = ModelConfig::toy();
        let mut rng = seeded_rng(6);
        let mut m1 = lora_attach(&cfg, &[AttnWeight::Q], 4, 4.0, &mut rng).unwrap().remove(0);
        let mut m2 = lora_attach(&cfg, &[AttnWeight::Q], 4, 4.0, &mut rng).unwrap().remove(0);
        m1.b = Matrix::randn(64, 4, 0.3, &mut rng);
        m2.b = Matrix::randn(64, 4, 0.3, &mut rng);
        let pristine = Matrix::randn(64, 64, 0.1, &mut rng);

        // Deploy task 1, then switch to task 2 in place.
        let mut host = pristine.clone();
        m1.merge_into(&mut host).unwrap();
        m1.unmerge_from(&mut host).unwrap();
        m2.merge_into(&mut host).unwrap();

        let mut fresh = pristine.clone();
        let mut m2b = m2.clone();
        m2b.merged = false;
        m2b.merge_into(&mut fresh).unwrap();
        assert!(host.max_abs_diff(&fresh) <= 1e-9);
    }

    #[test]
    fn rank_bounds_are_enforced() {
        let cfg = ModelConfig::toy();
        let mut rng = seeded_rng(7);
        assert!(lora_attach(&cfg, &[AttnWeight::Q], 0, 1.0, &mut rng).is_err());
        assert!(lora_attach(&cfg, &[AttnWeight::Q], 65, 1.0, &mut rng).is_err());
        assert!(rank_warning(&cfg, 17).is_some());
        assert!(rank_warning(&cfg, 16).is_none());
    }
}
