//! Bottleneck adapter layers (the sequential baseline).
//!
//! An adapter is a small residual MLP inserted into the block stream:
//! `out = x + relu(x W_down + b_down) W_up + b_up`. Because it sits in
//! sequence with the host computation it cannot be folded into existing
//! weights — this is what the latency benchmark measures against merged
//! low-rank updates.
//!
//! Two variants are supported: the original design with two adapters per
//! block (after the attention sublayer and after the MLP sublayer), and
//! the lighter one with a single adapter after the MLP, applied on top of
//! an extra trainable layer norm.

use alloc::format;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::matrix::Matrix;
use crate::model::config::ModelConfig;
use crate::rng::Rng;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AdapterVariant {
    /// Two adapters per block: after attention and after the MLP.
    H,
    /// One adapter per block after the MLP, behind an extra trainable
    /// layer norm.
    L,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterPlacement {
    AfterAttention,
    AfterMlp,
}

/// One bottleneck adapter instance.
#[derive(Debug, Clone)]
pub struct AdapterModule {
    pub layer: usize,
    pub placement: AdapterPlacement,
    /// `d x r_b` down projection.
    pub w_down: Matrix,
    /// `1 x r_b` bias.
    pub b_down: Matrix,
    /// `r_b x d` up projection, zero-initialized so the adapter starts as
    /// the identity.
    pub w_up: Matrix,
    /// `1 x d` bias.
    pub b_up: Matrix,
    /// Extra trainable layer norm `(gamma, beta)`, present in variant L.
    pub layer_norm: Option<(Matrix, Matrix)>,
}

impl AdapterModule {
    /// Applies the adapter to row-activations `x` (n x d).
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let input = match &self.layer_norm {
            Some((gamma, beta)) => layer_norm_rows(x, gamma, beta),
            None => x.clone(),
        };
        let mut hidden = input.matmul(&self.w_down)?;
        add_row_in_place(&mut hidden, &self.b_down);
        let hidden = hidden.map(|v| v.max(0.0));
        let mut up = hidden.matmul(&self.w_up)?;
        add_row_in_place(&mut up, &self.b_up);
        x.add(&up)
    }

    pub fn trainable_scalars(&self) -> usize {
        let ln = self.layer_norm.as_ref().map_or(0, |(g, b)| g.len() + b.len());
        self.w_down.len() + self.b_down.len() + self.w_up.len() + self.b_up.len() + ln
    }
}

pub(crate) fn add_row_in_place(x: &mut Matrix, bias: &Matrix) {
    debug_assert_eq!(bias.rows(), 1);
    debug_assert_eq!(bias.cols(), x.cols());
    for i in 0..x.rows() {
        for (v, b) in x.row_mut(i).iter_mut().zip(bias.row(0)) {
            *v += b;
        }
    }
}

pub(crate) fn layer_norm_rows(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f64;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let rstd = 1.0 / crate::fmath::sqrt(var + crate::tape::LAYERNORM_EPS);
        for (j, v) in row.iter_mut().enumerate() {
            *v = gamma.get(0, j) * (*v - mean) * rstd + beta.get(0, j);
        }
    }
    out
}

/// Attaches adapters of the given variant to every block.
pub fn adapter_attach(
    config: &ModelConfig,
    variant: AdapterVariant,
    r_b: usize,
    rng: &mut Rng,
) -> Result<Vec<AdapterModule>> {
    let d = config.d_model;
    if r_b == 0 || r_b >= d {
        return Err(CoreError::Config(format!(
            "bottleneck {r_b} outside 1..{d} for d_model {d}"
        )));
    }
    let make = |layer: usize, placement: AdapterPlacement, with_ln: bool, rng: &mut Rng| {
        AdapterModule {
            layer,
            placement,
            w_down: Matrix::randn(d, r_b, 1.0 / crate::fmath::sqrt(d as f64), rng),
            b_down: Matrix::zeros(1, r_b),
            w_up: Matrix::zeros(r_b, d),
            b_up: Matrix::zeros(1, d),
            layer_norm: with_ln.then(|| (Matrix::filled(1, d, 1.0), Matrix::zeros(1, d))),
        }
    };
    let mut modules = Vec::new();
    for layer in 0..config.n_layers {
        match variant {
            AdapterVariant::H => {
                modules.push(make(layer, AdapterPlacement::AfterAttention, false, rng));
                modules.push(make(layer, AdapterPlacement::AfterMlp, false, rng));
            }
            AdapterVariant::L => {
                modules.push(make(layer, AdapterPlacement::AfterMlp, true, rng));
            }
        }
    }
    Ok(modules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn variant_h_has_two_per_block() {
        let cfg = ModelConfig::toy();
        let mods = adapter_attach(&cfg, AdapterVariant::H, 8, &mut seeded_rng(1)).unwrap();
        assert_eq!(mods.len(), 4);
        assert!(mods.iter().all(|m| m.layer_norm.is_none()));
        assert_eq!(
            mods.iter().filter(|m| m.placement == AdapterPlacement::AfterAttention).count(),
            2
        );
    }

    #[test]
    fn variant_l_has_one_per_block_with_layer_norm() {
        let cfg = ModelConfig::toy();
        let mods = adapter_attach(&cfg, AdapterVariant::L, 8, &mut seeded_rng(1)).unwrap();
        assert_eq!(mods.len(), 2);
        assert!(mods.iter().all(|m| m.layer_norm.is_some()));
        assert!(mods.iter().all(|m| m.placement == AdapterPlacement::AfterMlp));
    }

    #[test]
    fn zero_up_projection_is_the_identity() {
        let cfg = ModelConfig::toy();
        let mods = adapter_attach(&cfg, AdapterVariant::H, 8, &mut seeded_rng(2)).unwrap();
        let x = Matrix::randn(5, 64, 1.0, &mut seeded_rng(3));
        let out = mods[0].apply(&x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn bottleneck_must_be_below_d_model() {
        let cfg = ModelConfig::toy();
        assert!(adapter_attach(&cfg, AdapterVariant::H, 64, &mut seeded_rng(1)).is_err());
        assert!(adapter_attach(&cfg, AdapterVariant::H, 0, &mut seeded_rng(1)).is_err());
    }
}
