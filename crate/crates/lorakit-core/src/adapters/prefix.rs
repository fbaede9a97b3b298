//! Prefix-embedding and prefix-layer tuning.
//!
//! Both methods reserve `l_p` slots before the context and `l_i` slots
//! between context and target, shrinking the sequence budget available to
//! the task. Prefix-embedding tuning learns the slot embeddings; prefix-
//! layer tuning additionally overwrites the slot activations after every
//! block with trainable vectors (the slots' input embeddings stay at
//! zero and are not counted as trainable).

use alloc::format;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::matrix::Matrix;
use crate::model::config::ModelConfig;
use crate::rng::Rng;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PrefixKind {
    Embed,
    Layer,
}

/// Trainable state for the prefix methods.
#[derive(Debug, Clone)]
pub struct PrefixState {
    pub kind: PrefixKind,
    pub l_p: usize,
    pub l_i: usize,
    /// `(l_p + l_i) x d` slot embeddings; trainable for `Embed`, absent
    /// for `Layer` (whose slots enter as zeros).
    pub embed: Option<Matrix>,
    /// One `(l_p + l_i) x d` replacement-activation matrix per layer for
    /// `Layer`.
    pub per_layer: Option<Vec<Matrix>>,
}

impl PrefixState {
    /// Sequence positions consumed by the slots.
    pub fn slots(&self) -> usize {
        self.l_p + self.l_i
    }

    pub fn trainable_scalars(&self) -> usize {
        self.embed.as_ref().map_or(0, Matrix::len)
            + self.per_layer.as_ref().map_or(0, |v| v.iter().map(Matrix::len).sum())
    }
}

/// Allocates prefix state. `l_p + l_i` may be zero, in which case the
/// state is inert (useful as the neutral element of composition).
pub fn prefix_attach(
    config: &ModelConfig,
    kind: PrefixKind,
    l_p: usize,
    l_i: usize,
    rng: &mut Rng,
) -> Result<PrefixState> {
    let slots = l_p + l_i;
    if slots >= config.max_seq_len {
        return Err(CoreError::Config(format!(
            "{slots} prefix slots exhaust the sequence budget of {}",
            config.max_seq_len
        )));
    }
    let d = config.d_model;
    let embed = (kind == PrefixKind::Embed && slots > 0)
        .then(|| Matrix::randn(slots, d, 0.02, rng));
    let per_layer = (kind == PrefixKind::Layer && slots > 0).then(|| {
        (0..config.n_layers).map(|_| Matrix::randn(slots, d, 0.02, rng)).collect()
    });
    Ok(PrefixState { kind, l_p, l_i, embed, per_layer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn embed_parameter_count() {
        // l_p = 4, l_i = 0, d = 64: 256 trainable scalars.
        let cfg = ModelConfig::toy();
        let s = prefix_attach(&cfg, PrefixKind::Embed, 4, 0, &mut seeded_rng(1)).unwrap();
        assert_eq!(s.trainable_scalars(), 256);
        assert_eq!(s.slots(), 4);
    }

    #[test]
    fn layer_parameter_count() {
        // l_p = 2, l_i = 2, L = 2, d = 64: 512 trainable scalars.
        let cfg = ModelConfig::toy();
        let s = prefix_attach(&cfg, PrefixKind::Layer, 2, 2, &mut seeded_rng(1)).unwrap();
        assert_eq!(s.trainable_scalars(), 512);
        assert!(s.embed.is_none());
    }

    #[test]
    fn slots_shrink_usable_length() {
        let cfg = ModelConfig::toy();
        let s = prefix_attach(&cfg, PrefixKind::Embed, 2, 2, &mut seeded_rng(1)).unwrap();
        assert_eq!(cfg.max_seq_len - s.slots(), 28);
    }

    #[test]
    fn budget_exhaustion_is_rejected() {
        let cfg = ModelConfig::toy();
        assert!(prefix_attach(&cfg, PrefixKind::Embed, 32, 0, &mut seeded_rng(1)).is_err());
        assert!(prefix_attach(&cfg, PrefixKind::Layer, 16, 16, &mut seeded_rng(1)).is_err());
    }

    #[test]
    fn empty_prefix_is_inert() {
        let cfg = ModelConfig::toy();
        let s = prefix_attach(&cfg, PrefixKind::Embed, 0, 0, &mut seeded_rng(1)).unwrap();
        assert_eq!(s.trainable_scalars(), 0);
        assert!(s.embed.is_none());
    }
}
