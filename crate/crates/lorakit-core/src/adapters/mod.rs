//! Adaptation strategies as interchangeable attachments.
//!
//! Every way of specializing the frozen base model lives behind one enum:
//! full fine-tuning (all parameters), top-2-block fine-tuning, bias-only
//! tuning, prefix-embedding and prefix-layer tuning, two bottleneck
//! adapter variants, low-rank attention updates, and the low-rank +
//! prefix compositions. [`AdaptState::attach`] materializes whatever
//! trainable state the strategy needs; the training loop and the budget
//! calculators agree on exactly which scalars are trainable.

pub mod adapter;
pub mod lora;
pub mod prefix;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub use adapter::{adapter_attach, AdapterModule, AdapterPlacement, AdapterVariant};
pub use lora::{lora_attach, rank_warning, AttnWeight, LoraModule};
pub use prefix::{prefix_attach, PrefixKind, PrefixState};

use crate::error::CoreError;
use crate::model::config::ModelConfig;
use crate::model::transformer::TransformerModel;
use crate::rng::derived_rng;
use crate::Result;

/// Low-rank update hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoraSpec {
    pub rank: usize,
    /// Scaling numerator; the applied factor is `alpha / rank`.
    pub alpha: f64,
    pub targets: Vec<AttnWeight>,
    /// Opt-in: also train the host bias vectors.
    pub train_biases: bool,
}

impl LoraSpec {
    /// Rank and targets with `alpha = rank` (unit scaling).
    pub fn new(rank: usize, targets: &[AttnWeight]) -> Self {
        LoraSpec { rank, alpha: rank as f64, targets: targets.to_vec(), train_biases: false }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }
}

/// Tagged description of one adaptation method and its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AdaptationStrategy {
    /// Every model parameter trains.
    FullFineTune,
    /// Only the last two blocks and the output head train.
    FineTuneTop2,
    /// Only bias vectors and layer-norm shifts train.
    BitFit,
    PrefixEmbed { l_p: usize, l_i: usize },
    PrefixLayer { l_p: usize, l_i: usize },
    AdapterH { r_b: usize },
    AdapterL { r_b: usize },
    Lora(LoraSpec),
    LoraPlusPrefixEmbed { lora: LoraSpec, l_p: usize, l_i: usize },
    LoraPlusPrefixLayer { lora: LoraSpec, l_p: usize, l_i: usize },
}

impl AdaptationStrategy {
    /// Short tag used in tables and file names.
    pub fn label(&self) -> &'static str {
        match self {
            AdaptationStrategy::FullFineTune => "ft",
            AdaptationStrategy::FineTuneTop2 => "fttop2",
            AdaptationStrategy::BitFit => "bitfit",
            AdaptationStrategy::PrefixEmbed { .. } => "preembed",
            AdaptationStrategy::PrefixLayer { .. } => "prelayer",
            AdaptationStrategy::AdapterH { .. } => "adapterH",
            AdaptationStrategy::AdapterL { .. } => "adapterL",
            AdaptationStrategy::Lora(_) => "lora",
            AdaptationStrategy::LoraPlusPrefixEmbed { .. } => "lora+pe",
            AdaptationStrategy::LoraPlusPrefixLayer { .. } => "lora+pl",
        }
    }

    /// Canonical round-trippable text form, e.g. `lora:r=4:alpha=4:qv`.
    pub fn spec_string(&self) -> String {
        fn targets(t: &[AttnWeight]) -> String {
            t.iter()
                .map(|w| match w {
                    AttnWeight::Q => 'q',
                    AttnWeight::K => 'k',
                    AttnWeight::V => 'v',
                    AttnWeight::O => 'o',
                })
                .collect()
        }
        fn lora(spec: &LoraSpec) -> String {
            let mut s = format!("r={}:alpha={}:{}", spec.rank, spec.alpha, targets(&spec.targets));
            if spec.train_biases {
                s.push_str(":biases");
            }
            s
        }
        match self {
            AdaptationStrategy::FullFineTune => "ft".into(),
            AdaptationStrategy::FineTuneTop2 => "fttop2".into(),
            AdaptationStrategy::BitFit => "bitfit".into(),
            AdaptationStrategy::PrefixEmbed { l_p, l_i } => format!("preembed:lp={l_p}:li={l_i}"),
            AdaptationStrategy::PrefixLayer { l_p, l_i } => format!("prelayer:lp={l_p}:li={l_i}"),
            AdaptationStrategy::AdapterH { r_b } => format!("adapterH:r={r_b}"),
            AdaptationStrategy::AdapterL { r_b } => format!("adapterL:r={r_b}"),
            AdaptationStrategy::Lora(spec) => format!("lora:{}", lora(spec)),
            AdaptationStrategy::LoraPlusPrefixEmbed { lora: l, l_p, l_i } => {
                format!("lora+pe:{}:lp={l_p}:li={l_i}", lora(l))
            }
            AdaptationStrategy::LoraPlusPrefixLayer { lora: l, l_p, l_i } => {
                format!("lora+pl:{}:lp={l_p}:li={l_i}", lora(l))
            }
        }
    }

    /// Parses the `spec_string` grammar. Segments after the kind are
    /// `key=value` pairs, a bare target string like `qv`, or the `biases`
    /// flag; `alpha` defaults to the rank.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or("");
        let mut rank: Option<usize> = None;
        let mut alpha: Option<f64> = None;
        let mut l_p: usize = 0;
        let mut l_i: usize = 0;
        let mut targets: Option<Vec<AttnWeight>> = None;
        let mut train_biases = false;

        let parse_usize = |key: &str, v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| CoreError::Config(format!("bad value '{v}' for {key} in '{s}'")))
        };
        for seg in parts {
            if let Some((key, value)) = seg.split_once('=') {
                match key {
                    "r" | "rank" | "rb" => rank = Some(parse_usize(key, value)?),
                    "alpha" => {
                        alpha = Some(value.parse::<f64>().map_err(|_| {
                            CoreError::Config(format!("bad alpha '{value}' in '{s}'"))
                        })?)
                    }
                    "lp" => l_p = parse_usize(key, value)?,
                    "li" => l_i = parse_usize(key, value)?,
                    other => {
                        return Err(CoreError::Config(format!(
                            "unknown key '{other}' in strategy '{s}'"
                        )))
                    }
                }
            } else if seg == "biases" {
                train_biases = true;
            } else if !seg.is_empty() && seg.chars().all(|c| "qkvo".contains(c)) {
                let mut t = Vec::new();
                for c in seg.chars() {
                    let w = AttnWeight::parse(&c.to_string())?;
                    if !t.contains(&w) {
                        t.push(w);
                    }
                }
                targets = Some(t);
            } else {
                return Err(CoreError::Config(format!("unknown segment '{seg}' in '{s}'")));
            }
        }

        let need_rank = |what: &str| {
            rank.ok_or_else(|| CoreError::Config(format!("{what} requires r=<rank> in '{s}'")))
        };
        let lora_spec = |rank: usize| LoraSpec {
            rank,
            alpha: alpha.unwrap_or(rank as f64),
            targets: targets.clone().unwrap_or_else(|| alloc::vec![AttnWeight::Q, AttnWeight::V]),
            train_biases,
        };
        match kind {
            "ft" => Ok(AdaptationStrategy::FullFineTune),
            "fttop2" | "ft-top2" => Ok(AdaptationStrategy::FineTuneTop2),
            "bitfit" => Ok(AdaptationStrategy::BitFit),
            "preembed" => Ok(AdaptationStrategy::PrefixEmbed { l_p, l_i }),
            "prelayer" => Ok(AdaptationStrategy::PrefixLayer { l_p, l_i }),
            "adapterH" | "adapterh" => {
                Ok(AdaptationStrategy::AdapterH { r_b: need_rank("adapterH")? })
            }
            "adapterL" | "adapterl" => {
                Ok(AdaptationStrategy::AdapterL { r_b: need_rank("adapterL")? })
            }
            "lora" => Ok(AdaptationStrategy::Lora(lora_spec(need_rank("lora")?))),
            "lora+pe" => Ok(AdaptationStrategy::LoraPlusPrefixEmbed {
                lora: lora_spec(need_rank("lora+pe")?),
                l_p,
                l_i,
            }),
            "lora+pl" => Ok(AdaptationStrategy::LoraPlusPrefixLayer {
                lora: lora_spec(need_rank("lora+pl")?),
                l_p,
                l_i,
            }),
            other => Err(CoreError::Config(format!("unknown strategy '{other}'"))),
        }
    }

    /// Sequence positions reserved by prefix slots.
    pub fn reserved_slots(&self) -> usize {
        match self {
            AdaptationStrategy::PrefixEmbed { l_p, l_i }
            | AdaptationStrategy::PrefixLayer { l_p, l_i }
            | AdaptationStrategy::LoraPlusPrefixEmbed { l_p, l_i, .. }
            | AdaptationStrategy::LoraPlusPrefixLayer { l_p, l_i, .. } => l_p + l_i,
            _ => 0,
        }
    }

    /// The low-rank component, when the strategy has one.
    pub fn lora_spec(&self) -> Option<&LoraSpec> {
        match self {
            AdaptationStrategy::Lora(s)
            | AdaptationStrategy::LoraPlusPrefixEmbed { lora: s, .. }
            | AdaptationStrategy::LoraPlusPrefixLayer { lora: s, .. } => Some(s),
            _ => None,
        }
    }
}

/// Builds the composition of a low-rank spec with a prefix method; with
/// zero slots this is exactly the plain low-rank strategy.
pub fn compose(lora: LoraSpec, kind: PrefixKind, l_p: usize, l_i: usize) -> AdaptationStrategy {
    match kind {
        PrefixKind::Embed => AdaptationStrategy::LoraPlusPrefixEmbed { lora, l_p, l_i },
        PrefixKind::Layer => AdaptationStrategy::LoraPlusPrefixLayer { lora, l_p, l_i },
    }
}

/// Materialized trainable attachments for one strategy.
#[derive(Debug, Clone)]
pub struct AdaptState {
    pub strategy: AdaptationStrategy,
    pub lora: Vec<LoraModule>,
    pub adapters: Vec<AdapterModule>,
    pub prefix: Option<PrefixState>,
}

impl AdaptState {
    /// Allocates and initializes whatever the strategy trains.
    /// Deterministic in `seed`.
    pub fn attach(config: &ModelConfig, strategy: AdaptationStrategy, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(seed, 0x41_54_54_43); // attach stream
        let mut state = AdaptState {
            strategy: strategy.clone(),
            lora: Vec::new(),
            adapters: Vec::new(),
            prefix: None,
        };
        match &strategy {
            AdaptationStrategy::FullFineTune
            | AdaptationStrategy::FineTuneTop2
            | AdaptationStrategy::BitFit => {}
            AdaptationStrategy::PrefixEmbed { l_p, l_i } => {
                state.prefix =
                    Some(prefix_attach(config, PrefixKind::Embed, *l_p, *l_i, &mut rng)?);
            }
            AdaptationStrategy::PrefixLayer { l_p, l_i } => {
                state.prefix =
                    Some(prefix_attach(config, PrefixKind::Layer, *l_p, *l_i, &mut rng)?);
            }
            AdaptationStrategy::AdapterH { r_b } => {
                state.adapters = adapter_attach(config, AdapterVariant::H, *r_b, &mut rng)?;
            }
            AdaptationStrategy::AdapterL { r_b } => {
                state.adapters = adapter_attach(config, AdapterVariant::L, *r_b, &mut rng)?;
            }
            AdaptationStrategy::Lora(spec) => {
                state.lora =
                    lora_attach(config, &spec.targets, spec.rank, spec.alpha, &mut rng)?;
            }
            AdaptationStrategy::LoraPlusPrefixEmbed { lora, l_p, l_i } => {
                state.lora =
                    lora_attach(config, &lora.targets, lora.rank, lora.alpha, &mut rng)?;
                state.prefix =
                    Some(prefix_attach(config, PrefixKind::Embed, *l_p, *l_i, &mut rng)?);
            }
            AdaptationStrategy::LoraPlusPrefixLayer { lora, l_p, l_i } => {
                state.lora =
                    lora_attach(config, &lora.targets, lora.rank, lora.alpha, &mut rng)?;
                state.prefix =
                    Some(prefix_attach(config, PrefixKind::Layer, *l_p, *l_i, &mut rng)?);
            }
        }
        Ok(state)
    }

    pub fn reserved_slots(&self) -> usize {
        self.prefix.as_ref().map_or(0, PrefixState::slots)
    }

    /// The module attached to `(layer, target)`, if any.
    pub fn lora_for(&self, layer: usize, target: AttnWeight) -> Option<&LoraModule> {
        self.lora.iter().find(|m| m.layer == layer && m.target == target)
    }

    pub fn adapters_for(
        &self,
        layer: usize,
        placement: AdapterPlacement,
    ) -> impl Iterator<Item = &AdapterModule> {
        self.adapters
            .iter()
            .filter(move |m| m.layer == layer && m.placement == placement)
    }

    pub fn any_merged(&self) -> bool {
        self.lora.iter().any(|m| m.merged)
    }

    /// Scalars owned by the attachments (excludes unfrozen base params).
    pub fn attachment_scalars(&self) -> usize {
        self.lora.iter().map(LoraModule::trainable_scalars).sum::<usize>()
            + self.adapters.iter().map(AdapterModule::trainable_scalars).sum::<usize>()
            + self.prefix.as_ref().map_or(0, PrefixState::trainable_scalars)
    }

    /// Folds every low-rank module into its host weight.
    pub fn merge_all(&mut self, model: &mut TransformerModel) -> Result<()> {
        for m in &mut self.lora {
            let host = model.attn_weight_mut(m.layer, m.target)?;
            m.merge_into(host)?;
        }
        Ok(())
    }

    /// Restores every host weight to its pre-merge value.
    pub fn unmerge_all(&mut self, model: &mut TransformerModel) -> Result<()> {
        for m in &mut self.lora {
            let host = model.attn_weight_mut(m.layer, m.target)?;
            m.unmerge_from(host)?;
        }
        Ok(())
    }
}

/// Whether a named base-model parameter trains under the strategy.
///
/// Attachment parameters (low-rank factors, adapter weights, prefix
/// vectors) are always trainable and are not part of this predicate.
pub fn base_param_trainable(
    strategy: &AdaptationStrategy,
    config: &ModelConfig,
    name: &str,
) -> bool {
    match strategy {
        AdaptationStrategy::FullFineTune => true,
        AdaptationStrategy::FineTuneTop2 => {
            if name == "head" {
                return true;
            }
            let l = config.n_layers;
            (l >= 1 && name.starts_with(&format!("blocks.{}.", l - 1)))
                || (l >= 2 && name.starts_with(&format!("blocks.{}.", l - 2)))
        }
        AdaptationStrategy::BitFit => is_bias(name) || name.ends_with(".beta"),
        s => s.lora_spec().is_some_and(|spec| spec.train_biases) && is_bias(name),
    }
}

fn is_bias(name: &str) -> bool {
    [".b_q", ".b_k", ".b_v", ".b_o", ".b1", ".b2"]
        .iter()
        .any(|suffix| name.ends_with(suffix))
}

/// Census of trainable scalars: unfrozen base parameters plus attachment
/// parameters. This is the live-model ground truth that the closed-form
/// budget must reproduce exactly.
pub fn trainable_scalar_count(model: &TransformerModel, state: &AdaptState) -> usize {
    let mut n = state.attachment_scalars();
    model.visit_params(&mut |name: &str, m: &crate::matrix::Matrix| {
        if base_param_trainable(&state.strategy, &model.config, name) {
            n += m.len();
        }
    });
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_strings_round_trip() {
        let cases = [
            "ft",
            "fttop2",
            "bitfit",
            "preembed:lp=4:li=0",
            "prelayer:lp=2:li=2",
            "adapterH:r=8",
            "adapterL:r=16",
            "lora:r=4:alpha=32:qv",
            "lora:r=8:alpha=8:qkvo:biases",
            "lora+pe:r=2:alpha=2:qv:lp=4:li=0",
            "lora+pl:r=8:alpha=16:q:lp=2:li=2",
        ];
        for case in cases {
            let s = AdaptationStrategy::parse(case).unwrap();
            let round = AdaptationStrategy::parse(&s.spec_string()).unwrap();
            assert_eq!(s, round, "{case}");
        }
    }

    #[test]
    fn alpha_defaults_to_rank() {
        let s = AdaptationStrategy::parse("lora:r=4:qv").unwrap();
        match s {
            AdaptationStrategy::Lora(spec) => assert_eq!(spec.alpha, 4.0),
            _ => panic!(),
        }
    }

    #[test]
    fn unknown_strategies_and_targets_are_rejected() {
        assert!(AdaptationStrategy::parse("dora:r=4").is_err());
        assert!(AdaptationStrategy::parse("lora:r=4:qx").is_err());
        assert!(AdaptationStrategy::parse("lora:qv").is_err());
    }

    #[test]
    fn composition_with_empty_prefix_counts_like_plain_lora() {
        let cfg = ModelConfig::toy();
        let spec = LoraSpec::new(2, &[AttnWeight::Q, AttnWeight::V]);
        let plain = AdaptState::attach(&cfg, AdaptationStrategy::Lora(spec.clone()), 9).unwrap();
        let composed =
            AdaptState::attach(&cfg, compose(spec, PrefixKind::Embed, 0, 0), 9).unwrap();
        assert_eq!(plain.attachment_scalars(), composed.attachment_scalars());
        assert_eq!(composed.reserved_slots(), 0);
    }

    #[test]
    fn composition_sums_constituents() {
        let cfg = ModelConfig::toy();
        // lora r=2 on q,v: 2 layers * 2 targets * 2 * 64 * 2 = 1024;
        // preembed lp=4: 4 * 64 = 256.
        let spec = LoraSpec::new(2, &[AttnWeight::Q, AttnWeight::V]);
        let state =
            AdaptState::attach(&cfg, compose(spec, PrefixKind::Embed, 4, 0), 9).unwrap();
        assert_eq!(state.attachment_scalars(), 1024 + 256);

        // lora+pl with lp=2, li=2 adds L * d * 4 = 512.
        let spec = LoraSpec::new(2, &[AttnWeight::Q, AttnWeight::V]);
        let state =
            AdaptState::attach(&cfg, compose(spec, PrefixKind::Layer, 2, 2), 9).unwrap();
        assert_eq!(state.attachment_scalars(), 1024 + 512);
    }

    #[test]
    fn bitfit_predicate_selects_biases_and_shifts() {
        let cfg = ModelConfig::toy();
        let s = AdaptationStrategy::BitFit;
        assert!(base_param_trainable(&s, &cfg, "blocks.0.attn.b_q"));
        assert!(base_param_trainable(&s, &cfg, "blocks.1.mlp.b1"));
        assert!(base_param_trainable(&s, &cfg, "ln_f.beta"));
        assert!(!base_param_trainable(&s, &cfg, "ln_f.gamma"));
        assert!(!base_param_trainable(&s, &cfg, "blocks.0.attn.w_q"));
        assert!(!base_param_trainable(&s, &cfg, "embed"));
    }

    #[test]
    fn fttop2_unfreezes_last_two_blocks_and_head() {
        let cfg = ModelConfig::toy(); // 2 layers: both blocks train
        let s = AdaptationStrategy::FineTuneTop2;
        assert!(base_param_trainable(&s, &cfg, "blocks.0.attn.w_q"));
        assert!(base_param_trainable(&s, &cfg, "blocks.1.mlp.w2"));
        assert!(base_param_trainable(&s, &cfg, "head"));
        assert!(!base_param_trainable(&s, &cfg, "embed"));
        assert!(!base_param_trainable(&s, &cfg, "ln_f.gamma"));

        let deep = ModelConfig::new(4, 64, 4, 64, 32);
        assert!(!base_param_trainable(&s, &deep, "blocks.1.attn.w_q"));
        assert!(base_param_trainable(&s, &deep, "blocks.2.attn.w_q"));
        assert!(base_param_trainable(&s, &deep, "blocks.3.attn.w_q"));
    }
}
