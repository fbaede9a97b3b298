//! A toy decoder-only transformer.
//!
//! Pre-layer-norm blocks, learned positional embeddings, an untied output
//! head, and biases on every projection (so bias-only tuning has
//! something to train). Weights follow the paper convention `h = W x`
//! (output dim x input dim); activations are row-major `(rows x d)`, so
//! every application is `X W^T` via the stride-transposed matmul.
//!
//! Two forward implementations exist on purpose:
//!
//! * [`build_training_graph`] records the pass on a [`Tape`] and is used
//!   for training; it retains every intermediate for the backward sweep.
//! * [`forward_batch`] is a plain value-level pass used for evaluation,
//!   inference benchmarking, and logit-equality tests; it drops
//!   intermediates eagerly and counts its own operations so structural
//!   claims (merged updates add zero ops, adapters add two matmuls each)
//!   can be asserted rather than assumed.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adapters::adapter::{add_row_in_place, layer_norm_rows};
use crate::adapters::{AdaptState, AdapterPlacement, AttnWeight, PrefixKind};
use crate::error::CoreError;
use crate::fmath;
use crate::matrix::Matrix;
use crate::model::config::ModelConfig;
use crate::rng::{derived_rng, Rng};
use crate::tape::{NodeId, Tape};
use crate::Result;

/// Additive causal-mask value for blocked positions. Large but finite so
/// matrices stay NaN-free.
const MASK_NEG: f64 = -1.0e30;

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        LayerNormParams { gamma: Matrix::filled(1, d, 1.0), beta: Matrix::zeros(1, d) }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub b_q: Matrix,
    pub b_k: Matrix,
    pub b_v: Matrix,
    pub b_o: Matrix,
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    /// `d_ffn x d_model` up projection.
    pub w1: Matrix,
    pub b1: Matrix,
    /// `d_model x d_ffn` down projection.
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

/// The full model: embeddings, positions, blocks, final norm, head.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub pos: Matrix,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormParams,
    /// `vocab x d` output projection (untied from the embedding).
    pub head: Matrix,
}

impl TransformerModel {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(seed, 0x49_4e_49_54); // init stream
        let d = config.d_model;
        let f = config.d_ffn;
        let w_sigma = 1.0 / fmath::sqrt(d as f64);
        let block = |rng: &mut Rng| Block {
            ln1: LayerNormParams::new(d),
            attn: AttentionParams {
                w_q: Matrix::randn(d, d, w_sigma, rng),
                w_k: Matrix::randn(d, d, w_sigma, rng),
                w_v: Matrix::randn(d, d, w_sigma, rng),
                w_o: Matrix::randn(d, d, w_sigma, rng),
                b_q: Matrix::zeros(1, d),
                b_k: Matrix::zeros(1, d),
                b_v: Matrix::zeros(1, d),
                b_o: Matrix::zeros(1, d),
            },
            ln2: LayerNormParams::new(d),
            mlp: MlpParams {
                w1: Matrix::randn(f, d, w_sigma, rng),
                b1: Matrix::zeros(1, f),
                w2: Matrix::randn(d, f, 1.0 / fmath::sqrt(f as f64), rng),
                b2: Matrix::zeros(1, d),
            },
        };
        let blocks = (0..config.n_layers).map(|_| block(&mut rng)).collect();
        Ok(TransformerModel {
            config,
            embed: Matrix::randn(config.vocab_size, d, 0.02, &mut rng),
            pos: Matrix::randn(config.max_seq_len, d, 0.02, &mut rng),
            blocks,
            ln_f: LayerNormParams::new(d),
            head: Matrix::randn(config.vocab_size, d, w_sigma, &mut rng),
        })
    }

    /// Visits every parameter in a stable order with its canonical name.
    pub fn visit_params<F: FnMut(&str, &Matrix)>(&self, f: &mut F) {
        f("embed", &self.embed);
        f("pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{i}.ln1.gamma"), &b.ln1.gamma);
            f(&format!("blocks.{i}.ln1.beta"), &b.ln1.beta);
            f(&format!("blocks.{i}.attn.w_q"), &b.attn.w_q);
            f(&format!("blocks.{i}.attn.b_q"), &b.attn.b_q);
            f(&format!("blocks.{i}.attn.w_k"), &b.attn.w_k);
            f(&format!("blocks.{i}.attn.b_k"), &b.attn.b_k);
            f(&format!("blocks.{i}.attn.w_v"), &b.attn.w_v);
            f(&format!("blocks.{i}.attn.b_v"), &b.attn.b_v);
            f(&format!("blocks.{i}.attn.w_o"), &b.attn.w_o);
            f(&format!("blocks.{i}.attn.b_o"), &b.attn.b_o);
            f(&format!("blocks.{i}.ln2.gamma"), &b.ln2.gamma);
            f(&format!("blocks.{i}.ln2.beta"), &b.ln2.beta);
            f(&format!("blocks.{i}.mlp.w1"), &b.mlp.w1);
            f(&format!("blocks.{i}.mlp.b1"), &b.mlp.b1);
            f(&format!("blocks.{i}.mlp.w2"), &b.mlp.w2);
            f(&format!("blocks.{i}.mlp.b2"), &b.mlp.b2);
        }
        f("ln_f.gamma", &self.ln_f.gamma);
        f("ln_f.beta", &self.ln_f.beta);
        f("head", &self.head);
    }

    /// Mutable lookup of a parameter by its canonical name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        match name {
            "embed" => return Some(&mut self.embed),
            "pos" => return Some(&mut self.pos),
            "ln_f.gamma" => return Some(&mut self.ln_f.gamma),
            "ln_f.beta" => return Some(&mut self.ln_f.beta),
            "head" => return Some(&mut self.head),
            _ => {}
        }
        let rest = name.strip_prefix("blocks.")?;
        let (idx, field) = rest.split_once('.')?;
        let b = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
        Some(match field {
            "ln1.gamma" => &mut b.ln1.gamma,
            "ln1.beta" => &mut b.ln1.beta,
            "attn.w_q" => &mut b.attn.w_q,
            "attn.b_q" => &mut b.attn.b_q,
            "attn.w_k" => &mut b.attn.w_k,
            "attn.b_k" => &mut b.attn.b_k,
            "attn.w_v" => &mut b.attn.w_v,
            "attn.b_v" => &mut b.attn.b_v,
            "attn.w_o" => &mut b.attn.w_o,
            "attn.b_o" => &mut b.attn.b_o,
            "ln2.gamma" => &mut b.ln2.gamma,
            "ln2.beta" => &mut b.ln2.beta,
            "mlp.w1" => &mut b.mlp.w1,
            "mlp.b1" => &mut b.mlp.b1,
            "mlp.w2" => &mut b.mlp.w2,
            "mlp.b2" => &mut b.mlp.b2,
            _ => return None,
        })
    }

    pub fn attn_weight(&self, layer: usize, target: AttnWeight) -> Result<&Matrix> {
        let b = self.blocks.get(layer).ok_or_else(|| {
            CoreError::Config(format!("layer {layer} out of range"))
        })?;
        Ok(match target {
            AttnWeight::Q => &b.attn.w_q,
            AttnWeight::K => &b.attn.w_k,
            AttnWeight::V => &b.attn.w_v,
            AttnWeight::O => &b.attn.w_o,
        })
    }

    pub fn attn_weight_mut(&mut self, layer: usize, target: AttnWeight) -> Result<&mut Matrix> {
        let b = self.blocks.get_mut(layer).ok_or_else(|| {
            CoreError::Config(format!("layer {layer} out of range"))
        })?;
        Ok(match target {
            AttnWeight::Q => &mut b.attn.w_q,
            AttnWeight::K => &mut b.attn.w_k,
            AttnWeight::V => &mut b.attn.w_v,
            AttnWeight::O => &mut b.attn.w_o,
        })
    }

    /// Live parameter census; equals [`ModelConfig::total_params`].
    pub fn param_scalars(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, m: &Matrix| n += m.len());
        n
    }
}

/// One training/evaluation example.
#[derive(Debug, Clone, Copy)]
pub struct SeqExample<'a> {
    pub x: &'a [usize],
    pub y: &'a [usize],
}

/// Row layout of a batch: every sample occupies `rows_per_sample`
/// consecutive rows laid out as `[prefix | context | infix | target]`.
#[derive(Debug, Clone, Copy)]
pub struct BatchLayout {
    pub l_p: usize,
    pub l_i: usize,
    pub x_len: usize,
    pub y_len: usize,
    pub n_samples: usize,
}

impl BatchLayout {
    pub fn from_batch(
        config: &ModelConfig,
        state: Option<&AdaptState>,
        batch: &[SeqExample],
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(CoreError::Contract("empty batch".into()));
        }
        let (l_p, l_i) = state
            .and_then(|s| s.prefix.as_ref())
            .map_or((0, 0), |p| (p.l_p, p.l_i));
        let x_len = batch[0].x.len();
        let y_len = batch[0].y.len();
        for ex in batch {
            if ex.x.len() != x_len || ex.y.len() != y_len {
                return Err(CoreError::Contract(
                    "batched sequences must share context/target lengths".into(),
                ));
            }
            if ex.x.iter().chain(ex.y).any(|&t| t >= config.vocab_size) {
                return Err(CoreError::Contract("token id out of range".into()));
            }
        }
        let layout = BatchLayout { l_p, l_i, x_len, y_len, n_samples: batch.len() };
        if layout.rows_per_sample() > config.max_seq_len {
            return Err(CoreError::Contract(format!(
                "sequence of {} rows exceeds max_seq_len {}",
                layout.rows_per_sample(),
                config.max_seq_len
            )));
        }
        Ok(layout)
    }

    pub fn rows_per_sample(&self) -> usize {
        self.l_p + self.x_len + self.l_i + self.y_len
    }

    pub fn total_rows(&self) -> usize {
        self.rows_per_sample() * self.n_samples
    }

    /// `(row, class)` pairs for the loss: the rows that predict each
    /// target token. The first target token is predicted by the last
    /// context/infix row; with no context and no slots it has no
    /// predictor and is skipped.
    pub fn loss_targets(&self, batch: &[SeqExample]) -> Vec<(usize, usize)> {
        let n = self.rows_per_sample();
        let mut out = Vec::with_capacity(self.n_samples * self.y_len);
        for (s, ex) in batch.iter().enumerate() {
            let base = s * n;
            for (j, &tok) in ex.y.iter().enumerate() {
                let pred = self.l_p + self.x_len + self.l_i + j;
                if pred == 0 {
                    continue; // nothing precedes the very first token
                }
                out.push((base + pred - 1, tok));
            }
        }
        out
    }

    /// Absolute rows occupied by prefix/infix slots, across the batch.
    pub fn slot_rows(&self) -> Vec<usize> {
        let n = self.rows_per_sample();
        let mut rows = Vec::with_capacity(self.n_samples * (self.l_p + self.l_i));
        for s in 0..self.n_samples {
            let base = s * n;
            for i in 0..self.l_p {
                rows.push(base + i);
            }
            for i in 0..self.l_i {
                rows.push(base + self.l_p + self.x_len + i);
            }
        }
        rows
    }
}

fn causal_mask(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if j <= i { 0.0 } else { MASK_NEG })
}

// ---------------------------------------------------------------------------
// Value-level forward pass
// ---------------------------------------------------------------------------

/// Operation counts of one value-level forward pass. Used to verify
/// structural claims about adapter overhead and merged updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpStats {
    /// GEMM calls of any flavor.
    pub matmuls: usize,
    /// Entrywise passes (bias adds, residual adds, masks, scalings,
    /// nonlinearities).
    pub elementwise: usize,
    pub layer_norms: usize,
    pub softmaxes: usize,
}

/// Batched value-level forward pass; every sample runs under the same
/// (optional) adaptation state. Returns one `rows_per_sample x vocab`
/// logit matrix per sample plus operation counts.
///
/// Merged low-rank modules contribute nothing here — their update already
/// lives in the host weights, so the executed operation sequence is
/// exactly the base model's.
pub fn forward_batch(
    model: &TransformerModel,
    state: Option<&AdaptState>,
    batch: &[SeqExample],
) -> Result<(Vec<Matrix>, OpStats)> {
    let layout = BatchLayout::from_batch(&model.config, state, batch)?;
    let mut stats = OpStats::default();
    let d = model.config.d_model;
    let n = layout.rows_per_sample();
    let heads = model.config.n_heads;
    let dh = model.config.head_dim();
    let scale = 1.0 / fmath::sqrt(dh as f64);

    // Assemble embeddings: slots, context, slots, target; then positions.
    let mut x = Matrix::zeros(layout.total_rows(), d);
    let prefix = state.and_then(|s| s.prefix.as_ref());
    for (s, ex) in batch.iter().enumerate() {
        let base = s * n;
        let mut row = base;
        for i in 0..layout.l_p {
            if let Some(p) = prefix.and_then(|p| p.embed.as_ref()) {
                x.row_mut(row).copy_from_slice(p.row(i));
            }
            row += 1;
        }
        for &t in ex.x {
            x.row_mut(row).copy_from_slice(model.embed.row(t));
            row += 1;
        }
        for i in 0..layout.l_i {
            if let Some(p) = prefix.and_then(|p| p.embed.as_ref()) {
                x.row_mut(row).copy_from_slice(p.row(layout.l_p + i));
            }
            row += 1;
        }
        for &t in ex.y {
            x.row_mut(row).copy_from_slice(model.embed.row(t));
            row += 1;
        }
        for i in 0..n {
            let pos = model.pos.row(i).to_vec();
            for (v, p) in x.row_mut(base + i).iter_mut().zip(&pos) {
                *v += p;
            }
        }
    }
    stats.elementwise += 1;

    let mask = causal_mask(n);
    let slot_rows = layout.slot_rows();

    for (layer, block) in model.blocks.iter().enumerate() {
        // Attention sublayer.
        let xn = layer_norm_rows(&x, &block.ln1.gamma, &block.ln1.beta);
        stats.layer_norms += 1;
        let mut q = project(&xn, &block.attn.w_q, state, layer, AttnWeight::Q, &mut stats)?;
        let mut k = project(&xn, &block.attn.w_k, state, layer, AttnWeight::K, &mut stats)?;
        let mut v = project(&xn, &block.attn.w_v, state, layer, AttnWeight::V, &mut stats)?;
        add_row_in_place(&mut q, &block.attn.b_q);
        add_row_in_place(&mut k, &block.attn.b_k);
        add_row_in_place(&mut v, &block.attn.b_v);
        stats.elementwise += 3;

        let mut attn = Matrix::zeros(layout.total_rows(), d);
        for s in 0..layout.n_samples {
            let qs = q.slice_rows(s * n, n);
            let ks = k.slice_rows(s * n, n);
            let vs = v.slice_rows(s * n, n);
            for h in 0..heads {
                let qh = qs.slice_cols(h * dh, dh);
                let kh = ks.slice_cols(h * dh, dh);
                let vh = vs.slice_cols(h * dh, dh);
                let mut scores = qh.matmul_nt(&kh)?;
                stats.matmuls += 1;
                for (sc, m) in scores.data_mut().iter_mut().zip(mask.data()) {
                    *sc = *sc * scale + m;
                }
                stats.elementwise += 1;
                for i in 0..scores.rows() {
                    softmax_row(scores.row_mut(i));
                }
                stats.softmaxes += 1;
                let out_h = scores.matmul(&vh)?;
                stats.matmuls += 1;
                for i in 0..n {
                    attn.row_mut(s * n + i)[h * dh..(h + 1) * dh]
                        .copy_from_slice(out_h.row(i));
                }
            }
        }
        let mut o = project(&attn, &block.attn.w_o, state, layer, AttnWeight::O, &mut stats)?;
        add_row_in_place(&mut o, &block.attn.b_o);
        x.axpy(1.0, &o)?;
        stats.elementwise += 2;

        if let Some(st) = state {
            for adp in st.adapters_for(layer, AdapterPlacement::AfterAttention) {
                x = adp.apply(&x)?;
                stats.matmuls += 2;
                stats.elementwise += 4; // two biases, relu, residual
                if adp.layer_norm.is_some() {
                    stats.layer_norms += 1;
                }
            }
        }

        // MLP sublayer.
        let xn = layer_norm_rows(&x, &block.ln2.gamma, &block.ln2.beta);
        stats.layer_norms += 1;
        let mut hidden = xn.matmul_nt(&block.mlp.w1)?;
        stats.matmuls += 1;
        add_row_in_place(&mut hidden, &block.mlp.b1);
        for vv in hidden.data_mut() {
            *vv = vv.max(0.0);
        }
        let mut out = hidden.matmul_nt(&block.mlp.w2)?;
        stats.matmuls += 1;
        add_row_in_place(&mut out, &block.mlp.b2);
        x.axpy(1.0, &out)?;
        stats.elementwise += 4;

        if let Some(st) = state {
            for adp in st.adapters_for(layer, AdapterPlacement::AfterMlp) {
                x = adp.apply(&x)?;
                stats.matmuls += 2;
                stats.elementwise += 4;
                if adp.layer_norm.is_some() {
                    stats.layer_norms += 1;
                }
            }
            // Prefix-layer tuning replaces slot activations wholesale.
            if let Some(p) = st.prefix.as_ref() {
                if p.kind == PrefixKind::Layer {
                    if let Some(per_layer) = p.per_layer.as_ref() {
                        let repl = &per_layer[layer];
                        let slots = p.slots();
                        for (i, &row) in slot_rows.iter().enumerate() {
                            x.row_mut(row).copy_from_slice(repl.row(i % slots));
                        }
                        stats.elementwise += 1;
                    }
                }
            }
        }
    }

    let x = layer_norm_rows(&x, &model.ln_f.gamma, &model.ln_f.beta);
    stats.layer_norms += 1;
    let logits = x.matmul_nt(&model.head)?;
    stats.matmuls += 1;

    let per_sample = (0..layout.n_samples).map(|s| logits.slice_rows(s * n, n)).collect();
    Ok((per_sample, stats))
}

/// `x W^T` plus the unmerged low-rank update for `(layer, target)`, when
/// one is attached.
fn project(
    x: &Matrix,
    w: &Matrix,
    state: Option<&AdaptState>,
    layer: usize,
    target: AttnWeight,
    stats: &mut OpStats,
) -> Result<Matrix> {
    let mut out = x.matmul_nt(w)?;
    stats.matmuls += 1;
    if let Some(m) = state.and_then(|s| s.lora_for(layer, target)) {
        if !m.merged {
            // x A^T B^T scaled by alpha/r, in row convention.
            let ax = x.matmul_nt(&m.a)?;
            let update = ax.matmul_nt(&m.b)?;
            out.axpy(m.scaling(), &update)?;
            stats.matmuls += 2;
            stats.elementwise += 1;
        }
    }
    Ok(out)
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = fmath::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Single-sequence convenience wrapper around [`forward_batch`].
pub fn forward_tokens(
    model: &TransformerModel,
    state: Option<&AdaptState>,
    x: &[usize],
    y: &[usize],
) -> Result<Matrix> {
    let (mut logits, _) = forward_batch(model, state, &[SeqExample { x, y }])?;
    Ok(logits.remove(0))
}

/// Per-sample dynamic module selection: each sequence runs under its own
/// adaptation state. Only legal while nothing is merged — merged updates
/// live in the shared host weights and cannot vary per sample.
pub fn forward_batch_dynamic(
    model: &TransformerModel,
    states: &[Option<&AdaptState>],
    batch: &[SeqExample],
) -> Result<Vec<Matrix>> {
    if states.len() != batch.len() {
        return Err(CoreError::Contract(String::from(
            "one adaptation state per sequence required",
        )));
    }
    if states.iter().flatten().any(|s| s.any_merged()) {
        return Err(CoreError::Contract(String::from(
            "dynamic per-sample selection requires unmerged modules",
        )));
    }
    let mut out = Vec::with_capacity(batch.len());
    for (state, ex) in states.iter().zip(batch) {
        out.push(forward_tokens(model, *state, ex.x, ex.y)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tape-level forward pass
// ---------------------------------------------------------------------------

/// Identifies one trainable matrix for the optimizer write-back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamKey {
    /// Base model parameter by canonical name.
    Base(String),
    LoraA(usize),
    LoraB(usize),
    AdapterWDown(usize),
    AdapterBDown(usize),
    AdapterWUp(usize),
    AdapterBUp(usize),
    AdapterLnGamma(usize),
    AdapterLnBeta(usize),
    PrefixEmbed,
    PrefixLayer(usize),
}

/// Result of recording a forward pass for training.
pub struct TrainingGraph {
    pub logits: NodeId,
    pub loss: NodeId,
    /// Trainable leaves in insertion order.
    pub bindings: Vec<(ParamKey, NodeId)>,
}

struct BlockNodes {
    ln1_g: NodeId,
    ln1_b: NodeId,
    w_q: NodeId,
    b_q: NodeId,
    w_k: NodeId,
    b_k: NodeId,
    w_v: NodeId,
    b_v: NodeId,
    w_o: NodeId,
    b_o: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

/// Records the full forward pass and loss on `tape`.
///
/// Base parameters enter as trainable or frozen leaves according to the
/// strategy predicate; attachment parameters are always trainable. With
/// `state = None` and no trainables this doubles as a recorded inference
/// pass (useful in tests).
pub fn build_training_graph<'a>(
    tape: &mut Tape<'a>,
    model: &'a TransformerModel,
    state: Option<&'a AdaptState>,
    batch: &[SeqExample],
) -> Result<TrainingGraph> {
    if let Some(st) = state {
        if st.any_merged() {
            return Err(CoreError::Contract(String::from(
                "training requires unmerged modules; unmerge before stepping",
            )));
        }
    }
    let layout = BatchLayout::from_batch(&model.config, state, batch)?;
    let targets = layout.loss_targets(batch);
    if targets.is_empty() {
        return Err(CoreError::Contract(String::from(
            "batch has no predictable target positions",
        )));
    }

    let mut bindings: Vec<(ParamKey, NodeId)> = Vec::new();
    let strategy = state.map(|s| &s.strategy);
    let leaf = |tape: &mut Tape<'a>,
                    bindings: &mut Vec<(ParamKey, NodeId)>,
                    name: &str,
                    value: &'a Matrix|
     -> NodeId {
        let trainable = match (strategy, state) {
            (Some(st), _) => {
                crate::adapters::base_param_trainable(st, &model.config, name)
            }
            (None, _) => false,
        };
        if trainable {
            let id = tape.param_ref(value);
            bindings.push((ParamKey::Base(String::from(name)), id));
            id
        } else {
            tape.constant_ref(value)
        }
    };

    // Base parameter leaves.
    let embed = leaf(tape, &mut bindings, "embed", &model.embed);
    let pos = leaf(tape, &mut bindings, "pos", &model.pos);
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (i, b) in model.blocks.iter().enumerate() {
        let name = |field: &str| format!("blocks.{i}.{field}");
        blocks.push(BlockNodes {
            ln1_g: leaf(tape, &mut bindings, &name("ln1.gamma"), &b.ln1.gamma),
            ln1_b: leaf(tape, &mut bindings, &name("ln1.beta"), &b.ln1.beta),
            w_q: leaf(tape, &mut bindings, &name("attn.w_q"), &b.attn.w_q),
            b_q: leaf(tape, &mut bindings, &name("attn.b_q"), &b.attn.b_q),
            w_k: leaf(tape, &mut bindings, &name("attn.w_k"), &b.attn.w_k),
            b_k: leaf(tape, &mut bindings, &name("attn.b_k"), &b.attn.b_k),
            w_v: leaf(tape, &mut bindings, &name("attn.w_v"), &b.attn.w_v),
            b_v: leaf(tape, &mut bindings, &name("attn.b_v"), &b.attn.b_v),
            w_o: leaf(tape, &mut bindings, &name("attn.w_o"), &b.attn.w_o),
            b_o: leaf(tape, &mut bindings, &name("attn.b_o"), &b.attn.b_o),
            ln2_g: leaf(tape, &mut bindings, &name("ln2.gamma"), &b.ln2.gamma),
            ln2_b: leaf(tape, &mut bindings, &name("ln2.beta"), &b.ln2.beta),
            w1: leaf(tape, &mut bindings, &name("mlp.w1"), &b.mlp.w1),
            b1: leaf(tape, &mut bindings, &name("mlp.b1"), &b.mlp.b1),
            w2: leaf(tape, &mut bindings, &name("mlp.w2"), &b.mlp.w2),
            b2: leaf(tape, &mut bindings, &name("mlp.b2"), &b.mlp.b2),
        });
    }
    let ln_f_g = leaf(tape, &mut bindings, "ln_f.gamma", &model.ln_f.gamma);
    let ln_f_b = leaf(tape, &mut bindings, "ln_f.beta", &model.ln_f.beta);
    let head = leaf(tape, &mut bindings, "head", &model.head);

    // Attachment leaves (always trainable).
    let mut lora_nodes: Vec<(usize, AttnWeight, NodeId, NodeId, f64)> = Vec::new();
    let mut adapter_nodes: Vec<(usize, AdapterPlacement, AdapterTapeNodes)> = Vec::new();
    let mut prefix_embed: Option<NodeId> = None;
    let mut prefix_layers: Vec<NodeId> = Vec::new();
    if let Some(st) = state {
        for (i, m) in st.lora.iter().enumerate() {
            let a = tape.param_ref(&m.a);
            let b = tape.param_ref(&m.b);
            bindings.push((ParamKey::LoraA(i), a));
            bindings.push((ParamKey::LoraB(i), b));
            lora_nodes.push((m.layer, m.target, a, b, m.scaling()));
        }
        for (i, adp) in st.adapters.iter().enumerate() {
            let w_down = tape.param_ref(&adp.w_down);
            let b_down = tape.param_ref(&adp.b_down);
            let w_up = tape.param_ref(&adp.w_up);
            let b_up = tape.param_ref(&adp.b_up);
            bindings.push((ParamKey::AdapterWDown(i), w_down));
            bindings.push((ParamKey::AdapterBDown(i), b_down));
            bindings.push((ParamKey::AdapterWUp(i), w_up));
            bindings.push((ParamKey::AdapterBUp(i), b_up));
            let ln = adp.layer_norm.as_ref().map(|(g, b)| {
                let gid = tape.param_ref(g);
                let bid = tape.param_ref(b);
                bindings.push((ParamKey::AdapterLnGamma(i), gid));
                bindings.push((ParamKey::AdapterLnBeta(i), bid));
                (gid, bid)
            });
            adapter_nodes.push((
                adp.layer,
                adp.placement,
                AdapterTapeNodes { w_down, b_down, w_up, b_up, ln },
            ));
        }
        if let Some(p) = st.prefix.as_ref() {
            if let Some(e) = p.embed.as_ref() {
                let id = tape.param_ref(e);
                bindings.push((ParamKey::PrefixEmbed, id));
                prefix_embed = Some(id);
            }
            if let Some(per_layer) = p.per_layer.as_ref() {
                for (l, m) in per_layer.iter().enumerate() {
                    let id = tape.param_ref(m);
                    bindings.push((ParamKey::PrefixLayer(l), id));
                    prefix_layers.push(id);
                }
            }
        }
    }

    // Embedding assembly.
    let n = layout.rows_per_sample();
    let d = model.config.d_model;
    let mut sample_rows: Vec<NodeId> = Vec::with_capacity(layout.n_samples);
    for ex in batch {
        let mut parts: Vec<NodeId> = Vec::new();
        let real: Vec<usize> = ex.x.iter().chain(ex.y.iter()).copied().collect();
        let tokens = tape.gather(embed, &real)?;
        if layout.l_p > 0 {
            let p = match prefix_embed {
                Some(pe) => tape.slice_rows(pe, 0, layout.l_p),
                None => tape.constant(Matrix::zeros(layout.l_p, d)),
            };
            parts.push(p);
        }
        if layout.l_i > 0 {
            let x_part = tape.slice_rows(tokens, 0, layout.x_len);
            let y_part = tape.slice_rows(tokens, layout.x_len, layout.y_len);
            let infix = match prefix_embed {
                Some(pe) => tape.slice_rows(pe, layout.l_p, layout.l_i),
                None => tape.constant(Matrix::zeros(layout.l_i, d)),
            };
            parts.extend([x_part, infix, y_part]);
        } else {
            parts.push(tokens);
        }
        sample_rows.push(if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) });
    }
    let mut x = if sample_rows.len() == 1 {
        sample_rows[0]
    } else {
        tape.concat_rows(&sample_rows)
    };
    let pos_ids: Vec<usize> = (0..layout.total_rows()).map(|r| r % n).collect();
    let pos_rows = tape.gather(pos, &pos_ids)?;
    x = tape.add(x, pos_rows)?;

    let mask = tape.constant(causal_mask(n));
    let heads = model.config.n_heads;
    let dh = model.config.head_dim();
    let scale = 1.0 / fmath::sqrt(dh as f64);
    let slot_rows = layout.slot_rows();

    let lora_at = |layer: usize, target: AttnWeight| {
        lora_nodes
            .iter()
            .find(|(l, t, ..)| *l == layer && *t == target)
            .map(|&(_, _, a, b, s)| (a, b, s))
    };

    for (layer, nodes) in blocks.iter().enumerate() {
        let xn = tape.layer_norm(x, nodes.ln1_g, nodes.ln1_b)?;
        let proj = |tape: &mut Tape<'a>, w, b, target| -> Result<NodeId> {
            let mut p = tape.matmul_nt(xn, w)?;
            if let Some((a_id, b_id, s)) = lora_at(layer, target) {
                let ax = tape.matmul_nt(xn, a_id)?;
                let up = tape.matmul_nt(ax, b_id)?;
                let scaled = tape.scale(up, s);
                p = tape.add(p, scaled)?;
            }
            tape.add_row(p, b)
        };
        let q = proj(tape, nodes.w_q, nodes.b_q, AttnWeight::Q)?;
        let k = proj(tape, nodes.w_k, nodes.b_k, AttnWeight::K)?;
        let v = proj(tape, nodes.w_v, nodes.b_v, AttnWeight::V)?;

        let mut sample_outs = Vec::with_capacity(layout.n_samples);
        for s in 0..layout.n_samples {
            let qs = tape.slice_rows(q, s * n, n);
            let ks = tape.slice_rows(k, s * n, n);
            let vs = tape.slice_rows(v, s * n, n);
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(qs, h * dh, dh);
                let kh = tape.slice_cols(ks, h * dh, dh);
                let vh = tape.slice_cols(vs, h * dh, dh);
                let scores = tape.matmul_nt(qh, kh)?;
                let scaled = tape.scale(scores, scale);
                let masked = tape.add(scaled, mask)?;
                let probs = tape.softmax_rows(masked);
                head_outs.push(tape.matmul(probs, vh)?);
            }
            sample_outs.push(tape.concat_cols(&head_outs));
        }
        let attn = if sample_outs.len() == 1 {
            sample_outs[0]
        } else {
            tape.concat_rows(&sample_outs)
        };

        let mut o = tape.matmul_nt(attn, nodes.w_o)?;
        if let Some((a_id, b_id, s)) = lora_at(layer, AttnWeight::O) {
            let ax = tape.matmul_nt(attn, a_id)?;
            let up = tape.matmul_nt(ax, b_id)?;
            let scaled = tape.scale(up, s);
            o = tape.add(o, scaled)?;
        }
        let o = tape.add_row(o, nodes.b_o)?;
        x = tape.add(x, o)?;

        for (l, placement, adp) in &adapter_nodes {
            if *l == layer && *placement == AdapterPlacement::AfterAttention {
                x = apply_adapter_on_tape(tape, x, adp)?;
            }
        }

        let xn2 = tape.layer_norm(x, nodes.ln2_g, nodes.ln2_b)?;
        let h1 = tape.matmul_nt(xn2, nodes.w1)?;
        let h1 = tape.add_row(h1, nodes.b1)?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul_nt(h1, nodes.w2)?;
        let h2 = tape.add_row(h2, nodes.b2)?;
        x = tape.add(x, h2)?;

        for (l, placement, adp) in &adapter_nodes {
            if *l == layer && *placement == AdapterPlacement::AfterMlp {
                x = apply_adapter_on_tape(tape, x, adp)?;
            }
        }

        if !prefix_layers.is_empty() && !slot_rows.is_empty() {
            let repl = prefix_layers[layer];
            let src = if layout.n_samples == 1 {
                repl
            } else {
                let copies: Vec<NodeId> = (0..layout.n_samples).map(|_| repl).collect();
                tape.concat_rows(&copies)
            };
            x = tape.overwrite_rows(x, src, &slot_rows)?;
        }
    }

    let x = tape.layer_norm(x, ln_f_g, ln_f_b)?;
    let logits = tape.matmul_nt(x, head)?;
    let loss = tape.mean_nll(logits, &targets)?;
    Ok(TrainingGraph { logits, loss, bindings })
}

struct AdapterTapeNodes {
    w_down: NodeId,
    b_down: NodeId,
    w_up: NodeId,
    b_up: NodeId,
    ln: Option<(NodeId, NodeId)>,
}

fn apply_adapter_on_tape<'a>(
    tape: &mut Tape<'a>,
    x: NodeId,
    adp: &AdapterTapeNodes,
) -> Result<NodeId> {
    let input = match adp.ln {
        Some((g, b)) => tape.layer_norm(x, g, b)?,
        None => x,
    };
    let h = tape.matmul(input, adp.w_down)?;
    let h = tape.add_row(h, adp.b_down)?;
    let h = tape.relu(h);
    let up = tape.matmul(h, adp.w_up)?;
    let up = tape.add_row(up, adp.b_up)?;
    tape.add(x, up)
}
