//! Single-file checkpoint format.
//!
//! Layout: an 8-byte little-endian header length, that many bytes of JSON
//! header, then the tensor payload — little-endian IEEE-754 scalars,
//! row-major, at the offsets recorded in the header's tensor index. The
//! header is human-readable (`head -c` away), the payload is bit-exact,
//! and a write -> read -> write cycle reproduces the file byte for byte.
//!
//! Two kinds exist: `full_model` holds every base parameter (plus any
//! adapter/prefix attachment tensors), while `lora_delta` holds only the
//! low-rank factor pairs and their metadata — never a base weight. The
//! delta kind is what makes task switching a small-file operation.

use std::fs;
use std::path::Path;

use lorakit_core::adapters::{AdaptState, AdaptationStrategy, AttnWeight, LoraModule};
use lorakit_core::matrix::Matrix;
use lorakit_core::model::{ModelConfig, TransformerModel};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    FullModel,
    LoraDelta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn bytes(&self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: Dtype,
    pub byte_offset: u64,
}

/// Per-module metadata stored alongside low-rank factor tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraModuleMeta {
    pub layer: usize,
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub model_config: ModelConfig,
    pub strategy: Option<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lora: Vec<LoraModuleMeta>,
    pub tensor_index: Vec<TensorEntry>,
}

/// A parsed checkpoint: header plus named tensors (widened to f64).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

fn encode_payload(tensors: &[(String, &Matrix)], dtype: Dtype) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut index = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, m) in tensors {
        index.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            dtype,
            byte_offset: payload.len() as u64,
        });
        match dtype {
            Dtype::F64 => {
                for v in m.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F32 => {
                for v in m.data() {
                    payload.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
    }
    (index, payload)
}

/// Serializes and writes a checkpoint file.
pub fn write_checkpoint(
    path: &Path,
    mut header: CheckpointHeader,
    tensors: &[(String, &Matrix)],
    dtype: Dtype,
) -> Result<()> {
    if header.kind == CheckpointKind::LoraDelta {
        if let Some((name, _)) = tensors.iter().find(|(n, _)| !n.starts_with("lora.")) {
            return Err(CliError::Format(format!(
                "delta checkpoints carry only low-rank factors, found tensor '{name}'"
            )));
        }
    }
    let (index, payload) = encode_payload(tensors, dtype);
    header.tensor_index = index;
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads and validates a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(CliError::Format(format!("{}: too short for a header", path.display())));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let payload_start = header_len.checked_add(8).filter(|&end| end <= bytes.len()).ok_or_else(
        || {
            CliError::Format(format!(
                "{}: header length {header_len} exceeds file size",
                path.display()
            ))
        },
    )?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..payload_start])?;
    if header.format_version != FORMAT_VERSION {
        return Err(CliError::Format(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &bytes[payload_start..];

    // Validate extents: inside the file and non-overlapping.
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensor_index.len());
    for e in &header.tensor_index {
        let len = (e.rows * e.cols * e.dtype.bytes()) as u64;
        let end = e.byte_offset + len;
        if end > payload.len() as u64 {
            return Err(CliError::Format(format!(
                "tensor '{}' extends past the end of the file",
                e.name
            )));
        }
        spans.push((e.byte_offset, end, &e.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(CliError::Format(format!(
                "tensors '{}' and '{}' overlap",
                w[0].2, w[1].2
            )));
        }
    }
    if header.kind == CheckpointKind::LoraDelta {
        if let Some(e) = header.tensor_index.iter().find(|e| !e.name.starts_with("lora.")) {
            return Err(CliError::Format(format!(
                "delta checkpoint contains non-factor tensor '{}'",
                e.name
            )));
        }
    }

    let mut tensors = Vec::with_capacity(header.tensor_index.len());
    for e in &header.tensor_index {
        let start = e.byte_offset as usize;
        let mut data = Vec::with_capacity(e.rows * e.cols);
        match e.dtype {
            Dtype::F64 => {
                for chunk in payload[start..start + e.rows * e.cols * 8].chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
                }
            }
            Dtype::F32 => {
                for chunk in payload[start..start + e.rows * e.cols * 4].chunks_exact(4) {
                    data.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
                }
            }
        }
        let m = Matrix::from_vec(e.rows, e.cols, data)
            .map_err(|err| CliError::Format(format!("tensor '{}': {err}", e.name)))?;
        tensors.push((e.name.clone(), m));
    }
    Ok(Checkpoint { header, tensors })
}

fn lora_meta(modules: &[LoraModule]) -> Vec<LoraModuleMeta> {
    modules
        .iter()
        .map(|m| LoraModuleMeta {
            layer: m.layer,
            target: m.target.name().to_string(),
            rank: m.rank,
            alpha: m.alpha,
        })
        .collect()
}

fn attachment_tensors(state: &AdaptState) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    for (i, m) in state.lora.iter().enumerate() {
        out.push((format!("lora.{i}.a"), m.a.clone()));
        out.push((format!("lora.{i}.b"), m.b.clone()));
    }
    for (i, a) in state.adapters.iter().enumerate() {
        out.push((format!("adapter.{i}.w_down"), a.w_down.clone()));
        out.push((format!("adapter.{i}.b_down"), a.b_down.clone()));
        out.push((format!("adapter.{i}.w_up"), a.w_up.clone()));
        out.push((format!("adapter.{i}.b_up"), a.b_up.clone()));
        if let Some((g, b)) = &a.layer_norm {
            out.push((format!("adapter.{i}.ln_gamma"), g.clone()));
            out.push((format!("adapter.{i}.ln_beta"), b.clone()));
        }
    }
    if let Some(p) = &state.prefix {
        if let Some(e) = &p.embed {
            out.push(("prefix.embed".to_string(), e.clone()));
        }
        if let Some(layers) = &p.per_layer {
            for (l, m) in layers.iter().enumerate() {
                out.push((format!("prefix.layer.{l}"), m.clone()));
            }
        }
    }
    out
}

/// Writes a full-model checkpoint; attachment tensors (if a state is
/// given) ride along so adapter/prefix runs can be reloaded for eval.
pub fn save_full_model(
    path: &Path,
    model: &TransformerModel,
    state: Option<&AdaptState>,
    seed: u64,
    dtype: Dtype,
) -> Result<()> {
    let mut owned: Vec<(String, Matrix)> = Vec::new();
    model.visit_params(&mut |name: &str, m: &Matrix| owned.push((name.to_string(), m.clone())));
    if let Some(st) = state {
        owned.extend(attachment_tensors(st));
    }
    let tensors: Vec<(String, &Matrix)> =
        owned.iter().map(|(n, m)| (n.clone(), m)).collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::FullModel,
        model_config: model.config,
        strategy: state.map(|s| s.strategy.spec_string()),
        seed,
        lora: state.map(|s| lora_meta(&s.lora)).unwrap_or_default(),
        tensor_index: Vec::new(),
    };
    write_checkpoint(path, header, &tensors, dtype)
}

/// Loads a full-model checkpoint, rebuilding any attachment state.
pub fn load_full_model(
    path: &Path,
) -> Result<(TransformerModel, Option<AdaptState>, CheckpointHeader)> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.header.kind != CheckpointKind::FullModel {
        return Err(CliError::Format(format!(
            "{} is not a full_model checkpoint",
            path.display()
        )));
    }
    let config = ckpt.header.model_config;
    let mut model = TransformerModel::init(config, ckpt.header.seed)?;
    let mut base_names = Vec::new();
    model.visit_params(&mut |name: &str, _: &Matrix| base_names.push(name.to_string()));
    for name in &base_names {
        let t = ckpt.tensor(name).ok_or_else(|| {
            CliError::Format(format!("missing base tensor '{name}'"))
        })?;
        let slot = model.param_mut(name).expect("visited name resolves");
        if slot.shape() != t.shape() {
            return Err(CliError::Format(format!("tensor '{name}' has the wrong shape")));
        }
        *slot = t.clone();
    }

    let state = match &ckpt.header.strategy {
        None => None,
        Some(spec) => {
            let strategy = AdaptationStrategy::parse(spec)?;
            let mut st = AdaptState::attach(&config, strategy, ckpt.header.seed)?;
            restore_attachments(&mut st, &ckpt)?;
            Some(st)
        }
    };
    Ok((model, state, ckpt.header))
}

fn restore_attachments(state: &mut AdaptState, ckpt: &Checkpoint) -> Result<()> {
    let fetch = |name: String, slot: &mut Matrix| -> Result<()> {
        let t = ckpt
            .tensor(&name)
            .ok_or_else(|| CliError::Format(format!("missing attachment tensor '{name}'")))?;
        if t.shape() != slot.shape() {
            return Err(CliError::Format(format!("tensor '{name}' has the wrong shape")));
        }
        *slot = t.clone();
        Ok(())
    };
    for i in 0..state.lora.len() {
        fetch(format!("lora.{i}.a"), &mut state.lora[i].a)?;
        fetch(format!("lora.{i}.b"), &mut state.lora[i].b)?;
        state.lora[i].merged = false;
    }
    for i in 0..state.adapters.len() {
        fetch(format!("adapter.{i}.w_down"), &mut state.adapters[i].w_down)?;
        fetch(format!("adapter.{i}.b_down"), &mut state.adapters[i].b_down)?;
        fetch(format!("adapter.{i}.w_up"), &mut state.adapters[i].w_up)?;
        fetch(format!("adapter.{i}.b_up"), &mut state.adapters[i].b_up)?;
        if state.adapters[i].layer_norm.is_some() {
            let (mut g, mut b) = state.adapters[i].layer_norm.clone().expect("present");
            fetch(format!("adapter.{i}.ln_gamma"), &mut g)?;
            fetch(format!("adapter.{i}.ln_beta"), &mut b)?;
            state.adapters[i].layer_norm = Some((g, b));
        }
    }
    if let Some(p) = state.prefix.as_mut() {
        if let Some(e) = p.embed.as_mut() {
            fetch("prefix.embed".to_string(), e)?;
        }
        if let Some(layers) = p.per_layer.as_mut() {
            for (l, m) in layers.iter_mut().enumerate() {
                fetch(format!("prefix.layer.{l}"), m)?;
            }
        }
    }
    Ok(())
}

/// Writes a delta checkpoint holding only the low-rank factors.
pub fn save_lora_delta(
    path: &Path,
    config: &ModelConfig,
    modules: &[LoraModule],
    strategy: &AdaptationStrategy,
    seed: u64,
    dtype: Dtype,
) -> Result<()> {
    if modules.iter().any(|m| m.merged) {
        return Err(CliError::Format(
            "refusing to write a delta while modules are merged".to_string(),
        ));
    }
    let mut owned: Vec<(String, Matrix)> = Vec::new();
    for (i, m) in modules.iter().enumerate() {
        owned.push((format!("lora.{i}.a"), m.a.clone()));
        owned.push((format!("lora.{i}.b"), m.b.clone()));
    }
    let tensors: Vec<(String, &Matrix)> =
        owned.iter().map(|(n, m)| (n.clone(), m)).collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::LoraDelta,
        model_config: *config,
        strategy: Some(strategy.spec_string()),
        seed,
        lora: lora_meta(modules),
        tensor_index: Vec::new(),
    };
    write_checkpoint(path, header, &tensors, dtype)
}

/// Loads a delta checkpoint back into unmerged modules.
pub fn load_lora_delta(path: &Path) -> Result<(Vec<LoraModule>, CheckpointHeader)> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.header.kind != CheckpointKind::LoraDelta {
        return Err(CliError::Format(format!(
            "{} is not a lora_delta checkpoint",
            path.display()
        )));
    }
    let mut modules = Vec::with_capacity(ckpt.header.lora.len());
    for (i, meta) in ckpt.header.lora.iter().enumerate() {
        let a = ckpt
            .tensor(&format!("lora.{i}.a"))
            .ok_or_else(|| CliError::Format(format!("missing tensor lora.{i}.a")))?;
        let b = ckpt
            .tensor(&format!("lora.{i}.b"))
            .ok_or_else(|| CliError::Format(format!("missing tensor lora.{i}.b")))?;
        modules.push(LoraModule {
            layer: meta.layer,
            target: AttnWeight::parse(&meta.target)?,
            a: a.clone(),
            b: b.clone(),
            rank: meta.rank,
            alpha: meta.alpha,
            merged: false,
        });
    }
    Ok((modules, ckpt.header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lorakit_core::adapters::LoraSpec;
    use tempfile::tempdir;

    #[test]
    fn full_model_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let cfg = ModelConfig::new(1, 16, 2, 12, 16);
        let model = TransformerModel::init(cfg, 3).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_full_model(&p1, &model, None, 3, Dtype::F64).unwrap();
        let (loaded, state, header) = load_full_model(&p1).unwrap();
        assert!(state.is_none());
        assert_eq!(header.seed, 3);
        save_full_model(&p2, &loaded, None, header.seed, Dtype::F64).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn delta_round_trip_and_purity() {
        let dir = tempdir().unwrap();
        let cfg = ModelConfig::toy();
        let strategy = AdaptationStrategy::Lora(LoraSpec::new(4, &[AttnWeight::Q, AttnWeight::V]));
        let state = AdaptState::attach(&cfg, strategy.clone(), 5).unwrap();
        let p = dir.path().join("delta.ckpt");
        save_lora_delta(&p, &cfg, &state.lora, &strategy, 5, Dtype::F64).unwrap();
        let (modules, header) = load_lora_delta(&p).unwrap();
        assert_eq!(modules.len(), 4);
        for (a, b) in modules.iter().zip(&state.lora) {
            assert_eq!(a.a, b.a);
            assert_eq!(a.b, b.b);
            assert_eq!(a.alpha, b.alpha);
        }
        // Name audit: only factor tensors.
        assert!(header.tensor_index.iter().all(|e| e.name.starts_with("lora.")));
        // Payload size: factors only, 8 bytes per scalar.
        let scalars: usize = state.lora.iter().map(|m| m.a.len() + m.b.len()).sum();
        let file = fs::read(&p).unwrap();
        let header_len = u64::from_le_bytes(file[..8].try_into().unwrap()) as usize;
        assert_eq!(file.len() - 8 - header_len, scalars * 8);
    }

    #[test]
    fn attachments_survive_full_model_round_trip() {
        let dir = tempdir().unwrap();
        let cfg = ModelConfig::new(1, 16, 2, 12, 16);
        let model = TransformerModel::init(cfg, 3).unwrap();
        let strategy = AdaptationStrategy::AdapterL { r_b: 4 };
        let mut state = AdaptState::attach(&cfg, strategy, 9).unwrap();
        state.adapters[0].w_up = Matrix::filled(4, 16, 0.25);
        let p = dir.path().join("adapted.ckpt");
        save_full_model(&p, &model, Some(&state), 9, Dtype::F64).unwrap();
        let (_, restored, _) = load_full_model(&p).unwrap();
        let restored = restored.expect("strategy recorded");
        assert_eq!(restored.adapters[0].w_up, state.adapters[0].w_up);
        assert!(restored.adapters[0].layer_norm.is_some());
    }

    #[test]
    fn f32_storage_halves_payload() {
        let dir = tempdir().unwrap();
        let cfg = ModelConfig::new(1, 16, 2, 12, 16);
        let model = TransformerModel::init(cfg, 3).unwrap();
        let p64 = dir.path().join("a64.ckpt");
        let p32 = dir.path().join("a32.ckpt");
        save_full_model(&p64, &model, None, 3, Dtype::F64).unwrap();
        save_full_model(&p32, &model, None, 3, Dtype::F32).unwrap();
        let read_payload_len = |p: &Path| {
            let b = fs::read(p).unwrap();
            let hl = u64::from_le_bytes(b[..8].try_into().unwrap()) as usize;
            b.len() - 8 - hl
        };
        assert_eq!(read_payload_len(&p64), 2 * read_payload_len(&p32));
        // f32 read widens without error and stays close.
        let (m32, _, _) = load_full_model(&p32).unwrap();
        assert!(m32.embed.max_abs_diff(&model.embed) < 1e-6);
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        fs::write(&p, [1, 2, 3]).unwrap();
        assert!(read_checkpoint(&p).is_err());
        // Header length pointing past the end.
        let mut bytes = vec![0u8; 8];
        bytes[..8].copy_from_slice(&u64::MAX.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(read_checkpoint(&p).is_err());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let cfg = ModelConfig::new(1, 16, 2, 12, 16);
        let model = TransformerModel::init(cfg, 3).unwrap();
        let p = dir.path().join("v.ckpt");
        save_full_model(&p, &model, None, 3, Dtype::F64).unwrap();
        // Bump the version digit inside the header region in place.
        let bytes = fs::read(&p).unwrap();
        let hl = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[8..8 + hl].to_vec()).unwrap();
        let patched = header.replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert_eq!(patched.len(), header.len());
        let mut out = bytes.clone();
        out[8..8 + hl].copy_from_slice(patched.as_bytes());
        fs::write(&p, out).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(CliError::Format(_))));
    }
}
