//! The `KSOD1` container.
//!
//! ```text
//! "KSOD" | 0x01 | u32 LE metadata length | UTF-8 JSON metadata | f64 LE payload
//! ```
//!
//! Knowledge modules store `A` then `B`, row-major. The same framing carries
//! knowledge vectors (per component: `A` then `B`), backbones and heads
//! (tensors in their canonical parameter order); the metadata `kind` field
//! tells them apart and defaults to a knowledge module.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{KnowledgeModule, KnowledgeVector, VectorComponent};
use crate::backbone::{AdapterTarget, Backbone, ClassifierHead, ModelConfig};
use crate::error::{KsodError, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"KSOD";
pub const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 4 + 1 + 4;
pub const TOOL_VERSION: &str = concat!("ksod ", env!("CARGO_PKG_VERSION"));

const KIND_MODULE: &str = "knowledge_module";
const KIND_VECTOR: &str = "knowledge_vector";
const KIND_BACKBONE: &str = "backbone";
const KIND_HEAD: &str = "classifier_head";

/// A decoded but untyped container.
#[derive(Debug, Clone, PartialEq)]
pub struct RawContainer {
    pub metadata: serde_json::Value,
    pub payload: Vec<f64>,
}

pub fn encode_raw(metadata: &serde_json::Value, payload: &[f64]) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(metadata)?;
    let meta_len = u32::try_from(meta.len())
        .map_err(|_| KsodError::Format("metadata exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Checks framing only; never panics on arbitrary bytes.
pub fn decode_raw(bytes: &[u8]) -> Result<RawContainer> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(KsodError::Format("missing KSOD magic".into()));
    }
    if bytes.len() < 5 {
        return Err(KsodError::Corruption("truncated header".into()));
    }
    if bytes[4] != VERSION {
        return Err(KsodError::Format(format!("unsupported version {:#04x}", bytes[4])));
    }
    if bytes.len() < HEADER_LEN {
        return Err(KsodError::Corruption("truncated header".into()));
    }
    let meta_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let rest = &bytes[HEADER_LEN..];
    if rest.len() < meta_len {
        return Err(KsodError::Corruption(format!(
            "metadata length {meta_len} exceeds the {} remaining bytes",
            rest.len()
        )));
    }
    let metadata: serde_json::Value = serde_json::from_slice(&rest[..meta_len])
        .map_err(|e| KsodError::Corruption(format!("metadata is not valid JSON: {e}")))?;
    let payload = &rest[meta_len..];
    if !payload.len().is_multiple_of(8) {
        return Err(KsodError::Corruption(format!(
            "payload of {} bytes is not a whole number of f64 values",
            payload.len()
        )));
    }
    let payload = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(RawContainer { metadata, payload })
}

fn kind_of(meta: &serde_json::Value) -> &str {
    meta.get("kind").and_then(|k| k.as_str()).unwrap_or(KIND_MODULE)
}

fn expect_kind(raw: &RawContainer, kind: &str) -> Result<()> {
    let found = kind_of(&raw.metadata);
    if found != kind {
        return Err(KsodError::Format(format!("expected a {kind} container, found {found}")));
    }
    Ok(())
}

fn typed_meta<T: for<'de> Deserialize<'de>>(raw: &RawContainer) -> Result<T> {
    serde_json::from_value(raw.metadata.clone())
        .map_err(|e| KsodError::Corruption(format!("metadata fields: {e}")))
}

fn sized(a: usize, b: usize) -> Result<usize> {
    a.checked_mul(b)
        .ok_or_else(|| KsodError::Corruption("tensor dimensions overflow".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleSeeds {
    pub init: u64,
    pub train: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleMetadata {
    #[serde(default = "module_kind")]
    pub kind: String,
    pub knowledge_name: String,
    pub rank: usize,
    pub m: usize,
    pub n: usize,
    pub eta: f64,
    pub target: AdapterTarget,
    pub dataset_fingerprint: String,
    pub sc_score: Option<f64>,
    pub verified: bool,
    pub epsilon_at_verification: Option<f64>,
    pub seeds: ModuleSeeds,
    pub tool_version: String,
}

fn module_kind() -> String {
    KIND_MODULE.into()
}

pub fn encode_module(module: &KnowledgeModule) -> Result<Vec<u8>> {
    if !module.eta.is_finite() {
        return Err(KsodError::Input("cannot store a module with non-finite eta".into()));
    }
    let meta = ModuleMetadata {
        kind: KIND_MODULE.into(),
        knowledge_name: module.knowledge_name.clone(),
        rank: module.rank,
        m: module.m(),
        n: module.n(),
        eta: module.eta,
        target: module.target,
        dataset_fingerprint: module.dataset_fingerprint.clone(),
        sc_score: module.sc_score,
        verified: module.verified,
        epsilon_at_verification: module.epsilon_at_verification,
        seeds: ModuleSeeds {
            init: module.seed,
            train: module.train_seed,
        },
        tool_version: TOOL_VERSION.into(),
    };
    let mut payload = module.a.as_slice().to_vec();
    payload.extend_from_slice(module.b.as_slice());
    encode_raw(&serde_json::to_value(meta)?, &payload)
}

pub fn decode_module(bytes: &[u8]) -> Result<KnowledgeModule> {
    let raw = decode_raw(bytes)?;
    expect_kind(&raw, KIND_MODULE)?;
    let meta: ModuleMetadata = typed_meta(&raw)?;
    if meta.rank == 0 || meta.m == 0 || meta.n == 0 {
        return Err(KsodError::Corruption("zero tensor dimension".into()));
    }
    let a_len = sized(meta.rank, meta.n)?;
    let b_len = sized(meta.m, meta.rank)?;
    let expected = a_len
        .checked_add(b_len)
        .ok_or_else(|| KsodError::Corruption("tensor dimensions overflow".into()))?;
    if raw.payload.len() != expected {
        return Err(KsodError::Corruption(format!(
            "rank {} with m={} n={} needs {} bytes of payload, found {}",
            meta.rank,
            meta.m,
            meta.n,
            8 * expected,
            8 * raw.payload.len()
        )));
    }
    if meta.verified
        && !matches!((meta.sc_score, meta.epsilon_at_verification), (Some(s), Some(e)) if s >= e)
    {
        return Err(KsodError::Corruption(
            "module is marked verified without a passing score".into(),
        ));
    }
    let a = Matrix::from_vec(meta.rank, meta.n, raw.payload[..a_len].to_vec());
    let b = Matrix::from_vec(meta.m, meta.rank, raw.payload[a_len..].to_vec());
    Ok(KnowledgeModule {
        a,
        b,
        eta: meta.eta,
        rank: meta.rank,
        target: meta.target,
        knowledge_name: meta.knowledge_name,
        dataset_fingerprint: meta.dataset_fingerprint,
        sc_score: meta.sc_score,
        verified: meta.verified,
        epsilon_at_verification: meta.epsilon_at_verification,
        seed: meta.seeds.init,
        train_seed: meta.seeds.train,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VectorMetadata {
    kind: String,
    target: AdapterTarget,
    m: usize,
    n: usize,
    etas: Vec<f64>,
    ranks: Vec<usize>,
    provenance: Vec<String>,
    tool_version: String,
}

pub fn encode_vector(vector: &KnowledgeVector) -> Result<Vec<u8>> {
    let (m, n) = vector.shape();
    let meta = VectorMetadata {
        kind: KIND_VECTOR.into(),
        target: vector.target,
        m,
        n,
        etas: vector.components.iter().map(|c| c.eta).collect(),
        ranks: vector.components.iter().map(|c| c.a.rows()).collect(),
        provenance: vector.provenance.clone(),
        tool_version: TOOL_VERSION.into(),
    };
    let mut payload = Vec::new();
    for c in &vector.components {
        payload.extend_from_slice(c.a.as_slice());
        payload.extend_from_slice(c.b.as_slice());
    }
    encode_raw(&serde_json::to_value(meta)?, &payload)
}

pub fn decode_vector(bytes: &[u8]) -> Result<KnowledgeVector> {
    let raw = decode_raw(bytes)?;
    expect_kind(&raw, KIND_VECTOR)?;
    let meta: VectorMetadata = typed_meta(&raw)?;
    if meta.etas.len() != meta.ranks.len() || meta.ranks.is_empty() {
        return Err(KsodError::Corruption("component lists disagree".into()));
    }
    // nonzero dims keep the declared shape bounded by the payload
    if meta.m == 0 || meta.n == 0 || meta.ranks.contains(&0) {
        return Err(KsodError::Corruption("zero tensor dimension".into()));
    }
    let mut offset = 0usize;
    let mut components = Vec::with_capacity(meta.ranks.len());
    for (&eta, &r) in meta.etas.iter().zip(&meta.ranks) {
        let a_len = sized(r, meta.n)?;
        let b_len = sized(meta.m, r)?;
        let end = offset
            .checked_add(a_len)
            .and_then(|x| x.checked_add(b_len))
            .filter(|&e| e <= raw.payload.len())
            .ok_or_else(|| KsodError::Corruption("payload shorter than its components".into()))?;
        let a = Matrix::from_vec(r, meta.n, raw.payload[offset..offset + a_len].to_vec());
        let b = Matrix::from_vec(meta.m, r, raw.payload[offset + a_len..end].to_vec());
        components.push(VectorComponent { eta, b, a });
        offset = end;
    }
    if offset != raw.payload.len() {
        return Err(KsodError::Corruption("trailing payload".into()));
    }
    Ok(KnowledgeVector {
        target: meta.target,
        components,
        provenance: meta.provenance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BackboneMetadata {
    kind: String,
    config: ModelConfig,
    frozen: bool,
    tensors: Vec<TensorEntry>,
    tool_version: String,
}

pub fn encode_backbone(model: &Backbone) -> Result<Vec<u8>> {
    let params = model.named_params();
    let meta = BackboneMetadata {
        kind: KIND_BACKBONE.into(),
        config: model.config.clone(),
        frozen: model.frozen,
        tensors: params
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.clone(),
                len: v.len(),
            })
            .collect(),
        tool_version: TOOL_VERSION.into(),
    };
    let payload: Vec<f64> = params.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    encode_raw(&serde_json::to_value(meta)?, &payload)
}

pub fn decode_backbone(bytes: &[u8]) -> Result<Backbone> {
    let raw = decode_raw(bytes)?;
    expect_kind(&raw, KIND_BACKBONE)?;
    let meta: BackboneMetadata = typed_meta(&raw)?;
    meta.config
        .validate()
        .map_err(|e| KsodError::Corruption(e.to_string()))?;
    if meta.config.param_count() != Some(raw.payload.len()) {
        return Err(KsodError::Corruption(format!(
            "config needs {:?} parameters, payload holds {}",
            meta.config.param_count(),
            raw.payload.len()
        )));
    }
    let mut model = Backbone::init(ModelConfig { seed: 0, ..meta.config.clone() })
        .map_err(|e| KsodError::Corruption(e.to_string()))?;
    model.config.seed = meta.config.seed;
    model.frozen = meta.frozen;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let slots = model.params_mut();
    if meta.tensors.len() != slots.len() {
        return Err(KsodError::Corruption("tensor table does not match the config".into()));
    }
    let mut offset = 0usize;
    for ((slot, entry), name) in slots.into_iter().zip(&meta.tensors).zip(&names) {
        if entry.len != slot.len() || &entry.name != name {
            return Err(KsodError::Corruption(format!(
                "tensor `{}` of length {} does not match `{name}` of length {}",
                entry.name,
                entry.len,
                slot.len()
            )));
        }
        let end = offset + entry.len;
        if end > raw.payload.len() {
            return Err(KsodError::Corruption("payload is truncated".into()));
        }
        slot.copy_from_slice(&raw.payload[offset..end]);
        offset = end;
    }
    if offset != raw.payload.len() {
        return Err(KsodError::Corruption("trailing payload".into()));
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadMetadata {
    kind: String,
    num_classes: usize,
    model_dim: usize,
    class_names: Vec<String>,
    tool_version: String,
}

pub fn encode_head(head: &ClassifierHead, class_names: &[String]) -> Result<Vec<u8>> {
    let meta = HeadMetadata {
        kind: KIND_HEAD.into(),
        num_classes: head.num_classes(),
        model_dim: head.weight.cols(),
        class_names: class_names.to_vec(),
        tool_version: TOOL_VERSION.into(),
    };
    let mut payload = head.weight.as_slice().to_vec();
    payload.extend_from_slice(&head.bias);
    encode_raw(&serde_json::to_value(meta)?, &payload)
}

pub fn decode_head(bytes: &[u8]) -> Result<(ClassifierHead, Vec<String>)> {
    let raw = decode_raw(bytes)?;
    expect_kind(&raw, KIND_HEAD)?;
    let meta: HeadMetadata = typed_meta(&raw)?;
    let w_len = sized(meta.num_classes, meta.model_dim)?;
    if Some(raw.payload.len()) != w_len.checked_add(meta.num_classes) {
        return Err(KsodError::Corruption("head payload length mismatch".into()));
    }
    let head = ClassifierHead {
        weight: Matrix::from_vec(meta.num_classes, meta.model_dim, raw.payload[..w_len].to_vec()),
        bias: raw.payload[w_len..].to_vec(),
    };
    Ok((head, meta.class_names))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| KsodError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| KsodError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| KsodError::io(path, e))
}

pub fn save_module(module: &KnowledgeModule, path: &Path) -> Result<()> {
    write(path, &encode_module(module)?)
}

pub fn load_module(path: &Path) -> Result<KnowledgeModule> {
    decode_module(&read(path)?)
}

pub fn save_vector(vector: &KnowledgeVector, path: &Path) -> Result<()> {
    write(path, &encode_vector(vector)?)
}

pub fn load_vector(path: &Path) -> Result<KnowledgeVector> {
    decode_vector(&read(path)?)
}

pub fn save_backbone(model: &Backbone, path: &Path) -> Result<()> {
    write(path, &encode_backbone(model)?)
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    decode_backbone(&read(path)?)
}

pub fn save_head(head: &ClassifierHead, class_names: &[String], path: &Path) -> Result<()> {
    write(path, &encode_head(head, class_names)?)
}

pub fn load_head(path: &Path) -> Result<(ClassifierHead, Vec<String>)> {
    decode_head(&read(path)?)
}
