//! Binary checkpoint format.
//!
//! ```text
//! "CPQA1\n"                    6 bytes of magic
//! header length                u64, little endian
//! header                       UTF-8 JSON, see `Header`
//! tensor data                  f64 little endian, in manifest order
//! SHA-256                      32 bytes, over everything above
//! ```
//!
//! The header carries the model config, the vocabulary, the prompt slots
//! and a manifest of `{name, shape, offset, len}` entries (offsets and
//! lengths in bytes, relative to the start of the data section).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::slots::SlotId;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 6] = b"CPQA1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub vocab: Vec<String>,
    pub prompt_slots: Vec<String>,
    pub tensors: Vec<ManifestEntry>,
    pub data_len: u64,
}

const DIGEST_LEN: usize = 32;

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut data = Vec::with_capacity(params.param_count() * 8);
    let mut tensors = Vec::new();
    for (name, _, t) in params.named_tensors() {
        let offset = data.len() as u64;
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: data.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: params.config.clone(),
        vocab: params.vocab.tokens().to_vec(),
        prompt_slots: params.prompt_slots().iter().map(SlotId::to_string).collect(),
        tensors,
        data_len: data.len() as u64,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + data.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Checks magic and the trailing checksum, then parses the header. Returns
/// the header and the data section.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing CPQA1 magic".into()));
    }
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
        return Err(Error::Corruption("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corruption("checksum mismatch".into()));
    }
    let rest = &body[MAGIC.len()..];
    let len_bytes: [u8; 8] = rest
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Corruption("truncated before header length".into()))?;
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::Corruption("header length overflows".into()))?;
    let rest = &rest[8..];
    if rest.len() < header_len {
        return Err(Error::Corruption("truncated header".into()));
    }
    let (head, data) = rest.split_at(header_len);
    let value: serde_json::Value =
        serde_json::from_slice(head).map_err(|e| Error::Corruption(format!("unreadable header: {e}")))?;
    let version = value.get("format_version").and_then(serde_json::Value::as_u64);
    if version != Some(u64::from(FORMAT_VERSION)) {
        return Err(Error::Format(format!(
            "unsupported format version {version:?}, expected {FORMAT_VERSION}"
        )));
    }
    let header: Header =
        serde_json::from_value(value).map_err(|e| Error::Corruption(format!("bad header: {e}")))?;
    Ok((header, data))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let (header, data) = read_header(bytes)?;
    if data.len() as u64 != header.data_len {
        return Err(Error::Corruption(format!(
            "data section is {} bytes, header says {}",
            data.len(),
            header.data_len
        )));
    }
    let vocab = Vocab::from_list(header.vocab).map_err(|e| Error::Corruption(e.to_string()))?;
    let slots = header
        .prompt_slots
        .iter()
        .map(|s| s.parse::<SlotId>())
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Corruption(e.to_string()))?;
    let mut params = ModelParams::zeros(header.model_config, vocab, &slots)
        .map_err(|e| Error::Corruption(format!("header config: {e}")))?;
    let mut targets = params.named_tensors_mut();
    if targets.len() != header.tensors.len() {
        return Err(Error::Corruption(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            targets.len()
        )));
    }
    let mut expected_offset = 0u64;
    for ((name, _, t), entry) in targets.iter_mut().zip(&header.tensors) {
        if *name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(Error::Corruption(format!(
                "manifest entry `{}` {:?} does not match `{name}` {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        if entry.offset != expected_offset || entry.len != 8 * t.numel() as u64 {
            return Err(Error::Corruption(format!("bad extent for `{name}`")));
        }
        let start = entry.offset as usize;
        let chunk = &data[start..start + entry.len as usize];
        for (dst, src) in t.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().expect("8-byte chunk"));
        }
        expected_offset += entry.len;
    }
    if expected_offset != header.data_len {
        return Err(Error::Corruption("data section has trailing bytes".into()));
    }
    drop(targets);
    Ok(params)
}

/// Writes through a temporary file so a crash never leaves a partial
/// checkpoint at `path`.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, to_bytes(params))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint that must fit `expected`. Shape disagreements are
/// reported as shape errors on the first offending tensor.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    check_compatible(&params, expected)?;
    Ok(params)
}

pub fn check_compatible(params: &ModelParams, expected: &ModelConfig) -> Result<()> {
    let mut want = expected.clone();
    want.encoder.vocab_size = params.vocab.len();
    if want == params.config {
        return Ok(());
    }
    let template = ModelParams::zeros(want.clone(), params.vocab.clone(), &params.prompt_slots())?;
    let ours = params.named_tensors();
    for (name, _, t) in template.named_tensors() {
        match ours.iter().find(|(n, _, _)| *n == name) {
            Some((_, _, have)) if have.shape() == t.shape() => {}
            Some((_, _, have)) => {
                return Err(Error::Shape {
                    op: "load_checkpoint",
                    lhs: have.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                })
            }
            None => return Err(Error::Config(format!("checkpoint has no tensor `{name}`"))),
        }
    }
    if ours.len() != template.named_tensors().len() {
        return Err(Error::Config("checkpoint has tensors the config does not use".into()));
    }
    Err(Error::Config(format!(
        "checkpoint config {:?} differs from requested {:?}",
        params.config, want
    )))
}
