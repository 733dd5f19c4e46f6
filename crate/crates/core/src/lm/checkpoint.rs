//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (model kind, hyperparameters, vocabulary, seed, n-gram counts),
//! then a `u32` tensor count followed by, per tensor, its name, its shape
//! and its values as little-endian `f32`. All integers are little-endian.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::neural::{NeuralConfig, NeuralModel};
use super::ngram::{NgramModel, NgramState};
use super::{ConditionalDistributions, LanguageModel};
use crate::encode::Vocabulary;
use crate::error::{Error, Result};
use crate::trace::Request;

pub const MAGIC: &[u8; 8] = b"SCNOVCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Ngram(NgramModel),
    Neural(NeuralModel<f32>),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    architecture: String,
    seed: u64,
    vocabulary: Vocabulary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    neural: Option<NeuralConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ngram: Option<NgramState>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn take<const K: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf).map_err(|_| bad("truncated file"))?;
    Ok(buf)
}

fn take_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    Ok(u32::from_le_bytes(take::<4>(r)?))
}

fn take_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    Ok(u64::from_le_bytes(take::<8>(r)?))
}

fn take_vec(r: &mut Cursor<&[u8]>, len: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(bad("truncated file"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| bad("truncated file"))?;
    Ok(buf)
}

impl AnyModel {
    pub fn architecture(&self) -> &'static str {
        match self {
            AnyModel::Ngram(_) => "ngram",
            AnyModel::Neural(m) => m.architecture().as_str(),
        }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        match self {
            AnyModel::Ngram(m) => &m.vocab,
            AnyModel::Neural(m) => &m.vocab,
        }
    }

    pub fn to_bytes(&self, seed: u64) -> Result<Vec<u8>> {
        let (header, tensors) = match self {
            AnyModel::Ngram(m) => (
                Header {
                    architecture: "ngram".into(),
                    seed,
                    vocabulary: m.vocab.clone(),
                    neural: None,
                    ngram: Some(m.to_state()),
                },
                Vec::new(),
            ),
            AnyModel::Neural(m) => (
                Header {
                    architecture: m.architecture().as_str().into(),
                    seed,
                    vocabulary: m.vocab.clone(),
                    neural: Some(m.config.clone()),
                    ngram: None,
                },
                m.params(),
            ),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, p) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            for d in p.value.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; returns the model and its recorded seed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(AnyModel, u64)> {
        let mut r = Cursor::new(bytes);
        if &take::<8>(&mut r)? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = take_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let len = take_u64(&mut r)? as usize;
        let header: Header =
            serde_json::from_slice(&take_vec(&mut r, len)?).map_err(|e| bad(format!("header: {e}")))?;
        let count = take_u32(&mut r)? as usize;
        let mut tensors = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = take_u32(&mut r)? as usize;
            let name = String::from_utf8(take_vec(&mut r, name_len)?).map_err(|_| bad("tensor name is not UTF-8"))?;
            if take_u32(&mut r)? != 2 {
                return Err(bad(format!("tensor `{name}` is not 2-dimensional")));
            }
            let rows = take_u64(&mut r)? as usize;
            let cols = take_u64(&mut r)? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| bad("tensor shape overflows"))?;
            let raw = take_vec(&mut r, n.checked_mul(4).ok_or_else(|| bad("tensor shape overflows"))?)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(e.to_string()))?;
            tensors.insert(name, arr);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        let model = match (header.architecture.as_str(), header.neural, header.ngram) {
            ("ngram", None, Some(state)) => {
                AnyModel::Ngram(NgramModel::from_state(state, header.vocabulary.name)?)
            }
            (arch, Some(cfg), None) => {
                if cfg.arch.as_str() != arch {
                    return Err(bad(format!("architecture tag `{arch}` disagrees with hyperparameters")));
                }
                let mut m = NeuralModel::<f32>::new(cfg, header.vocabulary, 0)?;
                m.load_values(tensors)?;
                AnyModel::Neural(m)
            }
            (arch, _, _) => return Err(bad(format!("inconsistent header for architecture `{arch}`"))),
        };
        Ok((model, header.seed))
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        fs::write(path, self.to_bytes(seed)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(AnyModel, u64)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl LanguageModel for AnyModel {
    fn name_vocab_size(&self) -> usize {
        match self {
            AnyModel::Ngram(m) => m.name_vocab_size(),
            AnyModel::Neural(m) => m.name_vocab_size(),
        }
    }

    fn target_indices(&self, request: &Request) -> Vec<u32> {
        match self {
            AnyModel::Ngram(m) => m.target_indices(request),
            AnyModel::Neural(m) => m.target_indices(request),
        }
    }

    fn conditionals(&self, request: &Request) -> Result<ConditionalDistributions> {
        match self {
            AnyModel::Ngram(m) => m.conditionals(request),
            AnyModel::Neural(m) => m.conditionals(request),
        }
    }

    fn target_log_probs(&self, request: &Request) -> Result<Vec<f64>> {
        match self {
            AnyModel::Ngram(m) => m.target_log_probs(request),
            AnyModel::Neural(m) => m.target_log_probs(request),
        }
    }
}
