//! Binary checkpoint format.
//!
//! ```text
//! "MTLG2P01"                    8-byte magic
//! u64 little-endian             manifest length in bytes
//! UTF-8 JSON manifest           config, vocabularies, tensor names/shapes, precision
//! tensor payloads               little-endian IEEE-754, manifest order, no padding
//! ```

use crate::lexicon::Vocabulary;
use crate::model::{param_layout, Model, ModelConfig, ModelParams};
use crate::numcore::{Real, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MTLG2P01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("tensor {tensor:?}: stored shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint precision {found} cannot be loaded as {expected}")]
    PrecisionMismatch { found: String, expected: &'static str },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub precision: String,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let layout = param_layout(&model.config);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: T::TAG.to_string(),
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        tensors: layout
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + model.params.param_count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.tensors() {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], CheckpointError> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(CheckpointError::Truncated {
        needed: at.saturating_add(n),
        available: bytes.len(),
    })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize), CheckpointError> {
    let mut at = 0;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    at += MAGIC.len();
    let len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| CheckpointError::Manifest("manifest length overflows".into()))?;
    let json = take(bytes, &mut at, len)?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(manifest.format_version));
    }
    Ok((manifest, at))
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let (manifest, mut at) = read_manifest(bytes)?;
    if manifest.precision != T::TAG {
        return Err(CheckpointError::PrecisionMismatch {
            found: manifest.precision,
            expected: T::TAG,
        }
        .into());
    }
    let config = manifest.config;
    config.validate()?;
    if config.grapheme_vocab != manifest.vocab.graphemes.len() || config.phoneme_vocab != manifest.vocab.phonemes.len() {
        return Err(CheckpointError::Manifest("vocabulary sizes disagree with the config".into()).into());
    }
    let layout = param_layout(&config);
    if layout.len() != manifest.tensors.len() {
        return Err(CheckpointError::Manifest(format!(
            "expected {} tensors, manifest lists {}",
            layout.len(),
            manifest.tensors.len()
        ))
        .into());
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), entry) in layout.into_iter().zip(&manifest.tensors) {
        if entry.name != name {
            return Err(CheckpointError::Manifest(format!("expected tensor {name:?}, found {:?}", entry.name)).into());
        }
        if entry.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                tensor: name,
                expected: shape,
                found: entry.shape.clone(),
            }
            .into());
        }
        let n: usize = shape.iter().product();
        let raw = take(bytes, &mut at, n * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if at != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - at).into());
    }
    let params = ModelParams::from_tensors(&config, tensors)?;
    Ok(Model {
        config,
        vocab: manifest.vocab,
        params,
    })
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Reads only the manifest of a checkpoint file.
pub fn read_checkpoint_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_manifest(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{build_vocabs, LexiconEntry};

    fn model() -> Model<f32> {
        let vocab = build_vocabs(&[LexiconEntry::new("Fan", &["f", "E:", "n"], None)]).unwrap();
        let cfg = ModelConfig {
            embed_dim: 4,
            hidden_dim: 3,
            classifier_hidden1: 5,
            classifier_hidden2: 2,
            alpha: Some(0.7),
            ..ModelConfig::for_vocab(&vocab)
        };
        Model::new(cfg, vocab, 42).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let a = to_bytes(&m).unwrap();
        let back: Model<f32> = from_bytes(&a).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), a);
        assert_eq!(&a[..8], MAGIC);
    }

    #[test]
    fn distinct_load_errors() {
        let m = model();
        let good = to_bytes(&m).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bad), Err(Error::Checkpoint(CheckpointError::BadMagic))));

        assert!(matches!(
            from_bytes::<f32>(&good[..good.len() - 3]),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));

        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(
            from_bytes::<f32>(&extra),
            Err(Error::Checkpoint(CheckpointError::TrailingBytes(1)))
        ));

        assert!(matches!(
            from_bytes::<f64>(&good),
            Err(Error::Checkpoint(CheckpointError::PrecisionMismatch { .. }))
        ));

        let rewrite = |f: &dyn Fn(&mut serde_json::Value)| {
            let len = u64::from_le_bytes(good[8..16].try_into().unwrap()) as usize;
            let mut v: serde_json::Value = serde_json::from_slice(&good[16..16 + len]).unwrap();
            f(&mut v);
            let js = serde_json::to_vec(&v).unwrap();
            let mut out = MAGIC.to_vec();
            out.extend_from_slice(&(js.len() as u64).to_le_bytes());
            out.extend_from_slice(&js);
            out.extend_from_slice(&good[16 + len..]);
            out
        };
        let shape = rewrite(&|v| v["tensors"][3]["shape"] = serde_json::json!([7, 12]));
        match from_bytes::<f32>(&shape) {
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { tensor, .. })) => {
                assert_eq!(tensor, "encoder.0.w_recurrent")
            }
            other => panic!("{other:?}"),
        }
        let version = rewrite(&|v| v["format_version"] = serde_json::json!(9));
        assert!(matches!(
            from_bytes::<f32>(&version),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion(9)))
        ));
    }
}
