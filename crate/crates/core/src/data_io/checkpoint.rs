//! Named-tensor checkpoint files.
//!
//! Layout (little-endian): magic `DFCK`, `u32` format version, then three
//! length-prefixed (`u32`) UTF-8 strings: architecture descriptor and JSON
//! metadata; then `u32` tensor count and per tensor a length-prefixed name,
//! `u32` rank, `u32` dims and the `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Classifier, ClassifierSpec, Generator, GeneratorSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    /// Free-form payload (training-state bookkeeping, reports).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: String,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Tensors whose names start with `prefix.`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    }
}

pub fn prefixed(prefix: &str, tensors: Vec<(String, Tensor<f32>)>) -> impl Iterator<Item = (String, Tensor<f32>)> + '_ {
    tensors.into_iter().map(move |(n, t)| (format!("{prefix}.{n}"), t))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, &ckpt.descriptor);
    let meta = serde_json::to_string(&ckpt.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_str(&mut out, &meta);
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let slice = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!(
                "{what}: expected {n} bytes, found {}",
                self.bytes.len().saturating_sub(self.pos)
            ),
        })?;
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            message: format!("{what} is not valid UTF-8"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint file (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let descriptor = r.string("descriptor")?;
    let meta_json = r.string("metadata")?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta_json).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name = r.string(&format!("name of tensor {i}"))?;
        let rank = r.u32(&format!("rank of tensor '{name}'"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("shape of tensor '{name}'"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &format!("data of tensor '{name}'"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes after last tensor", bytes.len() - r.pos),
        });
    }
    Ok(Checkpoint {
        descriptor,
        meta,
        tensors,
    })
}

/// Writes via a temporary file and rename so readers never see partial files.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn check_descriptor(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint holds {found}, model expects {expected}"
        )));
    }
    Ok(())
}

pub fn classifier_checkpoint(model: &Classifier<f32>, meta: CheckpointMeta) -> Checkpoint {
    Checkpoint {
        descriptor: model.spec().descriptor(),
        meta,
        tensors: model.named_tensors(),
    }
}

/// Rebuilds a classifier from a checkpoint, checking its architecture.
pub fn classifier_from_checkpoint(ckpt: &Checkpoint, spec: &ClassifierSpec) -> Result<Classifier<f32>> {
    check_descriptor(&ckpt.descriptor, &spec.descriptor())?;
    let mut model = Classifier::new(spec.clone(), 0)?;
    model.load_named(&ckpt.tensors)?;
    Ok(model)
}

pub fn generator_checkpoint(model: &Generator<f32>, meta: CheckpointMeta) -> Checkpoint {
    Checkpoint {
        descriptor: model.spec().descriptor(),
        meta,
        tensors: model.named_tensors(),
    }
}

pub fn generator_from_checkpoint(ckpt: &Checkpoint, spec: &GeneratorSpec) -> Result<Generator<f32>> {
    check_descriptor(&ckpt.descriptor, &spec.descriptor())?;
    let mut model = Generator::new(spec.clone(), 0)?;
    model.load_named(&ckpt.tensors)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize) -> ClassifierSpec {
        ClassifierSpec {
            in_channels: 3,
            image_size: 8,
            width: 2,
            stages: 2,
            num_classes: classes,
            batch_norm: true,
        }
    }

    fn sample() -> Checkpoint {
        let model = Classifier::<f32>::new(spec(10), 3).unwrap();
        classifier_checkpoint(
            &model,
            CheckpointMeta {
                seed: 3,
                epoch: 4,
                config_hash: "abc".into(),
                extra: serde_json::json!({"note": [1.5, 2.25]}),
            },
        )
    }

    #[test]
    fn encode_decode_encode_is_byte_identical() {
        let bytes = encode(&sample()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn architecture_mismatch_names_both() {
        let err = classifier_from_checkpoint(&sample(), &spec(100)).unwrap_err().to_string();
        assert!(err.contains("classes=10") && err.contains("classes=100"), "{err}");
    }

    #[test]
    fn truncated_tensor_is_named() {
        let mut bytes = encode(&sample()).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("head.bias") || err.contains("running_var"), "{err}");
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 99;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
    }
}
