//! Single-file model checkpoint.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "SDXMODEL" | u32 version
//! u64 text_dim, vitals_dim, vitals_hidden, trunk_hidden, n_classes | f64 dropout
//! u32 len + featurizer config JSON
//! u32 label count, then per label u32 len + UTF-8 name
//! u64 parameter count, then f64 parameters in `ClassifierModel::param` order
//! u32 CRC-32 of everything above
//! ```

use std::path::Path;

use super::model::{ClassifierModel, ModelConfig};
use super::ClassifierError;
use crate::domain::LabelSet;
use crate::preprocess::FeaturizerConfig;

const MAGIC: &[u8; 8] = b"SDXMODEL";
pub const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> ClassifierError {
    ClassifierError::Checkpoint(msg.into())
}

pub fn encode(model: &ClassifierModel) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + model.num_params() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let c = &model.config;
    for d in [c.text_dim, c.vitals_dim, c.vitals_hidden, c.trunk_hidden, c.n_classes] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.extend_from_slice(&c.dropout_rate.to_le_bytes());
    let feat = serde_json::to_vec(&model.featurizer).expect("featurizer config serializes");
    buf.extend_from_slice(&(feat.len() as u32).to_le_bytes());
    buf.extend_from_slice(&feat);
    buf.extend_from_slice(&(model.labels.len() as u32).to_le_bytes());
    for name in model.labels.names() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    buf.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for layer in model.layers() {
        for v in layer.weights.iter().chain(&layer.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ClassifierError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, ClassifierError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ClassifierError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ClassifierError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize, ClassifierError> {
        usize::try_from(self.u64()?).map_err(|_| bad("dimension overflows usize"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ClassifierModel, ClassifierError> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(bad("file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if &body[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(bad("CRC mismatch"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let config = ModelConfig {
        text_dim: r.usize()?,
        vitals_dim: r.usize()?,
        vitals_hidden: r.usize()?,
        trunk_hidden: r.usize()?,
        n_classes: r.usize()?,
        dropout_rate: r.f64()?,
    };
    let n = r.u32()? as usize;
    let featurizer: FeaturizerConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| bad(format!("featurizer config: {e}")))?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let s = std::str::from_utf8(r.take(n)?).map_err(|_| bad("label is not UTF-8"))?;
        names.push(s.to_string());
    }
    let labels = LabelSet::from_names(names);
    if labels.len() != count {
        return Err(bad("duplicate labels"));
    }
    let mut model = ClassifierModel::new(config, featurizer, labels, 0)?;
    let params = r.usize()?;
    if params != model.num_params() {
        return Err(bad(format!(
            "parameter count {params} does not match dims ({})",
            model.num_params()
        )));
    }
    for layer in model.layers_mut() {
        for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *v = r.f64()?;
        }
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes before CRC"));
    }
    if !model.all_finite() {
        return Err(bad("non-finite parameter"));
    }
    Ok(model)
}

pub fn save(model: &ClassifierModel, path: &Path) -> Result<(), ClassifierError> {
    std::fs::write(path, encode(model)).map_err(|source| ClassifierError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<ClassifierModel, ClassifierError> {
    let bytes = std::fs::read(path).map_err(|source| ClassifierError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
