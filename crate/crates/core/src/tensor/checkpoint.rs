//! Parameter checkpoint file.
//!
//! ```text
//! intrus-checkpoint 1
//! meta <key>=<value>            (zero or more)
//! tensor <name> <dims> <offset>  (one per tensor; dims like `24x64`, `scalar` for rank 0)
//! end
//! <payload>
//! ```
//!
//! The header is UTF-8 text, one record per line. `offset` is the byte
//! offset of the tensor inside the payload, which starts right after the
//! `end\n` line and holds every tensor as little-endian `f32` values in
//! row-major order. Values are widened back to `f64` on load.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::params::ParamStore;
use super::value::Tensor;

const MAGIC: &str = "intrus-checkpoint 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint header line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("checkpoint payload truncated for tensor {0}")]
    Truncated(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(meta: Vec<(String, String)>, store: &ParamStore) -> Self {
        Self {
            meta,
            tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copies tensors into `store` by name, checking shapes.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            let slot = store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    found: t.shape().to_vec(),
                    expected: slot.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k}={v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims = if t.shape().is_empty() {
                "scalar".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            header.push_str(&format!("tensor {name} {dims} {offset}\n"));
            offset += 4 * t.numel();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut pos = 0;
        let mut line_no = 0;
        let mut next_line = || -> Result<(usize, &str), CheckpointError> {
            line_no += 1;
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or(CheckpointError::Format {
                line: line_no,
                msg: "unterminated header".into(),
            })?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| CheckpointError::Format {
                line: line_no,
                msg: "header is not UTF-8".into(),
            })?;
            pos += nl + 1;
            Ok((line_no, line))
        };
        let (_, magic) = next_line()?;
        if magic != MAGIC {
            return Err(CheckpointError::Format {
                line: 1,
                msg: format!("expected `{MAGIC}`"),
            });
        }
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        loop {
            let (ln, line) = next_line()?;
            let bad = |msg: &str| CheckpointError::Format {
                line: ln,
                msg: msg.to_string(),
            };
            if line == "end" {
                break;
            } else if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad("meta without `=`"))?;
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let fields: Vec<&str> = rest.split(' ').collect();
                let [name, dims, offset] = fields[..] else {
                    return Err(bad("expected `tensor <name> <dims> <offset>`"));
                };
                let shape: Vec<usize> = if dims == "scalar" {
                    Vec::new()
                } else {
                    dims.split('x')
                        .map(|d| d.parse().map_err(|_| bad("bad dimension")))
                        .collect::<Result<_, _>>()?
                };
                let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
                entries.push((name.to_string(), shape, offset));
            } else {
                return Err(bad("unknown record"));
            }
        }
        let payload = &bytes[pos..];
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            let end = offset + 4 * n;
            if end > payload.len() {
                return Err(CheckpointError::Truncated(name));
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|_| CheckpointError::Truncated(name.clone()))?;
            tensors.push((name, t));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_f32_precision() {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::from_rows(&[&[1.0, -2.5], &[0.125, 3.0]]));
        store.add("b", Tensor::scalar(0.1));
        let ck = Checkpoint::from_store(vec![("d_model".into(), "8".into())], &store);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.meta_value("d_model"), Some("8"));
        assert_eq!(back.tensors[0].1, store.tensors()[0]);
        assert_eq!(back.tensors[1].1.item(), 0.1f32 as f64);
    }

    #[test]
    fn header_layout_is_plain_text() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2, 3]));
        store.add("b", Tensor::zeros(&[3]));
        let bytes = Checkpoint::from_store(vec![], &store).to_bytes();
        let text = String::from_utf8_lossy(&bytes[..bytes.len() - 36]);
        assert_eq!(text, "intrus-checkpoint 1\ntensor w 2x3 0\ntensor b 3 24\nend\n");
    }

    #[test]
    fn load_into_rejects_shape_change() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2, 2]));
        let ck = Checkpoint::from_store(vec![], &store);
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[2, 3]));
        assert!(matches!(
            ck.load_into(&mut other),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[4]));
        let mut bytes = Checkpoint::from_store(vec![], &store).to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Truncated(_))
        ));
    }
}
