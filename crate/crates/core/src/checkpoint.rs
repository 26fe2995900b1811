//! `DBF1` model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DBF1"  u32 version
//! u32 config_len   config_len bytes of JSON (ModelConfig)
//! u32 n_tensors
//! repeated n_tensors times:
//!     u32 name_len  name bytes (UTF-8)
//!     u32 ndim      ndim × u32 dims
//!     prod(dims) × f32
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EmbedderModel, ModelConfig, Params};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DBF1";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(model: &EmbedderModel<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    let named = model.params.named();
    put_u32(&mut out, named.len() as u32);
    for (name, t) in named {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &dim in t.shape() {
            put_u32(&mut out, dim as u32);
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format {
                what: "checkpoint",
                detail: format!("truncated at byte {}", self.pos),
            }
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

pub fn decode(buf: &[u8]) -> Result<EmbedderModel<f32>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    config.validate()?;
    let mut params = Params::<f32>::zeros(&config);
    let expected: Vec<(String, Vec<usize>)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(bad(format!("expected {} tensors, found {count}", expected.len())));
    }
    for (slot, (want_name, want_shape)) in params.tensors_mut().into_iter().zip(expected) {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|e| bad(e.to_string()))?;
        if name != want_name {
            return Err(bad(format!("expected tensor {want_name}, found {name}")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if shape != want_shape {
            return Err(bad(format!("tensor {name}: shape {shape:?}, expected {want_shape:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *slot = Tensor::from_vec(&shape, data).expect("shape checked");
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(EmbedderModel { config, params })
}

pub fn save(model: &EmbedderModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<EmbedderModel<f32>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{CLS, SEP};

    fn model() -> EmbedderModel<f32> {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            vocab_size: 12,
            ..ModelConfig::default()
        };
        EmbedderModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dbf1");
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, m);
        let ids = [CLS, 6, 7, SEP];
        let a = m.embed(&ids).unwrap();
        let b = back.embed(&ids).unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&model()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
