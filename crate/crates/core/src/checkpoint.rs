//! Versioned single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CIMCKPT\0"
//! version    u32
//! kind       u32 length + UTF-8
//! meta       u32 length + UTF-8 JSON (config snapshot, scalars)
//! count      u32
//! tensor*    u32 name length + UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//!            u32 rank, u64 per dim, raw little-endian values
//! ```
//!
//! Writes go to a temporary sibling file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{CimError, Result};

pub const MAGIC: &[u8; 8] = b"CIMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| CimError::validation(format!("checkpoint is missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &serde_json::to_string(&self.meta)?);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F64 => {
                    out.push(1);
                    put_dims(&mut out, t.dims());
                    for v in flat.to_vec1::<f64>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                _ => {
                    out.push(0);
                    put_dims(&mut out, t.dims());
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| CimError::IncompatibleCheckpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| bad("truncated header"))? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32().map_err(|_| bad("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let mut body = || -> std::result::Result<Container, &'static str> {
            let kind = r.string()?;
            let meta: serde_json::Value =
                serde_json::from_str(&r.string()?).map_err(|_| "invalid metadata")?;
            let count = r.u32()? as usize;
            let mut tensors = Vec::with_capacity(count);
            for _ in 0..count {
                let name = r.string()?;
                let dtype = r.take(1)?[0];
                let rank = r.u32()? as usize;
                let dims = (0..rank)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let n: usize = dims.iter().product();
                let t = match dtype {
                    0 => {
                        let raw = r.take(n * 4)?;
                        let v: Vec<f32> = raw
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect();
                        Tensor::from_vec(v, dims, &Device::Cpu)
                    }
                    1 => {
                        let raw = r.take(n * 8)?;
                        let v: Vec<f64> = raw
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect();
                        Tensor::from_vec(v, dims, &Device::Cpu)
                    }
                    _ => return Err("unknown dtype tag"),
                }
                .map_err(|_| "bad tensor shape")?;
                tensors.push((name, t));
            }
            Ok(Container { kind, meta, tensors })
        };
        body().map_err(bad)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CimError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the container kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(CimError::IncompatibleCheckpoint {
                path: path.to_path_buf(),
                reason: format!("expected a {kind} checkpoint, found {}", c.kind),
            });
        }
        Ok(c)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CimError::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CimError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CimError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CimError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CimError::io(path, e))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], &'static str> {
        let end = self.pos.checked_add(n).ok_or("truncated")?;
        let s = self.bytes.get(self.pos..end).ok_or("truncated")?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, &'static str> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, &'static str> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, &'static str> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let mut c = Container::new("test", serde_json::json!({"a": 1}));
        c.push("x", &Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap());
        c.push("y", &Tensor::new(&[0.1f64, 0.2], &Device::Cpu).unwrap());
        c.save(&p).unwrap();
        let back = Container::load_kind(&p, "test").unwrap();
        assert_eq!(back.meta["a"], 1);
        assert_eq!(
            back.require("x").unwrap().to_vec2::<f32>().unwrap(),
            vec![vec![1.5, -2.0], vec![0.25, 3.0]]
        );
        assert_eq!(back.require("y").unwrap().to_vec1::<f64>().unwrap(), vec![0.1, 0.2]);
    }

    #[test]
    fn version_and_kind_mismatch_are_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let c = Container::new("model", serde_json::json!({}));
        let mut bytes = c.to_bytes().unwrap();
        bytes[8] = 99;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            Container::load(&p),
            Err(CimError::IncompatibleCheckpoint { .. })
        ));
        c.save(&p).unwrap();
        assert!(matches!(
            Container::load_kind(&p, "tokenizer"),
            Err(CimError::IncompatibleCheckpoint { .. })
        ));
    }
}
