//! "BSTK" checkpoint container.
//!
//! Layout: the 4-byte magic `BSTK`, a little-endian u32 version, a u32
//! byte length followed by a UTF-8 metadata block of `key=value` lines, then
//! every parameter as raw little-endian f32 values in declaration order.
//! Parameter names and shapes are recorded in the metadata as
//! `param.<index>=<name> <d0>x<d1>x...`.

use std::path::Path;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

const MAGIC: &[u8; 4] = b"BSTK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Free-form metadata, excluding the `param.*` entries.
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, meta: Vec<(String, String)>) -> Self {
        Self {
            meta,
            params: store
                .iter()
                .map(|p| (p.name.clone(), p.shape.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copies values into a store with identical names and shapes.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, network has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (p, (name, shape, values)) in store.iter_mut().zip(&self.params) {
            if &p.name != name || &p.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {shape:?} does not match network {} {:?}",
                    p.name, p.shape
                )));
            }
            p.value.clone_from(values);
            p.momentum.iter_mut().for_each(|m| *m = 0.0);
            p.grad = None;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = String::new();
        for (k, v) in &self.meta {
            text.push_str(&format!("{k}={}\n", v.replace('\n', " ")));
        }
        for (i, (name, shape, _)) in self.params.iter().enumerate() {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            text.push_str(&format!("param.{i}={name} {}\n", dims.join("x")));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (_, _, values) in &self.params {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(err("missing BSTK magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let text = bytes
            .get(12..12 + len)
            .ok_or_else(|| err("truncated metadata"))?;
        let text = std::str::from_utf8(text).map_err(|_| err("metadata is not UTF-8"))?;
        let mut meta = Vec::new();
        let mut specs = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| err("metadata line without '='"))?;
            if let Some(idx) = k.strip_prefix("param.") {
                let idx: usize = idx.parse().map_err(|_| err("bad parameter index"))?;
                let (name, dims) = v.rsplit_once(' ').ok_or_else(|| err("bad parameter entry"))?;
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err("bad parameter shape"))?;
                if idx != specs.len() {
                    return Err(err("parameter entries out of order"));
                }
                specs.push((name.to_string(), shape));
            } else {
                meta.push((k.to_string(), v.to_string()));
            }
        }
        let mut offset = 12 + len;
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {name}")))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            params.push((name, shape, values));
        }
        if offset != bytes.len() {
            return Err(err("trailing bytes after parameter data"));
        }
        Ok(Self { meta, params })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    atomic_write(path, &ckpt.to_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_and_roundtrip() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, -6.5]);
        store.add("a.bias", vec![2], vec![0.25, f32::MIN_POSITIVE]);
        let ck = Checkpoint::from_store(&store, vec![("config".into(), "{\"k\":1}".into())]);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"BSTK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(&bytes[bytes.len() - 4..], &f32::MIN_POSITIVE.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta_value("config"), Some("{\"k\":1}"));
        let mut other = ParamStore::<f32>::new();
        other.add("a.weight", vec![2, 3], vec![0.0; 6]);
        other.add("a.bias", vec![2], vec![0.0; 2]);
        back.load_into(&mut other).unwrap();
        assert_eq!(other.iter().next().unwrap().value[5], -6.5);
    }

    #[test]
    fn rejects_corruption() {
        assert!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0").is_err());
        let mut store = ParamStore::<f32>::new();
        store.add("w", vec![4], vec![1.0; 4]);
        let bytes = Checkpoint::from_store(&store, vec![]).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut mismatched = ParamStore::<f32>::new();
        mismatched.add("w", vec![2, 2], vec![0.0; 4]);
        assert!(Checkpoint::from_bytes(&bytes).unwrap().load_into(&mut mismatched).is_err());
    }
}
