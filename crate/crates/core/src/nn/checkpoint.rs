//! Binary checkpoint container: a magic tag, a format version, an element
//! width, string metadata and named arrays, all little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TGANCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Bytes per stored element: 4 or 8.
    pub dtype: u8,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new<T: Real>() -> Self {
        Self {
            dtype: T::BYTES,
            meta: BTreeMap::new(),
            arrays: vec![],
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format("checkpoint", format!("missing metadata key {key}")))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let s = self.meta_str(key)?;
        s.parse()
            .map_err(|_| Error::format("checkpoint", format!("bad value {s:?} for {key}")))
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: t.shape.clone(),
            data: t.to_vec_f64(),
        });
    }

    /// Adds parameters and buffers under `prefix`.
    pub fn push_store<T: Real>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (n, p) in store.names.iter().zip(&store.params) {
            self.push(format!("{prefix}/{n}"), p);
        }
        for (n, b) in store.buffer_names.iter().zip(&store.buffers) {
            self.push(format!("{prefix}/{n}"), b);
        }
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let a = self
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing array {name}")))?;
        Ok(Tensor::from_f64(a.shape.clone(), &a.data))
    }

    /// Overwrites every array of `store` from entries under `prefix`, checking shapes.
    pub fn load_store<T: Real>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<_> = store.names.iter().chain(&store.buffer_names).cloned().collect();
        let targets = store.params.iter_mut().chain(store.buffers.iter_mut());
        for (n, t) in names.iter().zip(targets) {
            let full = format!("{prefix}/{n}");
            let v = self.get::<T>(&full)?;
            if v.shape != t.shape {
                return Err(Error::format(
                    "checkpoint",
                    format!("array {full} has shape {:?}, model expects {:?}", v.shape, t.shape),
                ));
            }
            *t = v;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        out.push(self.dtype);
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
            out.extend_from_slice(s.as_bytes());
        };
        out.write_u32::<LittleEndian>(self.meta.len() as u32).unwrap();
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.write_u32::<LittleEndian>(self.arrays.len() as u32).unwrap();
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.write_u32::<LittleEndian>(a.shape.len() as u32).unwrap();
            for &d in &a.shape {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            for &v in &a.data {
                if self.dtype == 4 {
                    out.write_f32::<LittleEndian>(v as f32).unwrap();
                } else {
                    out.write_f64::<LittleEndian>(v).unwrap();
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(path, r.to_string());
        let mut c = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        c.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let dtype = c.read_u8().map_err(|_| bad("truncated header"))?;
        if dtype != 4 && dtype != 8 {
            return Err(bad(&format!("unknown element width {dtype}")));
        }
        let remaining = |c: &Cursor<&[u8]>| bytes.len() as u64 - c.position();
        let get_str = |c: &mut Cursor<&[u8]>| -> Result<String> {
            let n = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as u64;
            if n > remaining(c) {
                return Err(bad("truncated string"));
            }
            let mut buf = vec![0u8; n as usize];
            c.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
            String::from_utf8(buf).map_err(|_| bad("invalid UTF-8"))
        };
        let n_meta = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = get_str(&mut c)?;
            let v = get_str(&mut c)?;
            meta.insert(k, v);
        }
        let n_arrays = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))?;
        let mut arrays = vec![];
        for _ in 0..n_arrays {
            let name = get_str(&mut c)?;
            let ndim = c.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))?;
            if ndim > 8 {
                return Err(bad("array rank too large"));
            }
            let mut shape = vec![];
            for _ in 0..ndim {
                shape.push(c.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("array too large"))?;
            if (n as u64).saturating_mul(dtype as u64) > remaining(&c) {
                return Err(bad(&format!("array {name} truncated")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(if dtype == 4 {
                    c.read_f32::<LittleEndian>().map_err(|_| bad("truncated"))? as f64
                } else {
                    c.read_f64::<LittleEndian>().map_err(|_| bad("truncated"))?
                });
            }
            arrays.push(NamedArray { name, shape, data });
        }
        if remaining(&c) != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { dtype, meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new::<f32>();
        c.set_meta("kind", "generator");
        c.push("w", &Tensor::<f32>::new(vec![2, 2], vec![1.5, -2.0, 0.25, 3.0]));
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(c, back);
        assert_eq!(back.meta_str("kind").unwrap(), "generator");
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = sample().to_bytes();
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&m, Path::new("x")),
            Err(Error::Format { .. })
        ));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&v, Path::new("x")),
            Err(Error::FormatVersion { found: 9, .. })
        ));
        let t = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(t, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }
}
