//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size        field
//! 0       8           magic "GLDMCKPT"
//! 8       4   u32     format version (currently 1)
//! 12      4   u32     metadata length M in bytes
//! 16      M           metadata, UTF-8 lines "key=value\n" sorted by key
//! 16+M    4   u32     tensor count C
//! then C records:
//!         4   u32     name length L
//!         L           name, UTF-8
//!         4   u32     rank R
//!         8R  u64     dims
//!         8P  f64     values, row-major, P = product of dims
//! ```
//!
//! Nothing may follow the last record.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Module, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"GLDMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key `{key}`")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value `{raw}` for metadata key `{key}`")))
    }

    /// Copy every parameter of `m` into the tensor table.
    pub fn add_module<T: Scalar, M: Module<T> + ?Sized>(&mut self, m: &M) {
        m.visit(&mut |p| {
            self.tensors
                .push((p.name().to_string(), p.tensor().cast::<f64>()))
        });
    }

    /// Overwrite every parameter of `m` from the table, matching by name and
    /// shape. Missing or surplus tensors are errors.
    pub fn load_module<T: Scalar, M: Module<T> + ?Sized>(&self, m: &mut M) -> Result<()> {
        let table: BTreeMap<&str, &Tensor<f64>> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        let mut used = 0;
        m.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match table.get(p.name()) {
                None => err = Some(Error::Checkpoint(format!("tensor `{}` missing", p.name()))),
                Some(t) if t.shape() != p.tensor().shape() => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor `{}` has shape {:?}, model expects {:?}",
                        p.name(),
                        t.shape(),
                        p.tensor().shape()
                    )))
                }
                Some(t) => {
                    used += 1;
                    let src = t.cast::<T>();
                    p.tensor_mut().values_mut().copy_from_slice(src.values());
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != table.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors in file, model uses {used}",
                table.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || k.is_empty() || v.contains('\n') {
                return Err(Error::Checkpoint(format!(
                    "metadata entry `{k}` cannot be encoded"
                )));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let len = |n: usize, what: &str| {
            u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too large")))
        };
        out.extend_from_slice(&len(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&len(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&len(name.len(), "tensor name")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len(t.shape().len(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Decode a container. The magic and version are checked before anything
    /// else is read.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let mlen = r.u32("metadata length")? as usize;
        let meta = std::str::from_utf8(r.take(mlen, "metadata")?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("metadata line without `=`: `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let nlen = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
                .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: implausible rank {rank}"
                )));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(
                    usize::try_from(r.u64("dim")?)
                        .map_err(|_| Error::Checkpoint("dimension overflow".into()))?,
                );
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (buf.len() - r.pos) / 8)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor `{name}`: dims {dims:?} exceed the file"))
                })?;
            let raw = r.take(numel * 8, "tensor values")?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(dims, values)?));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
