//! Named parameter collections and their binary on-disk format.

use std::path::Path;
use std::sync::Arc;

use super::tape::GradMap;
use super::{Result, Tape, Tensor, TensorError};

/// File magic for serialized parameter sets.
pub const FORMAT_MAGIC: [u8; 4] = *b"BEVL";
/// Current format version byte.
pub const FORMAT_VERSION: u8 = 1;

/// Largest tensor rank the decoder accepts.
const MAX_RANK: u64 = 8;

/// Ordered map from parameter name to tensor. Iteration follows insertion
/// order, which also fixes the serialization and flattening order.
#[derive(Clone, Default, Debug)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter. Duplicate names are rejected.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(TensorError::Param {
                name,
                what: "duplicate parameter name".to_string(),
            });
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Replaces an existing entry's value. The shape must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let Some((_, slot)) = self.entries.iter_mut().find(|(n, _)| n == name) else {
            return Err(TensorError::Param {
                name: name.to_string(),
                what: "unknown parameter".to_string(),
            });
        };
        if slot.shape() != value.shape() {
            return Err(TensorError::Param {
                name: name.to_string(),
                what: format!(
                    "shape {:?} does not match existing {:?}",
                    value.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| TensorError::Param {
            name: name.to_string(),
            what: "missing parameter".to_string(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// All values concatenated in iteration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a set with this set's names and shapes from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_values() {
            return Err(TensorError::DataLength {
                shape: vec![self.num_values()],
                want: self.num_values(),
                got: flat.len(),
            });
        }
        let mut out = ParamSet::new();
        let mut off = 0;
        for (name, t) in &self.entries {
            let n = t.numel();
            out.insert(
                name.clone(),
                Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec())?,
            )?;
            off += n;
        }
        Ok(out)
    }

    /// Attaches every entry to `tape` as a leaf named `prefix` + name. Keys
    /// of the returned set are unchanged.
    pub fn attach(&self, tape: &Tape, prefix: &str) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            let leaf = tape.watch(t, &format!("{prefix}{name}"))?;
            out.insert(name.clone(), leaf)?;
        }
        Ok(out)
    }

    /// `self + scale * dir`, entrywise by name. Entries absent from `dir`
    /// pass through unchanged; `dir` names not present here are rejected.
    pub fn axpy(&self, dir: &GradMap, scale: f64) -> Result<ParamSet> {
        for (name, d) in dir {
            match self.get(name) {
                None => {
                    return Err(TensorError::Param {
                        name: name.clone(),
                        what: "direction entry has no matching parameter".to_string(),
                    })
                }
                Some(t) if t.shape() != d.shape() => {
                    return Err(TensorError::ShapeMismatch {
                        op: "axpy",
                        lhs: t.shape().to_vec(),
                        rhs: d.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        let mut out = ParamSet::new();
        for (name, t) in &self.entries {
            let nt = match dir.get(name) {
                Some(d) => {
                    let data = t
                        .data()
                        .iter()
                        .zip(d.data())
                        .map(|(p, g)| p + scale * g)
                        .collect();
                    Tensor::new(t.shape().to_vec(), data)?
                }
                None => t.detach(),
            };
            out.insert(name.clone(), nt)?;
        }
        Ok(out)
    }

    /// True when both sets have identical names, shapes, and bit-identical
    /// values, in the same order.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            })
    }

    /// Thread-safe copy for sending across workers.
    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().to_vec()))
                .collect(),
        }
    }

    /// Binary encoding: magic, version byte, entry count, then per entry the
    /// name (length-prefixed UTF-8), rank, extents, and values. All integers
    /// are little-endian u64; values are little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&FORMAT_MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Strict decoder: rejects bad magic or version, truncation, non-UTF-8 or
    /// duplicate names, zero or oversized extents, non-finite values, and
    /// trailing bytes. Allocation is bounded by the input length.
    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet> {
        let mut c = Cursor { b: bytes, off: 0 };
        let magic = c.take(4)?;
        if magic != FORMAT_MAGIC {
            return Err(c.err("bad magic"));
        }
        let version = c.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(c.err(&format!("unsupported version {version}")));
        }
        let count = c.u64()?;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let name_len = c.u64()?;
            if name_len == 0 || name_len > c.remaining() as u64 {
                return Err(c.err(&format!("name length {name_len} out of range")));
            }
            let name_bytes = c.take(name_len as usize)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| c.err("name is not valid UTF-8"))?
                .to_string();
            let rank = c.u64()?;
            if rank == 0 || rank > MAX_RANK {
                return Err(c.err(&format!("rank {rank} out of range")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut n: u64 = 1;
            for _ in 0..rank {
                let e = c.u64()?;
                if e == 0 {
                    return Err(c.err("zero extent"));
                }
                n = n
                    .checked_mul(e)
                    .ok_or_else(|| c.err("extent product overflow"))?;
                shape.push(e as usize);
            }
            if n > (c.remaining() / 8) as u64 {
                return Err(c.err(&format!("entry {name}: {n} values exceed remaining input")));
            }
            let mut data = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let v = c.f64()?;
                if !v.is_finite() {
                    return Err(c.err(&format!("entry {name}: non-finite value")));
                }
                data.push(v);
            }
            let t = Tensor::from_parts(shape, Arc::new(data), None);
            out.insert(name, t)?;
        }
        if c.remaining() != 0 {
            return Err(c.err("trailing bytes after last entry"));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Owned, `Send` copy of a [`ParamSet`] for crossing thread boundaries.
#[derive(Clone)]
pub struct ParamSnapshot {
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl ParamSnapshot {
    pub fn restore(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, shape, data) in &self.entries {
            let t = Tensor::from_parts(shape.clone(), Arc::new(data.clone()), None);
            out.insert(name.clone(), t).expect("snapshot names are unique");
        }
        out
    }
}

/// L2 norm over every value in a gradient map.
pub fn grad_l2_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

struct Cursor<'a> {
    b: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.b.len() - self.off
    }

    fn err(&self, what: &str) -> TensorError {
        TensorError::Decode {
            offset: self.off,
            what: what.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err("unexpected end of input"));
        }
        let s = &self.b[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let s = self.take(8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let s = self.take(8)?;
        Ok(f64::from_le_bytes(s.try_into().unwrap()))
    }
}
