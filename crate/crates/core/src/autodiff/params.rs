//! Ordered named parameter collections and their on-disk checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `MSPS`, version `u32`, entry
//! count `u32`, then per entry: name length `u32`, UTF-8 name bytes, rank
//! `u32`, `rank` dims as `u32`, and the `f32` payload in row-major order.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::tape::{Tape, Var};

const MAGIC: &[u8; 4] = b"MSPS";
const VERSION: u32 = 1;

/// Ordered `(name, tensor)` list. Order is fixed across clones and updates so
/// elementwise parameter arithmetic lines up.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Float> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
            }
        }
        Ok(ParamSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names, new values (must match in count and shape).
    pub fn with_values(&self, values: Vec<Tensor<T>>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::Misaligned(format!("{} values for {} parameters", values.len(), self.len())));
        }
        let entries = self
            .entries
            .iter()
            .zip(values)
            .map(|((n, old), v)| {
                if old.shape() != v.shape() {
                    return Err(Error::Shape {
                        op: "with_values",
                        lhs: old.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
                Ok((n.clone(), v))
            })
            .collect::<Result<_>>()?;
        Ok(ParamSet { entries })
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect(),
        }
    }

    /// Check that `other` has identical names and shapes in identical order.
    pub fn check_aligned<U: Float>(&self, other: &ParamSet<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Misaligned(format!("{} vs {} entries", self.len(), other.len())));
        }
        for ((a, ta), (b, tb)) in self.entries.iter().zip(&other.entries) {
            if a != b {
                return Err(Error::Misaligned(format!("`{a}` vs `{b}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Misaligned(format!("`{a}` shape {:?} vs {:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(())
    }

    /// Elementwise combination of two aligned sets.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_aligned(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| Ok((n.clone(), a.zip_map(b, "zip_with", &f)?)))
            .collect::<Result<_>>()?;
        Ok(ParamSet { entries })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.map(&f))).collect(),
        }
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Register every tensor as a trainable leaf on `tape`.
    pub fn vars<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.entries.iter().map(|(_, t)| tape.param(t.clone())).collect()
    }

    pub fn sq_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// SHA-256 over names, shapes and exact value bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in &self.entries {
            h.update(n.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Concatenate two sets (names must stay unique).
    pub fn merged(&self, other: &Self) -> Result<Self> {
        let mut entries = self.entries.clone();
        entries.extend(other.entries.iter().cloned());
        Self::new(entries)
    }

    /// Split by name predicate, preserving order.
    pub fn partition(&self, pred: impl Fn(&str) -> bool) -> (Self, Self) {
        let (a, b): (Vec<_>, Vec<_>) = self.entries.iter().cloned().partition(|(n, _)| pred(n));
        (ParamSet { entries: a }, ParamSet { entries: b })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read, origin: &Path) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, origin)?;
        if &magic != MAGIC {
            return Err(Error::format(origin, "not a parameter checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r, origin)?;
        if version != VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r, origin)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let mut name = vec![0u8; read_u32(&mut r, origin)? as usize];
            read_exact(&mut r, &mut name, origin)?;
            let name = String::from_utf8(name).map_err(|_| Error::format(origin, "parameter name is not UTF-8"))?;
            let rank = read_u32(&mut r, origin)? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(&mut r, origin).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let mut payload = vec![0u8; dims.iter().product::<usize>() * 4];
            read_exact(&mut r, &mut payload, origin)?;
            let values = payload
                .chunks_exact(4)
                .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap_or(T::nan()))
                .collect();
            entries.push((name, Tensor::new(dims, values)?));
        }
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], origin: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::format(origin, "truncated checkpoint"))
}

fn read_u32(r: &mut impl Read, origin: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, origin)?;
    Ok(u32::from_le_bytes(b))
}
