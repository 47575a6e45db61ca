use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Tensor, TensorError};

/// A trainable tensor together with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named parameters, iterated in sorted path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    step_count: u64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<(), TensorError> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(TensorError::DuplicateParam(path));
        }
        self.params.insert(path, Param { value, grad: None });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Param, TensorError> {
        self.params
            .get(path)
            .ok_or_else(|| TensorError::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param, TensorError> {
        self.params
            .get_mut(path)
            .ok_or_else(|| TensorError::UnknownParam(path.to_string()))
    }

    pub fn value(&self, path: &str) -> Result<&Tensor, TensorError> {
        Ok(&self.get(path)?.value)
    }

    pub fn value_mut(&mut self, path: &str) -> Result<&mut Tensor, TensorError> {
        Ok(&mut self.get_mut(path)?.value)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn bump_step(&mut self) {
        self.step_count += 1;
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }

    /// Moves every parameter of `other` into `self` under `prefix/`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamSet) -> Result<(), TensorError> {
        for (k, p) in other.params {
            self.insert(format!("{prefix}/{k}"), p.value)?;
        }
        Ok(())
    }

    /// Parameters under `prefix/`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamSet {
        let head = format!("{prefix}/");
        let params = self
            .params
            .iter()
            .filter_map(|(k, p)| {
                k.strip_prefix(&head).map(|rest| {
                    (
                        rest.to_string(),
                        Param {
                            value: p.value.clone(),
                            grad: None,
                        },
                    )
                })
            })
            .collect();
        ParamSet {
            params,
            step_count: 0,
        }
    }

    /// Euclidean distance between two parameter sets with identical layout.
    pub fn distance(&self, other: &ParamSet) -> Result<f64, TensorError> {
        check_same_layout(self, other)?;
        let mut s = 0.0;
        for (a, b) in self.params.values().zip(other.params.values()) {
            s += a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
        Ok(s.sqrt())
    }

    /// Binary checkpoint: `version:u32, count:u32`, then per parameter
    /// `path_len:u32, path bytes, rank:u32, dims:u64 × rank, data:f64 × n`,
    /// all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (path, p) in &self.params {
            w.write_all(&(path.len() as u32).to_le_bytes())?;
            w.write_all(path.as_bytes())?;
            let shape = p.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(&mut r)?;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let path = String::from_utf8(buf)
                .map_err(|e| TensorError::Checkpoint(format!("parameter path is not UTF-8: {e}")))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            out.insert(path, Tensor::new(shape, data)?)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn check_same_layout(a: &ParamSet, b: &ParamSet) -> Result<(), TensorError> {
    if a.params.len() != b.params.len() {
        return Err(TensorError::LayoutMismatch(format!(
            "{} parameters vs {}",
            a.params.len(),
            b.params.len()
        )));
    }
    for ((ka, pa), (kb, pb)) in a.params.iter().zip(&b.params) {
        if ka != kb {
            return Err(TensorError::LayoutMismatch(format!("path {ka} vs {kb}")));
        }
        if pa.value.shape() != pb.value.shape() {
            return Err(TensorError::LayoutMismatch(format!(
                "{ka}: shape {:?} vs {:?}",
                pa.value.shape(),
                pb.value.shape()
            )));
        }
    }
    Ok(())
}

/// `target ← (1 − rate)·target + rate·online`, elementwise.
pub fn ema_update(target: &mut ParamSet, online: &ParamSet, rate: f64) -> Result<(), TensorError> {
    check_same_layout(target, online)?;
    for (t, o) in target.params.values_mut().zip(online.params.values()) {
        for (a, b) in t.value.data_mut().iter_mut().zip(o.value.data()) {
            *a = (1.0 - rate) * *a + rate * b;
        }
    }
    Ok(())
}
