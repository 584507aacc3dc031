use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Storage precision of a parameter. `F32` tensors are computed in `f64`
/// but every stored value is rounded to the nearest `f32`, so they
/// serialize losslessly as little-endian `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

/// Adam first and second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Named model parameters plus optimizer state.
///
/// Names are unique and shapes are fixed at insertion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, ParamTensor>,
    pub(crate) moments: BTreeMap<String, Moments>,
    pub(crate) step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor, dtype: DType) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidModelConfig(format!("duplicate parameter {name:?}")));
        }
        let data = t.data.iter().map(|&v| dtype.round(v)).collect();
        self.params.insert(
            name.to_string(),
            ParamTensor {
                shape: t.shape,
                dtype,
                data,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.params
            .get(name)
            .map(|p| Tensor::new(p.shape.clone(), p.data.clone()))
    }

    /// Replaces values; the length must match and values are rounded to
    /// the parameter's dtype.
    pub fn set(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("unknown parameter {name:?}")))?;
        if p.data.len() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: expected {} values, got {}",
                p.data.len(),
                data.len()
            )));
        }
        for (dst, &v) in p.data.iter_mut().zip(data) {
            *dst = p.dtype.round(v);
        }
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.data.len())
            .sum()
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_optimizer_state(&mut self, step: u64, moments: BTreeMap<String, Moments>) {
        self.step = step;
        self.moments = moments;
    }

    /// Drops optimizer state, e.g. when a pretrained encoder is reused.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        self.moments.clear();
    }

    /// Copies every parameter under `from_prefix` in `src` into this store
    /// under `to_prefix`, requiring identical shapes.
    pub fn copy_prefix(&mut self, src: &ParameterStore, from_prefix: &str, to_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, p) in src.iter().filter(|(n, _)| n.starts_with(from_prefix)) {
            let target = format!("{to_prefix}{}", &name[from_prefix.len()..]);
            let dst = self
                .params
                .get_mut(&target)
                .ok_or_else(|| Error::ShapeMismatch(format!("no parameter {target:?} to receive {name:?}")))?;
            if dst.shape != p.shape {
                return Err(Error::ShapeMismatch(format!(
                    "{target}: shape {:?} vs {:?}",
                    dst.shape, p.shape
                )));
            }
            for (d, &v) in dst.data.iter_mut().zip(&p.data) {
                *d = dst.dtype.round(v);
            }
            copied += 1;
        }
        Ok(copied)
    }
}

/// Deterministic initializers drawing from a caller-provided RNG.
pub struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
    pub dtype: DType,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(rng: &'a mut R, dtype: DType) -> Self {
        Self { rng, dtype }
    }

    pub fn uniform(&mut self, store: &mut ParameterStore, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| if bound > 0.0 { self.rng.gen_range(-bound..bound) } else { 0.0 })
            .collect();
        store.insert(name, Tensor::new(shape.to_vec(), data), self.dtype)
    }

    pub fn constant(&mut self, store: &mut ParameterStore, name: &str, shape: &[usize], value: f64) -> Result<()> {
        store.insert(name, Tensor::full(shape, value), self.dtype)
    }
}
