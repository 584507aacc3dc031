use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Moments, ParameterStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// One Adam update of every parameter named in `grads`. Moment buffers and
/// the step counter live in the store so they checkpoint with it.
/// Returns the pre-clip gradient norm.
pub fn adam_step(store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> f64 {
    let norm = global_norm(grads);
    let scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let Some(p) = store.data_mut(name) else { continue };
        let dtype = p.dtype;
        let n = p.data.len();
        let mut params = std::mem::take(&mut p.data);
        let mom = store.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        for i in 0..n {
            let gi = g.data[i] * scale;
            mom.m[i] = dtype.round(cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * gi);
            mom.v[i] = dtype.round(cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * gi * gi);
            let mhat = mom.m[i] / bc1;
            let vhat = mom.v[i] / bc2;
            params[i] = dtype.round(params[i] - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
        }
        store.data_mut(name).expect("present").data = params;
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DType;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]), DType::F64).unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(vec![2], vec![0.5, -0.01]));
        let cfg = AdamConfig {
            clip_norm: None,
            ..AdamConfig::with_lr(0.1)
        };
        adam_step(&mut s, &g, &cfg);
        let w = &s.get("w").unwrap().data;
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-5);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros(&[2]), DType::F32).unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(vec![2], vec![3.0, 4.0]));
        let n = adam_step(&mut s, &g, &AdamConfig::default());
        assert_eq!(n, 5.0);
        let m = &s.moments()["w"].m;
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-7);
    }
}
