//! Adam, losses and metrics.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::param::{ParamRole, ParamSet};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy of `[B x K]` logits; returns the loss and the
/// softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (b, k) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(dim_err(format!("{} labels for {b} rows", labels.len())));
    }
    let mut probs = vec![0.0; b * k];
    let mut loss = 0.0;
    for (r, &lab) in labels.iter().enumerate() {
        if lab >= k {
            return Err(Error::Label { label: lab, classes: k });
        }
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lz = z.ln();
        for c in 0..k {
            probs[r * k + c] = (row[c] - m - lz).exp();
        }
        loss -= row[lab] - m - lz;
    }
    Ok((loss / b as f64, probs))
}

/// Cross-entropy loss and its gradient `(softmax - onehot) / B`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (loss, mut g) = softmax_cross_entropy(logits, labels)?;
    let k = logits.cols();
    let b = labels.len() as f64;
    for (r, &lab) in labels.iter().enumerate() {
        g[r * k + lab] -= 1.0;
    }
    g.iter_mut().for_each(|v| *v /= b);
    Ok((loss, Tensor::new(logits.shape().to_vec(), g)?))
}

/// Mean squared error and its gradient `2 (p - t) / N`.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    (loss, grad)
}

/// Row argmax; ties go to the lowest column.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Number of rows whose argmax equals the label.
pub fn correct_count(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(dim_err(format!("{} labels for {} rows", labels.len(), logits.rows())));
    }
    Ok(correct_count(logits, labels) as f64 / labels.len() as f64)
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments keyed by parameter id.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn moments(&self, id: &str) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(id)?, self.v.get(id)?))
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
///
/// Frozen parameters are skipped, masked entries never move, and `Lambda`
/// parameters are clamped to `[0, 1]` afterwards. Non-finite gradients abort
/// before anything is written.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    for p in params.iter() {
        if p.trainable && p.grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { id: p.id.clone() });
        }
    }
    state.step += 1;
    let c = state.config.clone();
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for p in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let m = state.m.entry(p.id.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(p.id.clone()).or_insert_with(|| vec![0.0; n]);
        let mask = p.mask.as_deref();
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for k in 0..n {
            if mask.is_some_and(|mk| !mk[k]) {
                continue;
            }
            let g = grad[k];
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            value[k] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        if p.role == ParamRole::Lambda {
            value.iter_mut().for_each(|l| *l = l.clamp(0.0, 1.0));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Parameter;

    fn brute_ce(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (row, &l) in logits.iter().zip(labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[l].exp() / z).ln();
        }
        total / labels.len() as f64
    }

    #[test]
    fn cross_entropy_examples() {
        let u = Tensor::zeros(vec![1, 10]);
        let (l, _) = cross_entropy(&u, &[3]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-15);

        let mut big = Tensor::zeros(vec![1, 3]);
        big.set2(0, 1, 1000.0);
        assert!(cross_entropy(&big, &[1]).unwrap().0.abs() < 1e-12);

        let rows = vec![vec![0.3, -1.2, 2.0], vec![1.5, 0.1, -0.7]];
        let t = Tensor::from_rows(&rows);
        let (l, _) = cross_entropy(&t, &[2, 0]).unwrap();
        assert!((l - brute_ce(&rows, &[2, 0])).abs() < 1e-12);

        assert!(matches!(cross_entropy(&t, &[3, 0]), Err(Error::Label { .. })));
    }

    #[test]
    fn cross_entropy_grad_matches_fd() {
        let rows = vec![vec![0.3, -1.2, 2.0], vec![1.5, 0.1, -0.7]];
        let t = Tensor::from_rows(&rows);
        let (_, g) = cross_entropy(&t, &[1, 2]).unwrap();
        let h = 1e-5;
        for k in 0..6 {
            let mut p = t.clone();
            p.data_mut()[k] += h;
            let mut m = t.clone();
            m.data_mut()[k] -= h;
            let fd = (cross_entropy(&p, &[1, 2]).unwrap().0 - cross_entropy(&m, &[1, 2]).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).0, 0.0);
        assert_eq!(mse(&[0.0], &[2.0]).0, 4.0);
        let p = [0.5, -1.0, 2.0, 3.0, 0.0];
        let t = [1.0, 1.0, 1.0, 1.0, 1.0];
        let hand = (0.25 + 4.0 + 1.0 + 4.0 + 1.0) / 5.0;
        assert!((mse(&p, &t).0 - hand).abs() < 1e-15);
    }

    #[test]
    fn accuracy_examples() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 1.0], vec![0.0, 0.0]]);
        assert_eq!(accuracy(&t, &[0, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&t, &[1, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&t, &[0, 1, 0, 1]).unwrap(), 0.75);
    }

    fn scalar_set(v: f64, role: ParamRole) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert(Parameter::new("w", Tensor::scalar(v), role, true)).unwrap();
        ps
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut ps = scalar_set(0.0, ParamRole::Bias);
        ps.get_mut("w").unwrap().grad = Tensor::scalar(1.0);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut ps, &mut st).unwrap();
        let w = ps.get("w").unwrap().value.data()[0];
        assert!((w + 0.001).abs() < 1e-10);
    }

    #[test]
    fn zero_grad_and_masks_hold_values() {
        let mut ps = scalar_set(0.7, ParamRole::Bias);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps.get("w").unwrap().value.data()[0], 0.7);
        assert_eq!(st.step, 1);

        let mut ps = ParamSet::new();
        let mut p = Parameter::new("w", Tensor::vector(vec![1.0, 2.0]), ParamRole::SharedWeight, true);
        p.set_mask(vec![true, false]).unwrap();
        p.grad = Tensor::vector(vec![1.0, 5.0]);
        ps.insert(p).unwrap();
        adam_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps.get("w").unwrap().value.data()[1], 2.0);
        assert_ne!(ps.get("w").unwrap().value.data()[0], 1.0);
    }

    #[test]
    fn lambda_clamped_and_divergence_reported() {
        let mut ps = scalar_set(0.9995, ParamRole::Lambda);
        ps.get_mut("w").unwrap().grad = Tensor::scalar(-1.0);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps.get("w").unwrap().value.data()[0], 1.0);

        ps.get_mut("w").unwrap().grad = Tensor::scalar(f64::NAN);
        match adam_step(&mut ps, &mut st) {
            Err(Error::Divergence { id }) => assert_eq!(id, "w"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn first_update_sign_is_scale_invariant() {
        for c in [0.01, 1.0, 300.0] {
            let mut ps = ParamSet::new();
            let mut p = Parameter::new("w", Tensor::vector(vec![0.0; 3]), ParamRole::Bias, true);
            p.grad = Tensor::vector(vec![c, -2.0 * c, 0.5 * c]);
            ps.insert(p).unwrap();
            let mut st = AdamState::new(AdamConfig::default());
            adam_step(&mut ps, &mut st).unwrap();
            let v = ps.get("w").unwrap().value.data().to_vec();
            assert!(v[0] < 0.0 && v[1] > 0.0 && v[2] < 0.0);
        }
    }
}
