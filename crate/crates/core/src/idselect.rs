//! Channel-wise selection of ID-relevant embedding dimensions.
//!
//! A linear probe is fit to classify the memory prototypes by identity; the
//! mask comes from greedy backward elimination: dimensions are removed one
//! at a time, always the one whose ablation hurts the probe's accuracy the
//! least, giving a nested chain of masks that does not depend on the budget.
//! The returned mask is the deepest chain element whose retained accuracy
//! stays within the drop budget t of the baseline, which makes the mask size
//! monotone in t by construction. The complement of the mask defines the
//! domain-specific columns fed to the decorrelation losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protomem::IdentityMemory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdSelectConfig {
    /// Metric drop budget t: the retained accuracy may fall at most this far
    /// below the unmasked baseline.
    pub drop_budget: f64,
    pub probe_iterations: usize,
    pub probe_learning_rate: f64,
}

impl Default for IdSelectConfig {
    fn default() -> Self {
        IdSelectConfig {
            drop_budget: 0.02,
            probe_iterations: 400,
            probe_learning_rate: 1.0,
        }
    }
}

/// Multinomial linear probe over prototypes (bias-free; logits = W m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// One weight vector per class, indexed like `classes`.
    pub weights: Vec<Vec<f64>>,
    /// Class index -> identity label.
    pub classes: Vec<u32>,
}

impl Probe {
    /// Predicted class index for a (masked) prototype; ties break to the
    /// lowest class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (c, w) in self.weights.iter().enumerate() {
            let v = crate::types::dot(w, x);
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best
    }
}

/// Fit the probe on the identity prototypes by full-batch gradient descent
/// on the softmax cross-entropy. Deterministic: zero initialization, fixed
/// iteration count.
pub fn train_probe(memory: &IdentityMemory, cfg: &IdSelectConfig) -> Result<Probe> {
    let rows = memory.rows();
    let l = rows.len();
    if l < 2 {
        return Err(Error::Config(format!(
            "probe needs at least 2 identities, have {l}"
        )));
    }
    let d = memory.dim;
    let mut weights = vec![vec![0.0; d]; l];
    let lr = cfg.probe_learning_rate;

    for _ in 0..cfg.probe_iterations {
        let mut grad = vec![vec![0.0; d]; l];
        for (j, (_, m)) in rows.iter().enumerate() {
            let logits: Vec<f64> = weights.iter().map(|w| crate::types::dot(w, m)).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - mx).exp()).sum();
            for (c, z) in logits.iter().enumerate() {
                let p = (z - mx).exp() / sum;
                let coeff = p - if c == j { 1.0 } else { 0.0 };
                for (g, mv) in grad[c].iter_mut().zip(m.iter()) {
                    *g += coeff * mv;
                }
            }
        }
        let scale = lr / l as f64;
        for (w, g) in weights.iter_mut().zip(&grad) {
            for (wv, gv) in w.iter_mut().zip(g) {
                *wv -= scale * gv;
            }
        }
    }

    Ok(Probe {
        weights,
        classes: rows.iter().map(|(id, _)| *id).collect(),
    })
}

/// Top-1 accuracy of the probe on prototypes masked by `alpha`.
pub fn masked_accuracy(memory: &IdentityMemory, probe: &Probe, alpha: &[bool]) -> f64 {
    let rows = memory.rows();
    let mut correct = 0;
    for (j, (_, m)) in rows.iter().enumerate() {
        let masked: Vec<f64> = m
            .iter()
            .zip(alpha)
            .map(|(v, keep)| if *keep { *v } else { 0.0 })
            .collect();
        if probe.predict(&masked) == j {
            correct += 1;
        }
    }
    correct as f64 / rows.len() as f64
}

/// Binary channel mask with the metrics that justify it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub alpha: Vec<bool>,
    pub retained_metric: f64,
    pub baseline_metric: f64,
}

impl ChannelMask {
    pub fn ones(dim: usize) -> Self {
        ChannelMask {
            alpha: vec![true; dim],
            retained_metric: 1.0,
            baseline_metric: 1.0,
        }
    }

    pub fn num_retained(&self) -> usize {
        self.alpha.iter().filter(|b| **b).count()
    }

    /// Indices of retained (ID-relevant) dimensions.
    pub fn retained_dims(&self) -> Vec<usize> {
        self.alpha
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }

    /// Indices of masked-out (domain-specific) dimensions.
    pub fn dropped_dims(&self) -> Vec<usize> {
        self.alpha
            .iter()
            .enumerate()
            .filter_map(|(i, b)| (!b).then_some(i))
            .collect()
    }
}

/// Greedy backward elimination under the accuracy-drop budget.
pub fn select_mask(
    memory: &IdentityMemory,
    probe: &Probe,
    drop_budget: f64,
) -> Result<ChannelMask> {
    if drop_budget < 0.0 {
        return Err(Error::Config(format!(
            "drop budget must be non-negative, got {drop_budget}"
        )));
    }
    let d = memory.dim;
    let all = vec![true; d];
    let baseline = masked_accuracy(memory, probe, &all);
    if drop_budget >= baseline {
        return Err(Error::Config(format!(
            "drop budget {drop_budget} >= baseline metric {baseline}: every mask \
             (including the degenerate all-zero one) would satisfy the constraint"
        )));
    }

    // Budget-independent elimination chain: at each step drop the dimension
    // whose removal keeps the highest accuracy (ties to the lowest index).
    // The chain leaves at least one dimension in place.
    let mut chain: Vec<(Vec<bool>, f64)> = Vec::with_capacity(d);
    let mut current = all;
    for _ in 0..(d - 1) {
        let mut best: Option<(f64, usize)> = None;
        for k in 0..d {
            if !current[k] {
                continue;
            }
            let mut trial = current.clone();
            trial[k] = false;
            let acc = masked_accuracy(memory, probe, &trial);
            if best.map_or(true, |(ba, _)| acc > ba) {
                best = Some((acc, k));
            }
        }
        let (acc, k) = best.expect("at least one removable dimension");
        current[k] = false;
        chain.push((current.clone(), acc));
    }

    // Deepest chain element still within budget.
    let mut alpha = vec![true; d];
    let mut retained = baseline;
    for (mask, acc) in &chain {
        if *acc >= baseline - drop_budget {
            alpha = mask.clone();
            retained = *acc;
        }
    }

    if alpha.iter().all(|b| !b) {
        return Err(Error::Config(
            "mask selection degenerated to the all-zero mask".into(),
        ));
    }
    Ok(ChannelMask {
        alpha,
        retained_metric: retained,
        baseline_metric: baseline,
    })
}
