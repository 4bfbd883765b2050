//! Prototype-based domain-specific batch normalization.
//!
//! Training keeps one affine/statistics branch per source domain and routes
//! each (domain-homogeneous) batch through its own branch with batch
//! statistics. Inference on unseen data has no branch of its own: the output
//! is a mixture of all branches, weighted by the softmax of cosine
//! similarities between the batch's backbone feature and the per-domain
//! prototypes maintained alongside the statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protomem::DomainPrototypes;
use crate::types::cosine;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Whether this branch has seen at least one training batch.
    pub populated: bool,
}

impl BranchState {
    fn new(channels: usize) -> Self {
        BranchState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            populated: false,
        }
    }
}

/// Per-domain normalization branches plus the domain prototypes driving the
/// inference-time mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsbnState {
    pub branches: Vec<BranchState>,
    pub channels: usize,
    pub epsilon: f64,
    /// Running-statistics momentum, shared with the prototype update rule.
    pub momentum: f64,
    pub zeta_temperature: f64,
    pub domain_protos: DomainPrototypes,
}

/// Intermediate values needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub domain: usize,
    pub x_hat: Vec<Vec<f64>>,
    pub inv_std: Vec<f64>,
}

impl DsbnState {
    pub fn new(
        num_domains: usize,
        channels: usize,
        backbone_dim: usize,
        momentum: f64,
        epsilon: f64,
        zeta_temperature: f64,
    ) -> Self {
        DsbnState {
            branches: (0..num_domains).map(|_| BranchState::new(channels)).collect(),
            channels,
            epsilon,
            momentum,
            zeta_temperature,
            domain_protos: DomainPrototypes::new(num_domains, backbone_dim, momentum),
        }
    }

    pub fn num_domains(&self) -> usize {
        self.branches.len()
    }

    /// Normalize a batch with its own statistics through one branch, without
    /// touching any state. Returns the output and the backward cache.
    pub fn normalize_batch(
        &self,
        x: &[Vec<f64>],
        domain: usize,
    ) -> Result<(Vec<Vec<f64>>, BnCache)> {
        if x.is_empty() {
            return Err(Error::Contract("batch must be non-empty".into()));
        }
        if domain >= self.branches.len() {
            return Err(Error::Contract(format!(
                "domain {domain} out of range ({} branches)",
                self.branches.len()
            )));
        }
        let b = x.len() as f64;
        let c = self.channels;
        let branch = &self.branches[domain];

        let mut mean = vec![0.0; c];
        for row in x {
            debug_assert_eq!(row.len(), c);
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= b;
        }
        let mut var = vec![0.0; c];
        for row in x {
            for k in 0..c {
                let d = row[k] - mean[k];
                var[k] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= b;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();

        let mut x_hat = vec![vec![0.0; c]; x.len()];
        let mut y = vec![vec![0.0; c]; x.len()];
        for (i, row) in x.iter().enumerate() {
            for k in 0..c {
                let h = (row[k] - mean[k]) * inv_std[k];
                x_hat[i][k] = h;
                y[i][k] = branch.gamma[k] * h + branch.beta[k];
            }
        }
        Ok((
            y,
            BnCache {
                domain,
                x_hat,
                inv_std,
            },
        ))
    }

    /// Training forward: batch-statistics normalization through the domain's
    /// branch, plus the state updates (running statistics by momentum, domain
    /// prototype from the batch-mean backbone feature).
    pub fn forward_train(
        &mut self,
        x: &[Vec<f64>],
        domain: usize,
        backbone_mean: &[f64],
    ) -> Result<(Vec<Vec<f64>>, BnCache)> {
        let (y, cache) = self.normalize_batch(x, domain)?;
        self.update_running_stats(x, domain, backbone_mean);
        Ok((y, cache))
    }

    /// The state-update half of `forward_train`: fold the batch statistics
    /// into the running statistics and the batch-mean backbone feature into
    /// the domain prototype.
    pub fn update_running_stats(&mut self, x: &[Vec<f64>], domain: usize, backbone_mean: &[f64]) {
        let b = x.len() as f64;
        let m = self.momentum;
        let branch = &mut self.branches[domain];
        for k in 0..self.channels {
            let mean_k: f64 = x.iter().map(|r| r[k]).sum::<f64>() / b;
            let var_k: f64 =
                x.iter().map(|r| (r[k] - mean_k) * (r[k] - mean_k)).sum::<f64>() / b;
            if branch.populated {
                branch.running_mean[k] = m * branch.running_mean[k] + (1.0 - m) * mean_k;
                branch.running_var[k] = m * branch.running_var[k] + (1.0 - m) * var_k;
            } else {
                branch.running_mean[k] = mean_k;
                branch.running_var[k] = var_k;
            }
        }
        branch.populated = true;
        self.domain_protos.observe(domain, backbone_mean);
    }

    /// Backward through `normalize_batch` / `forward_train`.
    /// Returns (grad_x, grad_gamma, grad_beta).
    pub fn backward(
        &self,
        cache: &BnCache,
        grad_y: &[Vec<f64>],
    ) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let b = grad_y.len() as f64;
        let c = self.channels;
        let branch = &self.branches[cache.domain];

        let mut grad_beta = vec![0.0; c];
        let mut grad_gamma = vec![0.0; c];
        for (i, row) in grad_y.iter().enumerate() {
            for k in 0..c {
                grad_beta[k] += row[k];
                grad_gamma[k] += row[k] * cache.x_hat[i][k];
            }
        }
        let mut grad_x = vec![vec![0.0; c]; grad_y.len()];
        for (i, row) in grad_y.iter().enumerate() {
            for k in 0..c {
                grad_x[i][k] = branch.gamma[k] * cache.inv_std[k] / b
                    * (b * row[k] - grad_beta[k] - cache.x_hat[i][k] * grad_gamma[k]);
            }
        }
        (grad_x, grad_gamma, grad_beta)
    }

    /// Evaluation through one branch with its running statistics.
    pub fn forward_eval_branch(&self, domain: usize, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let branch = self.branches.get(domain).ok_or_else(|| {
            Error::Contract(format!("domain {domain} out of range"))
        })?;
        if !branch.populated {
            return Err(Error::Inference(format!(
                "branch for domain {domain} has no running statistics"
            )));
        }
        let c = self.channels;
        let inv_std: Vec<f64> = branch
            .running_var
            .iter()
            .map(|v| 1.0 / (v + self.epsilon).sqrt())
            .collect();
        Ok(x.iter()
            .map(|row| {
                (0..c)
                    .map(|k| {
                        branch.gamma[k] * (row[k] - branch.running_mean[k]) * inv_std[k]
                            + branch.beta[k]
                    })
                    .collect()
            })
            .collect())
    }

    /// Mixture weights for a batch: softmax over cosine similarities between
    /// the batch-mean backbone feature and the domain prototypes.
    pub fn mixture_weights(&self, backbone_mean: &[f64]) -> Result<Vec<f64>> {
        let k = self.num_domains();
        let mut sims = Vec::with_capacity(k);
        for d in 0..k {
            let proto = self.domain_protos.get(d).ok_or_else(|| {
                Error::Inference(format!("domain {d} has no prototype; cannot weight mixture"))
            })?;
            sims.push(cosine(backbone_mean, proto) / self.zeta_temperature);
        }
        let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|s| (s - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }

    /// Inference on a batch from an unseen domain: the zeta-weighted mixture
    /// of all branches, each using its running statistics.
    pub fn infer_mixture(&self, x: &[Vec<f64>], backbone_mean: &[f64]) -> Result<Vec<Vec<f64>>> {
        for (d, branch) in self.branches.iter().enumerate() {
            if !branch.populated {
                return Err(Error::Inference(format!(
                    "branch for domain {d} has no running statistics"
                )));
            }
        }
        let zeta = self.mixture_weights(backbone_mean)?;
        let mut out: Option<Vec<Vec<f64>>> = None;
        for (d, w) in zeta.iter().enumerate() {
            let y = self.forward_eval_branch(d, x)?;
            match &mut out {
                None => {
                    let mut first = y;
                    for row in first.iter_mut() {
                        for v in row.iter_mut() {
                            *v *= w;
                        }
                    }
                    out = Some(first);
                }
                Some(acc) => {
                    for (a, row) in acc.iter_mut().zip(&y) {
                        for (av, v) in a.iter_mut().zip(row) {
                            *av += w * v;
                        }
                    }
                }
            }
        }
        Ok(out.unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcheck::max_grad_rel_err;
    use crate::rng::Rng;

    fn batch(rng: &mut Rng, n: usize, c: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..c).map(|_| scale * rng.normal()).collect())
            .collect()
    }

    #[test]
    fn constant_batch_maps_to_zero() {
        let mut st = DsbnState::new(2, 3, 4, 0.9, 1e-5, 1.0);
        let x = vec![vec![7.0, -2.0, 0.5]; 5];
        let (y, _) = st.forward_train(&x, 0, &[0.0; 4]).unwrap();
        for row in &y {
            for v in row {
                assert!(v.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn affine_parameters_shift_and_scale() {
        let mut st = DsbnState::new(1, 1, 2, 0.9, 1e-12, 1.0);
        st.branches[0].gamma = vec![2.0];
        st.branches[0].beta = vec![1.0];
        // Batch whose standardized values are exactly -1 and +1.
        let x = vec![vec![-1.0], vec![1.0]];
        let (y, _) = st.forward_train(&x, 0, &[0.0; 2]).unwrap();
        assert!((y[1][0] - 3.0).abs() < 1e-6, "{}", y[1][0]);
        assert!((y[0][0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn output_moments_match_affine_parameters() {
        let mut rng = Rng::new(1);
        let mut st = DsbnState::new(1, 4, 2, 0.9, 1e-5, 1.0);
        st.branches[0].gamma = vec![1.5, 0.5, 2.0, 1.0];
        st.branches[0].beta = vec![0.2, -0.3, 0.0, 1.0];
        // Data variance >> epsilon so the epsilon bias stays below 1e-6.
        let x = batch(&mut rng, 256, 4, 10.0);
        let (y, _) = st.forward_train(&x, 0, &[0.0; 2]).unwrap();
        for k in 0..4 {
            let mean: f64 = y.iter().map(|r| r[k]).sum::<f64>() / y.len() as f64;
            let var: f64 =
                y.iter().map(|r| (r[k] - mean) * (r[k] - mean)).sum::<f64>() / y.len() as f64;
            assert!((mean - st.branches[0].beta[k]).abs() < 1e-6);
            let g2 = st.branches[0].gamma[k] * st.branches[0].gamma[k];
            assert!((var - g2).abs() / g2 < 1e-6, "var {var} vs {g2}");
        }
    }

    #[test]
    fn batch_of_one_uses_epsilon_path() {
        let mut st = DsbnState::new(1, 2, 2, 0.9, 1e-5, 1.0);
        let x = vec![vec![3.0, -1.0]];
        let (y, _) = st.forward_train(&x, 0, &[0.0; 2]).unwrap();
        assert!(y[0].iter().all(|v| v.is_finite()));
        assert!(y[0].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let mut st = DsbnState::new(2, 3, 2, 0.9, 1e-5, 1.0);
            for b in st.branches.iter_mut() {
                b.gamma = (0..3).map(|_| rng.range(0.5, 2.0)).collect();
                b.beta = rng.normal_vec(3);
            }
            let n = 5;
            let x = batch(&mut rng, n, 3, 1.0);
            // Random linear functional of the output as the scalar loss.
            let coeff = batch(&mut rng, n, 3, 1.0);
            let loss_of = |xs: &[Vec<f64>], st: &DsbnState| {
                let (y, _) = st.normalize_batch(xs, 1).unwrap();
                y.iter()
                    .zip(&coeff)
                    .map(|(r, c)| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
                    .sum::<f64>()
            };

            let (_, cache) = st.normalize_batch(&x, 1).unwrap();
            let (gx, ggamma, gbeta) = st.backward(&cache, &coeff);

            // d/dx
            let flat: Vec<f64> = x.iter().flatten().copied().collect();
            let fx = |flat: &[f64]| {
                let xs: Vec<Vec<f64>> = flat.chunks(3).map(|c| c.to_vec()).collect();
                loss_of(&xs, &st)
            };
            let gx_flat: Vec<f64> = gx.iter().flatten().copied().collect();
            assert!(max_grad_rel_err(&fx, &flat, &gx_flat, 1e-5) < 1e-4);

            // d/dgamma and d/dbeta
            let fg = |g: &[f64]| {
                let mut s2 = st.clone();
                s2.branches[1].gamma = g.to_vec();
                loss_of(&x, &s2)
            };
            assert!(max_grad_rel_err(&fg, &st.branches[1].gamma, &ggamma, 1e-5) < 1e-4);
            let fb = |bv: &[f64]| {
                let mut s2 = st.clone();
                s2.branches[1].beta = bv.to_vec();
                loss_of(&x, &s2)
            };
            assert!(max_grad_rel_err(&fb, &st.branches[1].beta, &gbeta, 1e-5) < 1e-4);
        }
    }

    #[test]
    fn single_domain_mixture_is_bitwise_standard_bn() {
        let mut rng = Rng::new(3);
        let mut st = DsbnState::new(1, 3, 2, 0.9, 1e-5, 1.0);
        st.branches[0].gamma = vec![1.3, 0.7, 2.0];
        st.branches[0].beta = vec![0.1, 0.0, -0.5];
        let x = batch(&mut rng, 16, 3, 1.0);
        st.forward_train(&x, 0, &[1.0, 0.0]).unwrap();
        let x2 = batch(&mut rng, 8, 3, 1.0);
        let plain = st.forward_eval_branch(0, &x2).unwrap();
        let mixed = st.infer_mixture(&x2, &[0.3, 0.4]).unwrap();
        assert_eq!(plain, mixed);
    }

    #[test]
    fn softmax_weights_for_aligned_prototype() {
        let mut st = DsbnState::new(2, 1, 2, 0.9, 1e-5, 1.0);
        // C1 = input direction, C2 orthogonal.
        st.domain_protos.observe(0, &[1.0, 0.0]);
        st.domain_protos.observe(1, &[0.0, 1.0]);
        let zeta = st.mixture_weights(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((zeta[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((zeta[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((zeta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_branches_collapse_to_single_branch() {
        let mut rng = Rng::new(4);
        let mut st = DsbnState::new(3, 2, 2, 0.9, 1e-5, 1.0);
        let x = batch(&mut rng, 32, 2, 1.0);
        // Train each branch on the same batch so parameters coincide.
        for d in 0..3 {
            let mut proto = vec![0.0; 2];
            proto[d % 2] = 1.0;
            st.forward_train(&x, d, &proto).unwrap();
        }
        let x2 = batch(&mut rng, 8, 2, 1.0);
        let single = st.forward_eval_branch(0, &x2).unwrap();
        let mixed = st.infer_mixture(&x2, &[0.7, 0.7]).unwrap();
        for (a, b) in single.iter().flatten().zip(mixed.iter().flatten()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn unpopulated_branch_is_an_inference_error() {
        let mut st = DsbnState::new(2, 2, 2, 0.9, 1e-5, 1.0);
        let x = vec![vec![1.0, 2.0]];
        st.forward_train(&x, 0, &[1.0, 0.0]).unwrap();
        let err = st.infer_mixture(&x, &[1.0, 0.0]).unwrap_err();
        match err {
            Error::Inference(msg) => assert!(msg.contains("domain 1"), "{msg}"),
            other => panic!("expected inference error, got {other:?}"),
        }
    }

    #[test]
    fn mixture_is_linear_in_zeta() {
        let mut rng = Rng::new(5);
        let mut st = DsbnState::new(2, 2, 2, 0.9, 1e-5, 1.0);
        for d in 0..2 {
            let x = batch(&mut rng, 16, 2, 1.0);
            let mut proto = vec![0.0; 2];
            proto[d] = 1.0;
            st.forward_train(&x, d, &proto).unwrap();
        }
        let x = batch(&mut rng, 4, 2, 1.0);
        let y0 = st.forward_eval_branch(0, &x).unwrap();
        let y1 = st.forward_eval_branch(1, &x).unwrap();
        let zeta = st.mixture_weights(&[0.9, 0.1]).unwrap();
        let mixed = st.infer_mixture(&x, &[0.9, 0.1]).unwrap();
        // Perturbing zeta_0 by delta moves the output by exactly delta * y0.
        let delta = 0.01;
        for i in 0..x.len() {
            for k in 0..2 {
                let base = zeta[0] * y0[i][k] + zeta[1] * y1[i][k];
                assert!((mixed[i][k] - base).abs() < 1e-12);
                let perturbed = (zeta[0] + delta) * y0[i][k] + zeta[1] * y1[i][k];
                assert!((perturbed - base - delta * y0[i][k]).abs() < 1e-12);
            }
        }
    }
}
