//! Training objectives with analytic gradients: the memory-bank softmax
//! contrast (with and without intra-frame negatives), the inter-frame
//! triplet, linear cosine decorrelation, and the kernel cross-covariance
//! regularizer in exact and random-feature forms.
//!
//! No autodiff: every gradient here is hand-derived and checked against
//! central finite differences in the tests and the acceptance suite.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protomem::{IdentityMemory, NegativeQueue};
use crate::rng::Rng;
use crate::types::{dot, norm, Embedding};

/// A scalar loss value plus gradients keyed by input name.
#[derive(Debug, Clone, Default)]
pub struct LossOutput {
    pub value: f64,
    pub gradients: BTreeMap<String, Vec<f64>>,
}

impl LossOutput {
    pub fn grad(&self, name: &str) -> &[f64] {
        self.gradients
            .get(name)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    GaussianRbf,
    RandomFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the inputs (treated as a constant when
    /// differentiating; use `Fixed` when validating gradients).
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: Bandwidth,
    pub num_random_features: usize,
    /// Seed for the random-feature draw; fixed seed, fixed output.
    pub rff_seed: u64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            kind: KernelKind::GaussianRbf,
            bandwidth: Bandwidth::Median,
            num_random_features: 256,
            rff_seed: 1,
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(b) = self.bandwidth {
            if b <= 0.0 {
                return Err(Error::Config(format!("bandwidth must be positive, got {b}")));
            }
        }
        if self.kind == KernelKind::RandomFeatures && self.num_random_features == 0 {
            return Err(Error::Config("num_random_features must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Memory-bank softmax contrast
// ---------------------------------------------------------------------------

/// Shared core of the memory contrast losses:
///
///   -log[ exp(v+^T x / tau) / sum_z exp(z^T x / tau) ]
///
/// where z ranges over all identity prototypes, the negative queue, and any
/// extra negatives. Returns the loss and its gradient w.r.t. x; the memory
/// entries are treated as constants (they are updated after the step, not
/// through it).
/// `num_intra` marks how many trailing entries are same-batch negatives:
/// unlike the memory rows, those depend on the model, so their gradients
/// (softmax weight times x / tau each) are reported under "intra".
fn memory_contrast(
    x: &[f64],
    positive: &[f64],
    entries: &[&[f64]],
    num_intra: usize,
    tau: f64,
) -> LossOutput {
    let logits: Vec<f64> = entries.iter().map(|z| dot(z, x) / tau).collect();
    let z_pos = dot(positive, x) / tau;
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let log_z = m + sum_exp.ln();
    let value = log_z - z_pos;

    let mut grad = vec![0.0; x.len()];
    let mut grad_intra = vec![0.0; num_intra * x.len()];
    let first_intra = entries.len() - num_intra;
    for (i, z) in entries.iter().enumerate() {
        let p = (logits[i] - log_z).exp();
        for (g, zi) in grad.iter_mut().zip(z.iter()) {
            *g += p * zi / tau;
        }
        if i >= first_intra {
            let l = i - first_intra;
            for (g, xi) in grad_intra[l * x.len()..(l + 1) * x.len()].iter_mut().zip(x) {
                *g = p * xi / tau;
            }
        }
    }
    for (g, vi) in grad.iter_mut().zip(positive.iter()) {
        *g -= vi / tau;
    }

    let mut gradients = BTreeMap::new();
    gradients.insert("x".to_string(), grad);
    if num_intra > 0 {
        gradients.insert("intra".to_string(), grad_intra);
    }
    LossOutput { value, gradients }
}

/// Memory contrast against the identity prototypes plus the unlabeled
/// negative queue. Memory updates are not performed here.
pub fn oim_loss(
    x: &Embedding,
    label: u32,
    memory: &IdentityMemory,
    queue: &NegativeQueue,
    tau: f64,
) -> Result<LossOutput> {
    id_loss_raw(x.as_slice(), label, memory, queue, &[], tau)
}

/// The intra-frame variant: the denominator is extended with same-frame
/// negative samples (other identities and background clutter). Reduces
/// exactly to `oim_loss` when `intra_negatives` is empty.
pub fn id_loss(
    x: &Embedding,
    label: u32,
    memory: &IdentityMemory,
    queue: &NegativeQueue,
    intra_negatives: &[Embedding],
    tau: f64,
) -> Result<LossOutput> {
    id_loss_raw(x.as_slice(), label, memory, queue, intra_negatives, tau)
}

/// `id_loss` on a raw vector. The loss only involves dot products with x, so
/// it is well-defined off the unit sphere; finite-difference checks and the
/// trainer's backward pass use this entry point.
pub fn id_loss_raw(
    x: &[f64],
    label: u32,
    memory: &IdentityMemory,
    queue: &NegativeQueue,
    intra_negatives: &[Embedding],
    tau: f64,
) -> Result<LossOutput> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let rows = memory.rows();
    let pos_index = rows
        .iter()
        .position(|(id, _)| *id == label)
        .ok_or_else(|| Error::Lookup(format!("identity {label} not in memory")))?;
    let mut entries: Vec<&[f64]> = rows.iter().map(|(_, v)| *v).collect();
    for u in queue.iter() {
        entries.push(u);
    }
    for c in intra_negatives {
        entries.push(c.as_slice());
    }
    let positive = rows[pos_index].1;
    Ok(memory_contrast(x, positive, &entries, intra_negatives.len(), tau))
}

// ---------------------------------------------------------------------------
// Inter-frame triplet
// ---------------------------------------------------------------------------

/// Cosine distance 1 - cos(a, v) and its gradient w.r.t. a.
fn cos_dist_grad(a: &[f64], v: &[f64]) -> (f64, Vec<f64>) {
    let na = norm(a);
    let nv = norm(v);
    let c = dot(a, v) / (na * nv);
    let grad: Vec<f64> = a
        .iter()
        .zip(v)
        .map(|(ai, vi)| -(vi / (na * nv) - c * ai / (na * na)))
        .collect();
    (1.0 - c, grad)
}

/// Hinge triplet for one anchor with hard positive / hard negative mining:
///
///   [ margin + max_pos d(a, v) - min_neg d(a, v) ]+
///
/// with d = 1 - cosine. Empty positives or negatives skip the term (zero
/// loss, zero gradient); the subgradient at the hinge kink is zero.
pub fn ie_triplet_loss(
    anchor: &[f64],
    positives: &[Embedding],
    negatives: &[Embedding],
    margin: f64,
) -> LossOutput {
    let mut out = LossOutput::default();
    out.gradients
        .insert("anchor".to_string(), vec![0.0; anchor.len()]);
    if positives.is_empty() || negatives.is_empty() {
        return out;
    }
    let (pi, pd) = positives
        .iter()
        .map(|v| 1.0 - crate::types::cosine(anchor, v))
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, d)| {
            if d > acc.1 {
                (i, d)
            } else {
                acc
            }
        });
    let (ni, nd) = negatives
        .iter()
        .map(|v| 1.0 - crate::types::cosine(anchor, v))
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, d)| {
            if d < acc.1 {
                (i, d)
            } else {
                acc
            }
        });
    let hinge = margin + pd - nd;
    if hinge <= 0.0 {
        return out;
    }
    out.value = hinge;
    let (_, gp) = cos_dist_grad(anchor, &positives[pi]);
    let (_, gn) = cos_dist_grad(anchor, &negatives[ni]);
    let g = out.gradients.get_mut("anchor").unwrap();
    for ((gi, p), n) in g.iter_mut().zip(&gp).zip(&gn) {
        *gi = p - n;
    }
    out
}

// ---------------------------------------------------------------------------
// Linear decorrelation
// ---------------------------------------------------------------------------

/// Cosine similarity of two column vectors over a batch, with gradients for
/// both columns. The linear half of the decorrelation objective.
pub fn cosine_decorr(z_id: &[f64], z_ds: &[f64]) -> Result<LossOutput> {
    if z_id.len() != z_ds.len() {
        return Err(Error::Contract(format!(
            "column length mismatch: {} vs {}",
            z_id.len(),
            z_ds.len()
        )));
    }
    let n1 = norm(z_id);
    let n2 = norm(z_ds);
    if n1 <= 1e-12 || n2 <= 1e-12 {
        return Err(Error::DegenerateInput(
            "cosine_decorr requires non-zero columns".into(),
        ));
    }
    let c = dot(z_id, z_ds) / (n1 * n2);
    let g1: Vec<f64> = z_id
        .iter()
        .zip(z_ds)
        .map(|(a, b)| b / (n1 * n2) - c * a / (n1 * n1))
        .collect();
    let g2: Vec<f64> = z_id
        .iter()
        .zip(z_ds)
        .map(|(a, b)| a / (n1 * n2) - c * b / (n2 * n2))
        .collect();
    let mut gradients = BTreeMap::new();
    gradients.insert("z_id".to_string(), g1);
    gradients.insert("z_ds".to_string(), g2);
    Ok(LossOutput {
        value: c,
        gradients,
    })
}

// ---------------------------------------------------------------------------
// HSIC cross-covariance regularizer
// ---------------------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance; the usual bandwidth heuristic.
/// Falls back to 1 when all rows coincide.
pub fn median_bandwidth(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(sq_dist(&rows[i], &rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn resolve_bandwidth(spec: Bandwidth, rows: &[Vec<f64>]) -> f64 {
    match spec {
        Bandwidth::Fixed(b) => b,
        Bandwidth::Median => median_bandwidth(rows),
    }
}

fn gram_linear(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = dot(&rows[i], &rows[j]);
            g[i][j] = v;
            g[j][i] = v;
        }
    }
    g
}

fn gram_rbf(rows: &[Vec<f64>], sigma: f64) -> Vec<Vec<f64>> {
    let n = rows.len();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        g[i][i] = 1.0;
        for j in (i + 1)..n {
            let v = (-sq_dist(&rows[i], &rows[j]) * inv).exp();
            g[i][j] = v;
            g[j][i] = v;
        }
    }
    g
}

/// Doubly center in place: K <- H K H with H = I - (1/n) 1 1^T.
fn center(k: &mut [Vec<f64>]) {
    let n = k.len();
    let mut row_mean = vec![0.0; n];
    let mut total = 0.0;
    for (i, row) in k.iter().enumerate() {
        let s: f64 = row.iter().sum();
        row_mean[i] = s / n as f64;
        total += s;
    }
    let grand = total / (n * n) as f64;
    for i in 0..n {
        for j in 0..n {
            k[i][j] += grand - row_mean[i] - row_mean[j];
        }
    }
}

/// tr(F H G H) / (n-1)^2 given raw Gram matrices.
pub fn hsic_from_grams(f: &[Vec<f64>], g: &[Vec<f64>]) -> f64 {
    let n = f.len();
    let mut gc = g.to_vec();
    center(&mut gc);
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += f[i][j] * gc[i][j];
        }
    }
    acc / ((n - 1) * (n - 1)) as f64
}

/// The cross-covariance regularizer tr(F H G H) / (n-1)^2 with gradients
/// w.r.t. both inputs, for the linear and Gaussian RBF kernels.
///
/// Inputs are n samples by p (resp. q) dimensions. With the median-heuristic
/// bandwidth the bandwidth is treated as a constant during differentiation.
pub fn hsic_fnorm(z_id: &[Vec<f64>], z_ds: &[Vec<f64>], spec: &KernelSpec) -> Result<LossOutput> {
    spec.validate()?;
    let n = z_id.len();
    if n < 2 {
        return Err(Error::Contract(format!("hsic needs n >= 2 samples, got {n}")));
    }
    if z_ds.len() != n {
        return Err(Error::Contract(format!(
            "sample count mismatch: {} vs {}",
            n,
            z_ds.len()
        )));
    }
    let denom = ((n - 1) * (n - 1)) as f64;

    match spec.kind {
        KernelKind::Linear => {
            let f = gram_linear(z_id);
            let g = gram_linear(z_ds);
            let value = hsic_from_grams(&f, &g);
            // dL/dZ = 2 (H K_other H) Z / (n-1)^2.
            let mut gc = g;
            center(&mut gc);
            let mut fc = f;
            center(&mut fc);
            let grad_id = mat_vecrows(&gc, z_id, 2.0 / denom);
            let grad_ds = mat_vecrows(&fc, z_ds, 2.0 / denom);
            Ok(pack_hsic(value, grad_id, grad_ds))
        }
        KernelKind::GaussianRbf => {
            let sigma_f = resolve_bandwidth(spec.bandwidth, z_id);
            let sigma_g = resolve_bandwidth(spec.bandwidth, z_ds);
            let f = gram_rbf(z_id, sigma_f);
            let g = gram_rbf(z_ds, sigma_g);
            let value = hsic_from_grams(&f, &g);
            let mut gc = g.clone();
            center(&mut gc);
            let mut fc = f.clone();
            center(&mut fc);
            let grad_id = rbf_grad(z_id, &f, &gc, sigma_f, denom);
            let grad_ds = rbf_grad(z_ds, &g, &fc, sigma_g, denom);
            Ok(pack_hsic(value, grad_id, grad_ds))
        }
        KernelKind::RandomFeatures => Err(Error::Config(
            "hsic_fnorm takes the linear or gaussian_rbf kernel; use hsic_random_features".into(),
        )),
    }
}

/// rows_out[k] = scale * sum_j M[k][j] * rows[j]  (flattened row-major).
fn mat_vecrows(m: &[Vec<f64>], rows: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let n = rows.len();
    let p = rows[0].len();
    let mut out = vec![0.0; n * p];
    for k in 0..n {
        for j in 0..n {
            let w = m[k][j] * scale;
            if w == 0.0 {
                continue;
            }
            for (o, x) in out[k * p..(k + 1) * p].iter_mut().zip(&rows[j]) {
                *o += w * x;
            }
        }
    }
    out
}

/// Gradient of tr(F H G H)/(n-1)^2 w.r.t. the rows behind the RBF Gram F,
/// with W = (H G H) frozen: dL/dz_k = -(2/(sigma^2 (n-1)^2))
/// sum_j W_kj F_kj (z_k - z_j).
fn rbf_grad(
    rows: &[Vec<f64>],
    f: &[Vec<f64>],
    w: &[Vec<f64>],
    sigma: f64,
    denom: f64,
) -> Vec<f64> {
    let n = rows.len();
    let p = rows[0].len();
    let scale = -2.0 / (sigma * sigma * denom);
    let mut out = vec![0.0; n * p];
    for k in 0..n {
        for j in 0..n {
            if j == k {
                continue;
            }
            let c = scale * w[k][j] * f[k][j];
            for d in 0..p {
                out[k * p + d] += c * (rows[k][d] - rows[j][d]);
            }
        }
    }
    out
}

fn pack_hsic(value: f64, grad_id: Vec<f64>, grad_ds: Vec<f64>) -> LossOutput {
    let mut gradients = BTreeMap::new();
    gradients.insert("z_id".to_string(), grad_id);
    gradients.insert("z_ds".to_string(), grad_ds);
    LossOutput { value, gradients }
}

/// Random Fourier feature map for the Gaussian RBF kernel: D frequencies
/// drawn from N(0, sigma^-2 I), phases uniform in [0, 2pi);
/// phi_r(z) = sqrt(2/D) cos(w_r . z + b_r).
struct FourierFeatures {
    freqs: Vec<Vec<f64>>,
    phases: Vec<f64>,
    scale: f64,
}

impl FourierFeatures {
    fn draw(dim: usize, d: usize, sigma: f64, rng: &mut Rng) -> Self {
        let freqs = (0..d)
            .map(|_| (0..dim).map(|_| rng.normal() / sigma).collect())
            .collect();
        let phases = (0..d)
            .map(|_| rng.range(0.0, 2.0 * std::f64::consts::PI))
            .collect();
        FourierFeatures {
            freqs,
            phases,
            scale: (2.0 / d as f64).sqrt(),
        }
    }

    fn map(&self, z: &[f64]) -> Vec<f64> {
        self.freqs
            .iter()
            .zip(&self.phases)
            .map(|(w, b)| self.scale * (dot(w, z) + b).cos())
            .collect()
    }

    /// d phi_r / d z = -scale * sin(w_r . z + b_r) * w_r; returns the sin
    /// factors so the caller can assemble gradients cheaply.
    fn sines(&self, z: &[f64]) -> Vec<f64> {
        self.freqs
            .iter()
            .zip(&self.phases)
            .map(|(w, b)| (dot(w, z) + b).sin())
            .collect()
    }
}

/// Random-feature approximation of the RBF cross-covariance regularizer:
/// the exact statistic computed on approximate Gram matrices
/// Phi Phi^T, which equals the squared F-norm of the centered
/// cross-covariance of the two feature maps. Converges to the exact RBF
/// value as the feature count grows; deterministic for a fixed seed.
pub fn hsic_random_features(
    z_id: &[Vec<f64>],
    z_ds: &[Vec<f64>],
    spec: &KernelSpec,
) -> Result<LossOutput> {
    if spec.kind != KernelKind::RandomFeatures {
        return Err(Error::Config(
            "hsic_random_features requires kind = random_features".into(),
        ));
    }
    spec.validate()?;
    let n = z_id.len();
    if n < 2 {
        return Err(Error::Contract(format!("hsic needs n >= 2 samples, got {n}")));
    }
    if z_ds.len() != n {
        return Err(Error::Contract(format!(
            "sample count mismatch: {} vs {}",
            n,
            z_ds.len()
        )));
    }
    let d = spec.num_random_features;
    let denom = ((n - 1) * (n - 1)) as f64;

    let sigma_f = resolve_bandwidth(spec.bandwidth, z_id);
    let sigma_g = resolve_bandwidth(spec.bandwidth, z_ds);
    let mut rng = Rng::new(spec.rff_seed);
    let ff_id = FourierFeatures::draw(z_id[0].len(), d, sigma_f, &mut rng);
    let ff_ds = FourierFeatures::draw(z_ds[0].len(), d, sigma_g, &mut rng);

    let phi_id: Vec<Vec<f64>> = z_id.iter().map(|z| ff_id.map(z)).collect();
    let phi_ds: Vec<Vec<f64>> = z_ds.iter().map(|z| ff_ds.map(z)).collect();

    let f = gram_linear(&phi_id);
    let g = gram_linear(&phi_ds);
    let value = hsic_from_grams(&f, &g);

    let mut gc = g;
    center(&mut gc);
    let mut fc = f;
    center(&mut fc);
    let grad_id = rff_grad(z_id, &phi_ds_weights(&gc, &phi_id), &ff_id, denom);
    let grad_ds = rff_grad(z_ds, &phi_ds_weights(&fc, &phi_ds), &ff_ds, denom);

    Ok(pack_hsic(value, grad_id, grad_ds))
}

/// M = W Phi  (n x D), the per-sample feature weights appearing in the
/// random-feature gradient.
fn phi_ds_weights(w: &[Vec<f64>], phi: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = phi.len();
    let d = phi[0].len();
    let mut m = vec![vec![0.0; d]; n];
    for k in 0..n {
        for j in 0..n {
            let wkj = w[k][j];
            if wkj == 0.0 {
                continue;
            }
            for r in 0..d {
                m[k][r] += wkj * phi[j][r];
            }
        }
    }
    m
}

/// dL/dz_k = (2/(n-1)^2) sum_r M_kr dphi_r(z_k)/dz_k.
fn rff_grad(rows: &[Vec<f64>], m: &[Vec<f64>], ff: &FourierFeatures, denom: f64) -> Vec<f64> {
    let n = rows.len();
    let p = rows[0].len();
    let mut out = vec![0.0; n * p];
    for k in 0..n {
        let sines = ff.sines(&rows[k]);
        for (r, freq) in ff.freqs.iter().enumerate() {
            let c = 2.0 / denom * m[k][r] * (-ff.scale * sines[r]);
            if c == 0.0 {
                continue;
            }
            for (o, w) in out[k * p..(k + 1) * p].iter_mut().zip(freq) {
                *o += c * w;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Combination
// ---------------------------------------------------------------------------

/// Weighted sum of loss terms; gradients with the same key are summed with
/// the same weights. Shapes under a shared key must agree.
pub fn combine(terms: &[(f64, &LossOutput)]) -> LossOutput {
    let mut out = LossOutput::default();
    for (w, term) in terms {
        out.value += w * term.value;
        for (key, grad) in &term.gradients {
            match out.gradients.get_mut(key) {
                Some(acc) => {
                    assert_eq!(acc.len(), grad.len(), "gradient shape mismatch for {key}");
                    for (a, g) in acc.iter_mut().zip(grad) {
                        *a += w * g;
                    }
                }
                None => {
                    out.gradients
                        .insert(key.clone(), grad.iter().map(|g| w * g).collect());
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcheck::{max_grad_rel_err, rel_err};

    fn unit(v: &[f64]) -> Embedding {
        Embedding::from_raw(v).unwrap()
    }

    fn mem_with(protos: &[(u32, Vec<f64>)]) -> IdentityMemory {
        let mut m = IdentityMemory::new(protos[0].1.len(), 0.9);
        for (id, v) in protos {
            m.observe(*id, &unit(v));
        }
        m
    }

    #[test]
    fn oim_single_prototype_empty_queue_is_zero() {
        let m = mem_with(&[(0, vec![1.0, 0.0])]);
        let q = NegativeQueue::new(8);
        let x = unit(&[1.0, 0.0]);
        let out = oim_loss(&x, 0, &m, &q, 1.0).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn oim_two_orthogonal_prototypes() {
        // x = v+, two orthogonal unit prototypes, tau = 1:
        // loss = log(1 + e^-1).
        let m = mem_with(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let q = NegativeQueue::new(8);
        let x = unit(&[1.0, 0.0]);
        let out = oim_loss(&x, 0, &m, &q, 1.0).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!(rel_err(out.value, expect) < 1e-12, "{} vs {expect}", out.value);
    }

    #[test]
    fn oim_unknown_label_is_lookup_error() {
        let m = mem_with(&[(0, vec![1.0, 0.0])]);
        let q = NegativeQueue::new(8);
        let x = unit(&[1.0, 0.0]);
        assert!(matches!(
            oim_loss(&x, 5, &m, &q, 1.0),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn id_loss_reduces_to_oim_with_no_intra_negatives() {
        let mut rng = Rng::new(1);
        let m = mem_with(&[
            (0, rng.unit_vec(6)),
            (1, rng.unit_vec(6)),
            (2, rng.unit_vec(6)),
        ]);
        let mut q = NegativeQueue::new(4);
        q.push(&unit(&rng.unit_vec(6)));
        q.push(&unit(&rng.unit_vec(6)));
        let x = unit(&rng.unit_vec(6));
        let a = oim_loss(&x, 1, &m, &q, 0.1).unwrap();
        let b = id_loss(&x, 1, &m, &q, &[], 0.1).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad("x"), b.grad("x"));
    }

    #[test]
    fn intra_negative_strictly_increases_loss() {
        let mut rng = Rng::new(2);
        let m = mem_with(&[(0, rng.unit_vec(6)), (1, rng.unit_vec(6))]);
        let q = NegativeQueue::new(4);
        let x = unit(&rng.unit_vec(6));
        let base = id_loss(&x, 0, &m, &q, &[], 0.1).unwrap().value;
        // An intra negative equal to x itself (cos = 1) grows the denominator.
        let with = id_loss(&x, 0, &m, &q, &[x.clone()], 0.1).unwrap().value;
        assert!(with > base);
    }

    #[test]
    fn oim_and_id_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        for trial in 0..20 {
            let m = mem_with(&[
                (0, rng.unit_vec(5)),
                (1, rng.unit_vec(5)),
                (2, rng.unit_vec(5)),
            ]);
            let mut q = NegativeQueue::new(4);
            for _ in 0..3 {
                q.push(&unit(&rng.unit_vec(5)));
            }
            let intra = vec![unit(&rng.unit_vec(5)), unit(&rng.unit_vec(5))];
            let x = rng.unit_vec(5);
            let out = id_loss_raw(&x, 0, &m, &q, &intra, 0.1).unwrap();
            // The loss is a function of the raw x vector (memory fixed).
            let f = |v: &[f64]| id_loss_raw(v, 0, &m, &q, &intra, 0.1).unwrap().value;
            let err = max_grad_rel_err(&f, &x, out.grad("x"), 1e-5);
            assert!(err < 1e-4, "trial {trial}: rel err {err}");

            // Intra negatives are model outputs too; their gradients must
            // also check out.
            let flat_intra: Vec<f64> = intra.iter().flat_map(|e| e.iter().copied()).collect();
            let fi = |flat: &[f64]| {
                let intras: Vec<Embedding> = flat
                    .chunks(5)
                    .map(|c| Embedding::from_unit(c.to_vec()))
                    .collect();
                id_loss_raw(&x, 0, &m, &q, &intras, 0.1).unwrap().value
            };
            let err_i = max_grad_rel_err(&fi, &flat_intra, out.grad("intra"), 1e-5);
            assert!(err_i < 1e-4, "trial {trial}: intra rel err {err_i}");
        }
    }

    #[test]
    fn triplet_known_values() {
        // d(a, pos) = 0.2, d(a, neg) = 0.1, margin 0.3 -> 0.4.
        // Build vectors with those cosine distances to the anchor.
        let a = vec![1.0, 0.0];
        let pos = vec![unit(&[0.8, (1.0f64 - 0.64).sqrt()])];
        let neg = vec![unit(&[0.9, (1.0f64 - 0.81).sqrt()])];
        let out = ie_triplet_loss(&a, &pos, &neg, 0.3);
        assert!((out.value - (0.3 + 0.2 - 0.1)).abs() < 1e-12);

        // Inactive hinge: d(a,pos) = 0, d(a,neg) >= margin.
        let pos2 = vec![unit(&[1.0, 0.0])];
        let neg2 = vec![unit(&[0.0, 1.0])];
        let out2 = ie_triplet_loss(&a, &pos2, &neg2, 0.3);
        assert_eq!(out2.value, 0.0);
        assert!(out2.grad("anchor").iter().all(|g| *g == 0.0));
    }

    #[test]
    fn triplet_empty_sets_are_skipped() {
        let a = vec![1.0, 0.0];
        let pos = vec![unit(&[0.0, 1.0])];
        let out = ie_triplet_loss(&a, &pos, &[], 0.3);
        assert_eq!(out.value, 0.0);
        let out2 = ie_triplet_loss(&a, &[], &pos, 0.3);
        assert_eq!(out2.value, 0.0);
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let mut checked = 0;
        while checked < 20 {
            let pos: Vec<Embedding> = (0..3).map(|_| unit(&rng.unit_vec(6))).collect();
            let neg: Vec<Embedding> = (0..3).map(|_| unit(&rng.unit_vec(6))).collect();
            let a = rng.unit_vec(6);
            let out = ie_triplet_loss(&a, &pos, &neg, 0.3);
            // Stay away from the hinge kink and from argmax/argmin ties.
            if out.value < 1e-3 {
                continue;
            }
            let f = |v: &[f64]| ie_triplet_loss(v, &pos, &neg, 0.3).value;
            let err = max_grad_rel_err(&f, &a, out.grad("anchor"), 1e-5);
            assert!(err < 1e-4, "rel err {err}");
            checked += 1;
        }
    }

    #[test]
    fn decorr_known_values() {
        let out = cosine_decorr(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(out.value, 0.0);
        let out2 = cosine_decorr(&[0.3, -0.4], &[0.3, -0.4]).unwrap();
        assert!((out2.value - 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine_decorr(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn decorr_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let a = rng.normal_vec(8);
            let b = rng.normal_vec(8);
            let out = cosine_decorr(&a, &b).unwrap();
            let fa = |v: &[f64]| cosine_decorr(v, &b).unwrap().value;
            let fb = |v: &[f64]| cosine_decorr(&a, v).unwrap().value;
            assert!(max_grad_rel_err(&fa, &a, out.grad("z_id"), 1e-5) < 1e-4);
            assert!(max_grad_rel_err(&fb, &b, out.grad("z_ds"), 1e-5) < 1e-4);
        }
    }

    fn rows(rng: &mut Rng, n: usize, p: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| rng.normal_vec(p)).collect()
    }

    #[test]
    fn hsic_constant_column_is_zero() {
        let mut rng = Rng::new(6);
        let z_id = rows(&mut rng, 10, 2);
        let z_ds = vec![vec![3.7]; 10];
        for kind in [KernelKind::Linear, KernelKind::GaussianRbf] {
            let spec = KernelSpec {
                kind,
                bandwidth: Bandwidth::Fixed(1.0),
                ..Default::default()
            };
            let out = hsic_fnorm(&z_id, &z_ds, &spec).unwrap();
            assert!(out.value.abs() < 1e-12, "{kind:?}: {}", out.value);
        }
        let spec = KernelSpec {
            kind: KernelKind::RandomFeatures,
            bandwidth: Bandwidth::Fixed(1.0),
            num_random_features: 64,
            rff_seed: 9,
        };
        let out = hsic_random_features(&z_id, &z_ds, &spec).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn hsic_two_sample_hand_matrix() {
        // n = 2, Z_id = Z_ds = (0, 1), linear kernel: tr(FHGH) / 1 = 0.25.
        let z: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0]];
        let spec = KernelSpec {
            kind: KernelKind::Linear,
            ..Default::default()
        };
        let out = hsic_fnorm(&z, &z, &spec).unwrap();
        assert!((out.value - 0.25).abs() < 1e-15, "{}", out.value);
    }

    #[test]
    fn hsic_is_symmetric_and_nonnegative() {
        let mut rng = Rng::new(7);
        for kind in [KernelKind::Linear, KernelKind::GaussianRbf] {
            let spec = KernelSpec {
                kind,
                bandwidth: Bandwidth::Median,
                ..Default::default()
            };
            for _ in 0..10 {
                let a = rows(&mut rng, 12, 2);
                let b = rows(&mut rng, 12, 3);
                let ab = hsic_fnorm(&a, &b, &spec).unwrap().value;
                let ba = hsic_fnorm(&b, &a, &spec).unwrap().value;
                assert!(rel_err(ab, ba) < 1e-10);
                assert!(ab >= -1e-12);
            }
        }
    }

    #[test]
    fn hsic_gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        for kind in [KernelKind::Linear, KernelKind::GaussianRbf] {
            let spec = KernelSpec {
                kind,
                bandwidth: Bandwidth::Fixed(1.3),
                ..Default::default()
            };
            for _ in 0..10 {
                let n = 6;
                let p = 2;
                let a = rows(&mut rng, n, p);
                let b = rows(&mut rng, n, p);
                let out = hsic_fnorm(&a, &b, &spec).unwrap();
                let fa = |flat: &[f64]| {
                    let a2: Vec<Vec<f64>> = flat.chunks(p).map(|c| c.to_vec()).collect();
                    hsic_fnorm(&a2, &b, &spec).unwrap().value
                };
                let flat: Vec<f64> = a.iter().flatten().copied().collect();
                let err = max_grad_rel_err(&fa, &flat, out.grad("z_id"), 1e-5);
                assert!(err < 1e-4, "{kind:?} z_id rel err {err}");
                let fb = |flat: &[f64]| {
                    let b2: Vec<Vec<f64>> = flat.chunks(p).map(|c| c.to_vec()).collect();
                    hsic_fnorm(&a, &b2, &spec).unwrap().value
                };
                let flatb: Vec<f64> = b.iter().flatten().copied().collect();
                let errb = max_grad_rel_err(&fb, &flatb, out.grad("z_ds"), 1e-5);
                assert!(errb < 1e-4, "{kind:?} z_ds rel err {errb}");
            }
        }
    }

    #[test]
    fn rff_gradient_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let spec = KernelSpec {
            kind: KernelKind::RandomFeatures,
            bandwidth: Bandwidth::Fixed(1.1),
            num_random_features: 32,
            rff_seed: 4,
        };
        let n = 6;
        let p = 2;
        let a = rows(&mut rng, n, p);
        let b = rows(&mut rng, n, p);
        let out = hsic_random_features(&a, &b, &spec).unwrap();
        let fa = |flat: &[f64]| {
            let a2: Vec<Vec<f64>> = flat.chunks(p).map(|c| c.to_vec()).collect();
            hsic_random_features(&a2, &b, &spec).unwrap().value
        };
        let flat: Vec<f64> = a.iter().flatten().copied().collect();
        let err = max_grad_rel_err(&fa, &flat, out.grad("z_id"), 1e-5);
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn rff_is_deterministic_and_validates_config() {
        let mut rng = Rng::new(10);
        let a = rows(&mut rng, 8, 2);
        let b = rows(&mut rng, 8, 2);
        let spec = KernelSpec {
            kind: KernelKind::RandomFeatures,
            bandwidth: Bandwidth::Fixed(1.0),
            num_random_features: 64,
            rff_seed: 123,
        };
        let x = hsic_random_features(&a, &b, &spec).unwrap();
        let y = hsic_random_features(&a, &b, &spec).unwrap();
        assert_eq!(x.value, y.value);

        let bad = KernelSpec {
            num_random_features: 0,
            ..spec
        };
        assert!(matches!(
            hsic_random_features(&a, &b, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rff_approaches_exact_rbf() {
        let mut rng = Rng::new(11);
        let n = 100;
        // Dependent data so the target value is well away from zero.
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal()]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|v| vec![v[0] * v[0]]).collect();
        let sigma_x = median_bandwidth(&x);
        let sigma_y = median_bandwidth(&y);
        // Freeze bandwidths so both estimators target the same kernel.
        let exact = hsic_fnorm(
            &x,
            &y,
            &KernelSpec {
                kind: KernelKind::GaussianRbf,
                bandwidth: Bandwidth::Fixed(sigma_x),
                ..Default::default()
            },
        )
        .unwrap()
        .value;
        // Same bandwidth on both sides keeps this a one-bandwidth check.
        let _ = sigma_y;
        let approx = hsic_random_features(
            &x,
            &y,
            &KernelSpec {
                kind: KernelKind::RandomFeatures,
                bandwidth: Bandwidth::Fixed(sigma_x),
                num_random_features: 4096,
                rff_seed: 2,
            },
        )
        .unwrap()
        .value;
        assert!(
            rel_err(exact, approx) < 0.1,
            "exact {exact} vs approx {approx}"
        );
    }

    #[test]
    fn combine_is_linear() {
        let mut rng = Rng::new(12);
        let a = cosine_decorr(&rng.normal_vec(4), &rng.normal_vec(4)).unwrap();
        let b = cosine_decorr(&rng.normal_vec(4), &rng.normal_vec(4)).unwrap();
        let c1 = combine(&[(1.0, &a), (0.5, &b)]);
        let c2 = combine(&[(1.0, &a), (1.0, &b)]);
        // Doubling a term's weight doubles exactly its contribution.
        assert!(((c2.value - a.value) - 2.0 * (c1.value - a.value)).abs() < 1e-12);
        // All-zero weights collapse to the unweighted first term.
        let just_a = combine(&[(1.0, &a), (0.0, &b)]);
        assert_eq!(just_a.value, a.value);
        assert_eq!(just_a.grad("z_id"), a.grad("z_id"));
    }
}
