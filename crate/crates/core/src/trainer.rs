//! The desk-scale model and training loop.
//!
//! A trainable linear embedder with domain-specific batch normalization and
//! unit normalization stands in for the ReID head; a logistic person /
//! background scorer with a 4-offset regressor stands in for the detection
//! head. The loop runs seeded SGD with the per-epoch schedules: missing-label
//! generation before each epoch after the first, channel-mask selection
//! after each epoch, and held-out evaluation for the log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dsbn::DsbnState;
use crate::error::{Error, Result};
use crate::eval::{
    detection_metrics, retrieval_metrics, DetectionImage, GalleryItem, Query,
};
use crate::idselect::{select_mask, train_probe, ChannelMask};
use crate::labelgen::{assign_labels, build_weight_matrix, hungarian_max};
use crate::losses::{self, KernelKind, KernelSpec, LossOutput};
use crate::protomem::MemoryBanks;
use crate::refine::{hard_filter, merge_sources, weighted_det_loss};
use crate::rng::Rng;
use crate::synthdata::split;
use crate::types::{dot, Dataset, Embedding, Frame, Half, Source};

// Substream labels for the trainer's RNG uses.
const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;
const STREAM_PAIRS: u64 = 13;

/// How an instance routes through batch normalization at inference.
#[derive(Debug, Clone, Copy)]
pub enum EmbedRoute {
    /// A specific training branch (domain known).
    Branch(usize),
    /// The zeta-weighted mixture (unseen domain).
    Mixture,
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    /// Embedder projection, raw_dim x embed_dim.
    pub w: Vec<Vec<f64>>,
    pub reid_bn: DsbnState,
    pub det_score_w: Vec<f64>,
    pub det_score_b: f64,
    /// raw_dim x 4.
    pub det_reg_w: Vec<Vec<f64>>,
    pub det_reg_b: [f64; 4],
    pub det_bn: DsbnState,
    /// Domain id -> branch index for each head (all zero when a head runs a
    /// single shared branch).
    pub domain_branch: BTreeMap<u32, usize>,
    pub raw_dim: usize,
    pub embed_dim: usize,
}

impl Model {
    pub fn init(cfg: &RunConfig, train_domains: &[u32]) -> Model {
        let raw_dim = cfg.generator.raw_dim;
        let d = cfg.train.embed_dim;
        let mut rng = Rng::substream(cfg.train.seed, STREAM_INIT, 0);
        let scale = 1.0 / (raw_dim as f64).sqrt();
        let w: Vec<Vec<f64>> = (0..raw_dim)
            .map(|_| (0..d).map(|_| scale * rng.normal()).collect())
            .collect();
        let det_score_w: Vec<f64> = (0..raw_dim).map(|_| 0.01 * rng.normal()).collect();
        let det_reg_w: Vec<Vec<f64>> = (0..raw_dim)
            .map(|_| (0..4).map(|_| 0.01 * rng.normal()).collect())
            .collect();

        let use_dsbn = cfg.train.toggles.mdsbn;
        let k = if use_dsbn { train_domains.len() } else { 1 };
        let domain_branch: BTreeMap<u32, usize> = train_domains
            .iter()
            .enumerate()
            .map(|(i, d)| (*d, if use_dsbn { i } else { 0 }))
            .collect();
        let m = cfg.train.prototype_momentum;
        let eps = cfg.dsbn.epsilon;
        let t_zeta = cfg.dsbn.zeta_temperature;
        Model {
            w,
            reid_bn: DsbnState::new(k, d, raw_dim, m, eps, t_zeta),
            det_score_w,
            det_score_b: 0.0,
            det_reg_w,
            det_reg_b: [0.0; 4],
            det_bn: DsbnState::new(k, raw_dim, raw_dim, m, eps, t_zeta),
            domain_branch,
            raw_dim,
            embed_dim: d,
        }
    }

    pub fn branch_of(&self, domain: u32) -> usize {
        *self.domain_branch.get(&domain).unwrap_or(&0)
    }

    /// The linear projection W^T raw (before normalization layers).
    pub fn project(&self, raw: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.embed_dim];
        for (k, row) in self.w.iter().enumerate() {
            let x = raw[k];
            if x == 0.0 {
                continue;
            }
            for (pj, wj) in p.iter_mut().zip(row) {
                *pj += x * wj;
            }
        }
        p
    }

    /// Inference embedding: normalize(DSBN(W^T raw)).
    pub fn embed(&self, raw: &[f64], route: EmbedRoute) -> Result<Embedding> {
        let p = vec![self.project(raw)];
        let y = match route {
            EmbedRoute::Branch(b) => self.reid_bn.forward_eval_branch(b, &p)?,
            EmbedRoute::Mixture => self.reid_bn.infer_mixture(&p, raw)?,
        };
        Embedding::from_raw(&y[0])
    }

    /// Inference detection score for one box feature.
    pub fn det_score(&self, raw: &[f64], route: EmbedRoute) -> Result<f64> {
        let x = vec![raw.to_vec()];
        let z = match route {
            EmbedRoute::Branch(b) => self.det_bn.forward_eval_branch(b, &x)?,
            EmbedRoute::Mixture => self.det_bn.infer_mixture(&x, raw)?,
        };
        Ok(sigmoid(dot(&z[0], &self.det_score_w) + self.det_score_b))
    }

    /// Stamp never-trained branches with default statistics so an untrained
    /// model can still be evaluated (the epochs = 0 baseline).
    pub fn populate_defaults_for_eval(&mut self) {
        for bn in [&mut self.reid_bn, &mut self.det_bn] {
            let dim = bn.domain_protos.dim;
            for d in 0..bn.num_domains() {
                if bn.domain_protos.get(d).is_none() {
                    bn.domain_protos.observe(d, &vec![1.0; dim]);
                }
            }
            for branch in bn.branches.iter_mut() {
                branch.populated = true;
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One training instance (a box that survived the refinement view).
#[derive(Debug, Clone)]
pub struct Instance {
    pub raw: Vec<f64>,
    pub label: Option<u32>,
    pub half: Half,
    /// Same-frame grouping key for intra-frame negatives.
    pub frame_group: usize,
    /// Normalization branch this instance routes through (its domain's
    /// branch, or 0 when a head runs a single shared branch).
    pub branch: usize,
    /// Whether the instance participates in the ReID losses and memory.
    pub reid_active: bool,
    pub cls: u8,
    pub det_weight: f64,
}

/// A mixed-domain optimization batch; instances route to their own
/// normalization branches inside the forward pass.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub instances: Vec<Instance>,
}

/// Per-batch loss values, gradients for every parameter tensor, and the
/// embeddings needed for the post-step memory updates.
pub struct BatchOutput {
    pub id_value: f64,
    pub ie_value: f64,
    pub cov_value: f64,
    pub det_value: f64,
    pub total: f64,
    pub reid_counted: usize,
    pub ie_counted: usize,
    pub ie_skipped: usize,
    pub embeddings: Vec<Option<Embedding>>,
    pub grad_w: Vec<Vec<f64>>,
    /// Branch -> (gamma, beta) gradients for the branches this batch used.
    pub grad_bn_reid: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
    pub grad_score_w: Vec<f64>,
    pub grad_score_b: f64,
    pub grad_reg_w: Vec<Vec<f64>>,
    pub grad_reg_b: [f64; 4],
    pub grad_bn_det: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

/// Indices of each normalization branch's instances, in batch order.
fn branch_groups(batch: &TrainBatch) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, inst) in batch.instances.iter().enumerate() {
        groups.entry(inst.branch).or_default().push(i);
    }
    groups
}

/// Forward + hand-derived backward for one batch. Pure: no model or memory
/// state is modified, so finite differences can probe it directly.
#[allow(clippy::too_many_arguments)]
pub fn combined_batch_loss(
    model: &Model,
    batch: &TrainBatch,
    memories: &MemoryBanks,
    decorr_pairs: &[(usize, usize)],
    cfg: &RunConfig,
) -> Result<BatchOutput> {
    let toggles = &cfg.train.toggles;
    let n = batch.instances.len();
    let d = model.embed_dim;
    let raw_dim = model.raw_dim;
    let raws: Vec<&[f64]> = batch.instances.iter().map(|i| i.raw.as_slice()).collect();

    // ---- ReID forward: each branch normalizes its own instances ----
    let groups = branch_groups(batch);
    let projected: Vec<Vec<f64>> = raws.iter().map(|r| model.project(r)).collect();
    let mut y = vec![Vec::new(); n];
    let mut reid_caches = BTreeMap::new();
    for (&branch, idx) in &groups {
        let sub: Vec<Vec<f64>> = idx.iter().map(|&i| projected[i].clone()).collect();
        let (sub_y, cache) = model.reid_bn.normalize_batch(&sub, branch)?;
        for (&i, row) in idx.iter().zip(sub_y) {
            y[i] = row;
        }
        reid_caches.insert(branch, cache);
    }
    let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut y_norms = Vec::with_capacity(n);
    for row in &y {
        let nrm = crate::types::norm(row);
        if nrm <= 1e-12 {
            return Err(Error::DegenerateInput(
                "zero pre-normalization embedding".into(),
            ));
        }
        y_norms.push(nrm);
        embeddings.push(row.iter().map(|v| v / nrm).collect());
    }

    // ---- ReID losses on embeddings ----
    let mut grad_e = vec![vec![0.0; d]; n];
    let mut id_sum = 0.0;
    let mut reid_counted = 0usize;
    let mut ie_sum = 0.0;
    let mut ie_counted = 0usize;
    let mut ie_skipped = 0usize;

    // Same-frame co-instances for intra-frame distinction: other identities
    // and background clutter boxes alike.
    let mut same_frame: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, inst) in batch.instances.iter().enumerate() {
        same_frame.entry(inst.frame_group).or_default().push(i);
    }

    // Contrast terms (per labeled instance with a known prototype). The
    // intra-frame negatives are other embeddings of the same batch, so their
    // gradients flow back into the batch as well.
    let mut id_grads: Vec<(usize, Vec<usize>, LossOutput)> = Vec::new();
    for (i, inst) in batch.instances.iter().enumerate() {
        if !inst.reid_active {
            continue;
        }
        let Some(label) = inst.label else { continue };
        if !memories.identities.contains(label) {
            continue;
        }
        let intra_idx: Vec<usize> = if toggles.id {
            same_frame[&inst.frame_group]
                .iter()
                .copied()
                .filter(|&j| j != i)
                .collect()
        } else {
            Vec::new()
        };
        let intras: Vec<Embedding> = intra_idx
            .iter()
            .map(|&j| Embedding::from_unit(embeddings[j].clone()))
            .collect();
        let out = losses::id_loss_raw(
            &embeddings[i],
            label,
            &memories.identities,
            &memories.negatives,
            &intras,
            cfg.loss.tau,
        )?;
        id_sum += out.value;
        reid_counted += 1;
        id_grads.push((i, intra_idx, out));
    }
    let id_value = if reid_counted > 0 {
        id_sum / reid_counted as f64
    } else {
        0.0
    };
    if reid_counted > 0 {
        let inv = 1.0 / reid_counted as f64;
        for (i, intra_idx, out) in &id_grads {
            for (g, v) in grad_e[*i].iter_mut().zip(out.grad("x")) {
                *g += inv * v;
            }
            let gi = out.grad("intra");
            for (l, &j) in intra_idx.iter().enumerate() {
                for (g, v) in grad_e[j].iter_mut().zip(&gi[l * d..(l + 1) * d]) {
                    *g += inv * v;
                }
            }
        }
    }

    // Inter-frame enhancement triplets.
    if toggles.ie {
        // Negatives per anchor label: every other identity's prototype.
        let protos = memories.identities.snapshot();
        let mut neg_cache: BTreeMap<u32, Vec<Embedding>> = BTreeMap::new();
        let mut ie_grads: Vec<(usize, LossOutput)> = Vec::new();
        for (i, inst) in batch.instances.iter().enumerate() {
            if !inst.reid_active {
                continue;
            }
            let Some(label) = inst.label else { continue };
            if !memories.halves.known(label) {
                continue;
            }
            let positive = memories
                .halves
                .fetch_inter_frame_positive(label, inst.half)?;
            let Some(pos) = positive else {
                ie_skipped += 1;
                continue;
            };
            let negs = neg_cache.entry(label).or_insert_with(|| {
                protos
                    .iter()
                    .filter(|(id, _)| **id != label)
                    .map(|(_, e)| e.clone())
                    .collect()
            });
            if negs.is_empty() {
                ie_skipped += 1;
                continue;
            }
            let out = losses::ie_triplet_loss(&embeddings[i], &[pos], negs, cfg.loss.margin);
            ie_sum += out.value;
            ie_counted += 1;
            ie_grads.push((i, out));
        }
        if ie_counted > 0 {
            let inv = 1.0 / ie_counted as f64;
            for (i, out) in &ie_grads {
                for (g, v) in grad_e[*i].iter_mut().zip(out.grad("anchor")) {
                    *g += cfg.loss.lambda_ie * inv * v;
                }
            }
        }
    }
    let ie_value = if ie_counted > 0 {
        ie_sum / ie_counted as f64
    } else {
        0.0
    };

    // Feature decorrelation over sampled (id, ds) column pairs.
    let mut cov_sum = 0.0;
    let mut cov_counted = 0usize;
    if toggles.fd && !decorr_pairs.is_empty() && n >= 2 {
        let kernel = KernelSpec {
            kind: KernelKind::GaussianRbf,
            ..cfg.loss.kernel.clone()
        };
        let inv = 1.0 / decorr_pairs.len() as f64;
        for &(ci, cj) in decorr_pairs {
            let z_id: Vec<f64> = embeddings.iter().map(|e| e[ci]).collect();
            let z_ds: Vec<f64> = embeddings.iter().map(|e| e[cj]).collect();
            // Squared cosine keeps the linear term minimized at zero
            // correlation rather than at anti-correlation.
            let cos = losses::cosine_decorr(&z_id, &z_ds)?;
            let id_rows: Vec<Vec<f64>> = z_id.iter().map(|v| vec![*v]).collect();
            let ds_rows: Vec<Vec<f64>> = z_ds.iter().map(|v| vec![*v]).collect();
            let hs = losses::hsic_fnorm(&id_rows, &ds_rows, &kernel)?;
            cov_sum += cos.value * cos.value + hs.value;
            cov_counted += 1;
            let w = cfg.loss.lambda_cov * inv;
            let gc = cos.grad("z_id");
            let gh = hs.grad("z_id");
            let gc2 = cos.grad("z_ds");
            let gh2 = hs.grad("z_ds");
            for b in 0..n {
                grad_e[b][ci] += w * (2.0 * cos.value * gc[b] + gh[b]);
                grad_e[b][cj] += w * (2.0 * cos.value * gc2[b] + gh2[b]);
            }
        }
    }
    let cov_value = if cov_counted > 0 {
        cov_sum / cov_counted as f64
    } else {
        0.0
    };

    // ---- ReID backward: normalize -> BN -> projection ----
    let mut grad_y = vec![vec![0.0; d]; n];
    for i in 0..n {
        let e = &embeddings[i];
        let g = &grad_e[i];
        let eg = dot(e, g);
        for k in 0..d {
            grad_y[i][k] = (g[k] - e[k] * eg) / y_norms[i];
        }
    }
    let mut grad_p = vec![vec![0.0; d]; n];
    let mut grad_bn_reid = BTreeMap::new();
    for (&branch, idx) in &groups {
        let sub_gy: Vec<Vec<f64>> = idx.iter().map(|&i| grad_y[i].clone()).collect();
        let (sub_gp, ggamma, gbeta) = model.reid_bn.backward(&reid_caches[&branch], &sub_gy);
        for (&i, row) in idx.iter().zip(sub_gp) {
            grad_p[i] = row;
        }
        grad_bn_reid.insert(branch, (ggamma, gbeta));
    }
    let mut grad_w = vec![vec![0.0; d]; raw_dim];
    for (b, raw) in raws.iter().enumerate() {
        for k in 0..raw_dim {
            let x = raw[k];
            if x == 0.0 {
                continue;
            }
            for j in 0..d {
                grad_w[k][j] += x * grad_p[b][j];
            }
        }
    }

    // ---- Detection head ----
    let mut z = vec![Vec::new(); n];
    let mut det_caches = BTreeMap::new();
    for (&branch, idx) in &groups {
        let sub: Vec<Vec<f64>> = idx.iter().map(|&i| raws[i].to_vec()).collect();
        let (sub_z, cache) = model.det_bn.normalize_batch(&sub, branch)?;
        for (&i, row) in idx.iter().zip(sub_z) {
            z[i] = row;
        }
        det_caches.insert(branch, cache);
    }
    let scores: Vec<f64> = z
        .iter()
        .map(|zi| sigmoid(dot(zi, &model.det_score_w) + model.det_score_b))
        .collect();
    let reg: Vec<[f64; 4]> = z
        .iter()
        .map(|zi| {
            let mut r = model.det_reg_b;
            for (k, row) in model.det_reg_w.iter().enumerate() {
                for (c, rv) in r.iter_mut().enumerate() {
                    *rv += zi[k] * row[c];
                }
            }
            r
        })
        .collect();
    let cls: Vec<u8> = batch.instances.iter().map(|i| i.cls).collect();
    let weights: Vec<f64> = batch.instances.iter().map(|i| i.det_weight).collect();
    let reg_targets = vec![[0.0; 4]; n];
    let det = weighted_det_loss(&scores, &cls, &reg, &reg_targets, &weights)?;
    let det_value = det.value;

    let lam_det = cfg.loss.lambda_det;
    let mut grad_z = vec![vec![0.0; raw_dim]; n];
    let mut grad_score_w = vec![0.0; raw_dim];
    let mut grad_score_b = 0.0;
    let mut grad_reg_w = vec![vec![0.0; 4]; raw_dim];
    let mut grad_reg_b = [0.0; 4];
    for b in 0..n {
        let dlogit = lam_det * det.grad_scores[b] * scores[b] * (1.0 - scores[b]);
        grad_score_b += dlogit;
        for k in 0..raw_dim {
            grad_score_w[k] += dlogit * z[b][k];
            grad_z[b][k] += dlogit * model.det_score_w[k];
        }
        for c in 0..4 {
            let gr = lam_det * det.grad_reg[b][c];
            if gr == 0.0 {
                continue;
            }
            grad_reg_b[c] += gr;
            for k in 0..raw_dim {
                grad_reg_w[k][c] += gr * z[b][k];
                grad_z[b][k] += gr * model.det_reg_w[k][c];
            }
        }
    }
    let mut grad_bn_det = BTreeMap::new();
    for (&branch, idx) in &groups {
        let sub_gz: Vec<Vec<f64>> = idx.iter().map(|&i| grad_z[i].clone()).collect();
        let (_, ggamma, gbeta) = model.det_bn.backward(&det_caches[&branch], &sub_gz);
        grad_bn_det.insert(branch, (ggamma, gbeta));
    }

    let total = id_value
        + cfg.loss.lambda_ie * ie_value
        + cfg.loss.lambda_cov * cov_value
        + lam_det * det_value;

    let out_embeddings: Vec<Option<Embedding>> = batch
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            inst.reid_active
                .then(|| Embedding::from_unit(embeddings[i].clone()))
        })
        .collect();

    Ok(BatchOutput {
        id_value,
        ie_value,
        cov_value,
        det_value,
        total,
        reid_counted,
        ie_counted,
        ie_skipped,
        embeddings: out_embeddings,
        grad_w,
        grad_bn_reid,
        grad_score_w,
        grad_score_b,
        grad_reg_w,
        grad_reg_b,
        grad_bn_det,
    })
}

/// SGD velocity buffers, one per parameter tensor.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct SgdState {
    w: Vec<Vec<f64>>,
    gamma_reid: Vec<Vec<f64>>,
    beta_reid: Vec<Vec<f64>>,
    score_w: Vec<f64>,
    score_b: f64,
    reg_w: Vec<Vec<f64>>,
    reg_b: [f64; 4],
    gamma_det: Vec<Vec<f64>>,
    beta_det: Vec<Vec<f64>>,
}

impl SgdState {
    fn for_model(m: &Model) -> SgdState {
        SgdState {
            w: vec![vec![0.0; m.embed_dim]; m.raw_dim],
            gamma_reid: vec![vec![0.0; m.embed_dim]; m.reid_bn.num_domains()],
            beta_reid: vec![vec![0.0; m.embed_dim]; m.reid_bn.num_domains()],
            score_w: vec![0.0; m.raw_dim],
            score_b: 0.0,
            reg_w: vec![vec![0.0; 4]; m.raw_dim],
            reg_b: [0.0; 4],
            gamma_det: vec![vec![0.0; m.raw_dim]; m.det_bn.num_domains()],
            beta_det: vec![vec![0.0; m.raw_dim]; m.det_bn.num_domains()],
        }
    }
}

fn sgd_step(param: &mut [f64], grad: &[f64], vel: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Per-epoch counters and loss averages, one CSV row per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_id: f64,
    pub loss_ie: f64,
    pub loss_cov: f64,
    pub loss_det: f64,
    pub batches: usize,
    pub reid_instances: usize,
    pub ie_skipped: usize,
    pub pseudo_added: usize,
    /// Precision of this epoch's pseudo labels against hidden ground truth
    /// (NaN when unavailable).
    pub pseudo_precision: f64,
    pub mask_size: usize,
    pub heldout_map: f64,
    pub heldout_top1: f64,
    pub heldout_det_ap: f64,
    pub heldout_recall: f64,
}

/// Final report emitted by `fit` and `evaluate_model`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: f64,
    pub top1: f64,
    pub det_ap: f64,
    pub det_recall: f64,
    pub num_queries: usize,
    pub excluded_queries: usize,
    pub excluded_images: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub manifest: String,
    pub config: RunConfig,
    pub model: Model,
    pub memories: MemoryBanks,
    pub mask: Option<ChannelMask>,
}

pub const CHECKPOINT_FORMAT: &str = "pslab-checkpoint";

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let s = std::fs::read_to_string(path)?;
        let ck: Checkpoint =
            serde_json::from_str(&s).map_err(|e| Error::Format(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "not a checkpoint file (format = {:?})",
                ck.format
            )));
        }
        Ok(ck)
    }
}

pub struct FitResult {
    pub model: Model,
    pub memories: MemoryBanks,
    pub mask: Option<ChannelMask>,
    pub logs: Vec<EpochLog>,
    pub report: MetricReport,
}

/// The trainer owns the model, memories, the working (pseudo-labeled) copy
/// of the training split, and the current channel mask.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub memories: MemoryBanks,
    pub mask: Option<ChannelMask>,
    pub working: Dataset,
    sgd: SgdState,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, train_split: Dataset) -> Result<Trainer> {
        cfg.validate()?;
        let mut domains: Vec<u32> = train_split.frames.iter().map(|f| f.domain_id).collect();
        domains.sort_unstable();
        domains.dedup();
        if domains.is_empty() {
            return Err(Error::Config("training split has no frames".into()));
        }
        let model = Model::init(cfg, &domains);
        let memories = MemoryBanks::new(
            cfg.train.embed_dim,
            cfg.train.prototype_momentum,
            cfg.train.queue_capacity,
        );
        let sgd = SgdState::for_model(&model);
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            memories,
            mask: None,
            working: train_split,
            sgd,
            epoch: 0,
        })
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let t = &self.cfg.train;
        if epoch >= t.lr_decay_epoch {
            t.learning_rate * t.lr_decay_factor
        } else {
            t.learning_rate
        }
    }

    /// The per-frame refinement view: merge annotation streams, apply the
    /// hard confidence filter, and derive detection targets and weights.
    fn frame_instances(&self, frame: &Frame, group: usize) -> Vec<Instance> {
        let toggles = &self.cfg.train.toggles;
        let branch = self.model.branch_of(frame.domain_id);
        if !toggles.br {
            return frame
                .boxes
                .iter()
                .map(|b| Instance {
                    raw: b.feature.clone(),
                    label: b.identity,
                    half: frame.half,
                    frame_group: group,
                    branch,
                    reid_active: true,
                    cls: u8::from(b.identity.is_some()),
                    det_weight: 1.0,
                })
                .collect();
        }
        let primary: Vec<_> = frame
            .boxes
            .iter()
            .filter(|b| b.source != Source::Auxiliary)
            .cloned()
            .collect();
        let auxiliary: Vec<_> = frame
            .boxes
            .iter()
            .filter(|b| b.source == Source::Auxiliary)
            .cloned()
            .collect();
        let merged = merge_sources(&primary, &auxiliary, &self.cfg.refine);
        merged
            .iter()
            .map(|b| {
                // The hard-filter predicate: survivors train the ReID head
                // with their label, eliminated boxes stay detection-only
                // negatives.
                let survives = b.confidence >= self.cfg.refine.hard_conf_min;
                let labeled = b.identity.is_some() && survives;
                Instance {
                    raw: b.feature.clone(),
                    label: if survives { b.identity } else { None },
                    half: frame.half,
                    frame_group: group,
                    branch,
                    reid_active: survives,
                    cls: u8::from(labeled),
                    det_weight: if labeled {
                        b.confidence
                    } else {
                        1.0 - b.confidence
                    },
                }
            })
            .collect()
    }

    /// Assemble the epoch's batches: frames in seeded shuffled order, kept
    /// atomic, mixed across domains (instances route to their own branches
    /// inside the forward pass).
    fn build_batches(&self, epoch: usize) -> Vec<TrainBatch> {
        let mut order: Vec<usize> = (0..self.working.frames.len()).collect();
        let mut rng = Rng::substream(self.cfg.train.seed, STREAM_SHUFFLE, epoch as u64);
        rng.shuffle(&mut order);

        let mut buf: Vec<Instance> = Vec::new();
        let mut batches = Vec::new();
        let batch_size = self.cfg.train.batch_size;
        for (group, &fi) in order.iter().enumerate() {
            let frame = &self.working.frames[fi];
            let insts = self.frame_instances(frame, group);
            if insts.is_empty() {
                continue;
            }
            buf.extend(insts);
            if buf.len() >= batch_size {
                batches.push(TrainBatch {
                    instances: std::mem::take(&mut buf),
                });
            }
        }
        if !buf.is_empty() {
            batches.push(TrainBatch { instances: buf });
        }
        batches
    }

    /// Sample decorrelation column pairs for one step.
    fn sample_pairs(&self, rng: &mut Rng) -> Vec<(usize, usize)> {
        let Some(mask) = &self.mask else {
            return Vec::new();
        };
        let retained = mask.retained_dims();
        let dropped = mask.dropped_dims();
        if retained.is_empty() || dropped.is_empty() {
            return Vec::new();
        }
        let want = self
            .cfg
            .loss
            .decorr_pairs
            .min(retained.len() * dropped.len());
        (0..want)
            .map(|_| {
                (
                    retained[rng.below(retained.len())],
                    dropped[rng.below(dropped.len())],
                )
            })
            .collect()
    }

    /// One optimization step plus the post-step memory writes.
    fn train_batch(&mut self, batch: &TrainBatch, lr: f64, pairs: &[(usize, usize)]) -> Result<BatchOutput> {
        let out = combined_batch_loss(&self.model, batch, &self.memories, pairs, &self.cfg)?;
        for (name, v) in [
            ("intra-frame distinction (L_ID)", out.id_value),
            ("inter-frame enhancement (L_IE)", out.ie_value),
            ("feature decorrelation (L_cov)", out.cov_value),
            ("weighted detection loss", out.det_value),
        ] {
            if !v.is_finite() {
                return Err(Error::Diverged(format!("{name} became {v}")));
            }
        }

        // Running statistics + domain prototypes, per branch group.
        for (branch, idx) in branch_groups(batch) {
            let raws: Vec<Vec<f64>> = idx.iter().map(|&i| batch.instances[i].raw.clone()).collect();
            let backbone_mean = column_mean(&raws);
            let projected: Vec<Vec<f64>> = raws.iter().map(|r| self.model.project(r)).collect();
            self.model
                .reid_bn
                .update_running_stats(&projected, branch, &backbone_mean);
            self.model
                .det_bn
                .update_running_stats(&raws, branch, &backbone_mean);
        }

        // SGD.
        let mu = self.cfg.train.sgd_momentum;
        let wd = self.cfg.train.weight_decay;
        for k in 0..self.model.raw_dim {
            sgd_step(&mut self.model.w[k], &out.grad_w[k], &mut self.sgd.w[k], lr, mu, wd);
            sgd_step(
                &mut self.model.det_reg_w[k],
                &out.grad_reg_w[k],
                &mut self.sgd.reg_w[k],
                lr,
                mu,
                wd,
            );
        }
        sgd_step(
            &mut self.model.det_score_w,
            &out.grad_score_w,
            &mut self.sgd.score_w,
            lr,
            mu,
            wd,
        );
        self.sgd.score_b = mu * self.sgd.score_b + out.grad_score_b + wd * self.model.det_score_b;
        self.model.det_score_b -= lr * self.sgd.score_b;
        for c in 0..4 {
            self.sgd.reg_b[c] = mu * self.sgd.reg_b[c] + out.grad_reg_b[c] + wd * self.model.det_reg_b[c];
            self.model.det_reg_b[c] -= lr * self.sgd.reg_b[c];
        }
        // No weight decay on normalization affine parameters.
        for (b, (ggamma, gbeta)) in &out.grad_bn_reid {
            sgd_step(
                &mut self.model.reid_bn.branches[*b].gamma,
                ggamma,
                &mut self.sgd.gamma_reid[*b],
                lr,
                mu,
                0.0,
            );
            sgd_step(
                &mut self.model.reid_bn.branches[*b].beta,
                gbeta,
                &mut self.sgd.beta_reid[*b],
                lr,
                mu,
                0.0,
            );
        }
        for (b, (ggamma, gbeta)) in &out.grad_bn_det {
            sgd_step(
                &mut self.model.det_bn.branches[*b].gamma,
                ggamma,
                &mut self.sgd.gamma_det[*b],
                lr,
                mu,
                0.0,
            );
            sgd_step(
                &mut self.model.det_bn.branches[*b].beta,
                gbeta,
                &mut self.sgd.beta_det[*b],
                lr,
                mu,
                0.0,
            );
        }

        // Memory writes happen strictly after the step.
        for (inst, emb) in batch.instances.iter().zip(&out.embeddings) {
            let Some(e) = emb else { continue };
            match inst.label {
                Some(label) => {
                    self.memories.identities.observe(label, e);
                    self.memories.halves.observe(label, inst.half, e);
                }
                None => self.memories.negatives.push(e),
            }
        }
        Ok(out)
    }

    /// Missing-label generation over the working split with the current
    /// embedder and prototype snapshot. Returns (pseudo added, matching
    /// hidden ground truth when available).
    pub fn run_mlg(&mut self) -> Result<(usize, usize)> {
        let protos = self.memories.identities.snapshot();
        if protos.is_empty() {
            return Ok((0, 0));
        }
        // Identity set per video, over labels observable in the working set.
        let mut video_ids: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
        for f in &self.working.frames {
            for b in &f.boxes {
                if let Some(id) = b.identity {
                    if protos.contains_key(&id) {
                        video_ids.entry(f.video_id).or_default().insert(id);
                    }
                }
            }
        }
        let psi = self.cfg.labelgen.psi;
        let mut added = 0;
        let mut correct = 0;
        let frames = std::mem::take(&mut self.working.frames);
        let mut new_frames = Vec::with_capacity(frames.len());
        for frame in frames {
            if frame.boxes.iter().all(|b| b.identity.is_some()) {
                new_frames.push(frame);
                continue;
            }
            let Some(ids) = video_ids.get(&frame.video_id) else {
                new_frames.push(frame);
                continue;
            };
            let frame_protos: BTreeMap<u32, Embedding> = ids
                .iter()
                .map(|id| (*id, protos[id].clone()))
                .collect();
            if frame_protos.is_empty() {
                new_frames.push(frame);
                continue;
            }
            let branch = self.model.branch_of(frame.domain_id);
            let embeddings: Vec<Embedding> = frame
                .boxes
                .iter()
                .map(|b| self.model.embed(&b.feature, EmbedRoute::Branch(branch)))
                .collect::<Result<_>>()?;
            let w = build_weight_matrix(&frame.boxes, &frame_protos, &embeddings, psi)?;
            let a = hungarian_max(&w)?;
            let boxes = assign_labels(&frame.boxes, &w, &a, psi)?;
            for (old, new) in frame.boxes.iter().zip(&boxes) {
                if old.identity.is_none() && new.identity.is_some() {
                    added += 1;
                    if new.gt_identity.is_some() && new.identity == new.gt_identity {
                        correct += 1;
                    }
                }
            }
            new_frames.push(Frame { boxes, ..frame });
        }
        self.working.frames = new_frames;
        Ok((added, correct))
    }

    /// Refresh the channel mask from the current prototypes (after-epoch
    /// schedule). Requires at least two identities; otherwise the mask is
    /// left unchanged.
    pub fn refresh_mask(&mut self) -> Result<()> {
        if self.memories.identities.len() < 2 {
            return Ok(());
        }
        let probe = train_probe(&self.memories.identities, &self.cfg.idselect)?;
        match select_mask(&self.memories.identities, &probe, self.cfg.idselect.drop_budget) {
            Ok(mask) => {
                self.mask = Some(mask);
                Ok(())
            }
            // A degenerate probe (e.g. collapsed prototypes early in
            // training) keeps the previous mask rather than aborting.
            Err(Error::Config(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// One pass over the working split in seeded shuffled order.
    pub fn train_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch;
        let lr = self.lr_at(epoch);
        let batches = self.build_batches(epoch);
        let mut pair_rng = Rng::substream(self.cfg.train.seed, STREAM_PAIRS, epoch as u64);

        let mut log = EpochLog {
            epoch,
            lr,
            loss_total: 0.0,
            loss_id: 0.0,
            loss_ie: 0.0,
            loss_cov: 0.0,
            loss_det: 0.0,
            batches: 0,
            reid_instances: 0,
            ie_skipped: 0,
            pseudo_added: 0,
            pseudo_precision: f64::NAN,
            mask_size: self.mask.as_ref().map_or(0, |m| m.num_retained()),
            heldout_map: 0.0,
            heldout_top1: 0.0,
            heldout_det_ap: 0.0,
            heldout_recall: 0.0,
        };
        for batch in &batches {
            let pairs = self.sample_pairs(&mut pair_rng);
            let out = self.train_batch(batch, lr, &pairs)?;
            log.loss_total += out.total;
            log.loss_id += out.id_value;
            log.loss_ie += out.ie_value;
            log.loss_cov += out.cov_value;
            log.loss_det += out.det_value;
            log.batches += 1;
            log.reid_instances += out.reid_counted;
            log.ie_skipped += out.ie_skipped;
        }
        if log.batches > 0 {
            let inv = 1.0 / log.batches as f64;
            log.loss_total *= inv;
            log.loss_id *= inv;
            log.loss_ie *= inv;
            log.loss_cov *= inv;
            log.loss_det *= inv;
        }
        self.epoch += 1;
        Ok(log)
    }
}

fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (mi, v) in m.iter_mut().zip(r) {
            *mi += v;
        }
    }
    for mi in m.iter_mut() {
        *mi /= n;
    }
    m
}

/// Embed and score one held-out frame through the inference path. With
/// `scene_mean` set, the mixture weights come from that backbone feature
/// (the deployment scene's statistics); otherwise branch 0 is used directly.
fn eval_frame(
    model: &Model,
    frame: &Frame,
    scene_mean: Option<&[f64]>,
) -> Result<(Vec<Embedding>, Vec<f64>)> {
    let raws: Vec<Vec<f64>> = frame.boxes.iter().map(|b| b.feature.clone()).collect();
    if raws.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let projected: Vec<Vec<f64>> = raws.iter().map(|r| model.project(r)).collect();
    let y = match scene_mean {
        Some(mean) => model.reid_bn.infer_mixture(&projected, mean)?,
        None => model.reid_bn.forward_eval_branch(0, &projected)?,
    };
    let embeddings: Vec<Embedding> = y
        .iter()
        .map(|row| Embedding::from_raw(row))
        .collect::<Result<_>>()?;
    let z = match scene_mean {
        Some(mean) => model.det_bn.infer_mixture(&raws, mean)?,
        None => model.det_bn.forward_eval_branch(0, &raws)?,
    };
    let scores: Vec<f64> = z
        .iter()
        .map(|zi| sigmoid(dot(zi, &model.det_score_w) + model.det_score_b))
        .collect();
    Ok((embeddings, scores))
}

/// Held-out evaluation: one query per identity (its first detection in frame
/// order), gallery = all other held-out detections (clutter included as
/// distractors); detection scored against hidden ground-truth boxes at the
/// configured IoU. The held-out split must carry ground truth.
pub fn evaluate_model(model: &Model, cfg: &RunConfig, heldout: &Dataset) -> Result<MetricReport> {
    let has_gt = heldout
        .frames
        .iter()
        .flat_map(|f| &f.boxes)
        .any(|b| b.gt_identity.is_some());
    if !has_gt {
        return Err(Error::Contract(
            "held-out evaluation requires the ground-truth sidecar".into(),
        ));
    }
    // Scene-level mixture weights: the backbone mean over the whole
    // held-out split, so every frame is normalized consistently.
    let scene_mean = if cfg.train.toggles.mdsbn {
        let raws: Vec<Vec<f64>> = heldout
            .frames
            .iter()
            .flat_map(|f| f.boxes.iter().map(|b| b.feature.clone()))
            .collect();
        if raws.is_empty() {
            return Err(Error::Contract("held-out split has no boxes".into()));
        }
        Some(column_mean(&raws))
    } else {
        None
    };

    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    let mut seen_query: std::collections::BTreeSet<u32> = Default::default();
    let mut det_images = Vec::new();

    for frame in &heldout.frames {
        let (embeddings, scores) = eval_frame(model, frame, scene_mean.as_deref())?;
        let mut det_img = DetectionImage::default();
        for ((b, e), s) in frame.boxes.iter().zip(&embeddings).zip(&scores) {
            det_img.predictions.push((b.bbox, *s));
            if let Some(gt_box) = b.gt_box {
                if b.gt_identity.is_some() {
                    det_img.ground_truth.push(gt_box);
                }
            }
            match b.gt_identity {
                Some(id) if seen_query.insert(id) => queries.push(Query {
                    embedding: e.clone(),
                    identity: id,
                }),
                other => gallery.push(GalleryItem {
                    embedding: e.clone(),
                    identity: other,
                    frame_id: frame.frame_id,
                }),
            }
        }
        det_images.push(det_img);
    }

    let retrieval = retrieval_metrics(&queries, &gallery);
    let detection = detection_metrics(&det_images, cfg.eval.detection_iou_min);
    Ok(MetricReport {
        map: retrieval.map,
        top1: retrieval.top1,
        det_ap: detection.ap,
        det_recall: detection.recall,
        num_queries: queries.len() - retrieval.excluded_queries,
        excluded_queries: retrieval.excluded_queries,
        excluded_images: detection.excluded_images,
    })
}

/// Full training run: split by the held-out domain, loop epochs with the
/// label-generation and mask schedules, evaluate per epoch, and return the
/// final held-out metrics.
pub fn fit(cfg: &RunConfig, dataset: &Dataset) -> Result<FitResult> {
    cfg.validate()?;
    let (train_split, heldout) = split(dataset, cfg.eval.holdout_domain)?;
    let mut trainer = Trainer::new(cfg, train_split)?;

    if cfg.train.epochs == 0 {
        trainer.model.populate_defaults_for_eval();
        let report = evaluate_model(&trainer.model, cfg, &heldout)?;
        return Ok(FitResult {
            model: trainer.model,
            memories: trainer.memories,
            mask: trainer.mask,
            logs: Vec::new(),
            report,
        });
    }

    let mut logs = Vec::new();
    for epoch in 0..cfg.train.epochs {
        let mut pseudo_added = 0;
        let mut pseudo_correct = 0;
        if epoch > 0 && cfg.train.toggles.mlg {
            let (added, correct) = trainer.run_mlg()?;
            pseudo_added = added;
            pseudo_correct = correct;
        }
        let mut log = trainer.train_epoch()?;
        log.pseudo_added = pseudo_added;
        log.pseudo_precision = if pseudo_added > 0 {
            pseudo_correct as f64 / pseudo_added as f64
        } else {
            f64::NAN
        };
        if cfg.train.toggles.fd {
            trainer.refresh_mask()?;
            log.mask_size = trainer.mask.as_ref().map_or(0, |m| m.num_retained());
        }
        let report = evaluate_model(&trainer.model, cfg, &heldout)?;
        log.heldout_map = report.map;
        log.heldout_top1 = report.top1;
        log.heldout_det_ap = report.det_ap;
        log.heldout_recall = report.det_recall;
        logs.push(log);
    }
    let report = evaluate_model(&trainer.model, cfg, &heldout)?;
    Ok(FitResult {
        model: trainer.model,
        memories: trainer.memories,
        mask: trainer.mask,
        logs,
        report,
    })
}
