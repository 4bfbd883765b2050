//! Multi-domain synthetic annotation streams with known ground truth.
//!
//! The generator stands in for video frames: each identity gets a base
//! appearance vector whose per-frame drift follows a unit-norm autoregressive
//! walk, each domain adds a fixed signal component, and each sample adds
//! i.i.d. noise. `corrupt` then injects the observable noise the pipeline is
//! built to repair (box jitter, identity-label omission, false boxes) while
//! leaving the hidden ground-truth fields untouched, so every downstream
//! component can be verified against construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BoxGeom;
use crate::rng::Rng;
use crate::types::{BoxAnn, Dataset, Frame, Half, Source};

/// Abstract frame canvas, in the same pixel units as box geometry.
pub const FRAME_W: f64 = 640.0;
pub const FRAME_H: f64 = 480.0;

/// Magnitude of the per-domain signal component relative to the unit-norm
/// identity appearance.
pub const DOMAIN_SIGNAL_SCALE: f64 = 0.4;

/// Slope of the confidence model: conf = clip(1 - KAPPA * jitter, 0, 1)
/// where jitter is measured as 1 - IoU(observed box, true box).
pub const CONF_KAPPA: f64 = 2.0;

/// Box jitter is bimodal, like tracker output: most boxes are nearly clean,
/// a minority drift badly. These scale `jitter_std` for the two modes.
pub const HEAVY_JITTER_RATE: f64 = 0.15;

/// Identity-label omission is a tracklet boundary: each identity loses its
/// labels on a contiguous, end-anchored window of its video. The cleared
/// fraction is uniform in [0, 2 * omission_rate], so the per-box marginal
/// omission probability equals omission_rate (for rates up to 0.5).
fn omission_window(rate: f64, frames: u32, rng: &mut Rng) -> std::ops::Range<u32> {
    if rate <= 0.0 || frames == 0 {
        return 0..0;
    }
    let frac = (2.0 * rate * rng.uniform()).min(1.0);
    let len = (frac * frames as f64).round() as u32;
    if rng.bernoulli(0.5) {
        0..len
    } else {
        (frames - len)..frames
    }
}

/// False boxes are partial-person crops: their appearance mixes a visible
/// person's appearance with background clutter at this ratio.
pub const FALSE_BOX_PERSON_MIX: f64 = 0.0;
pub const HEAVY_JITTER_SCALE: f64 = 3.5;
pub const LIGHT_JITTER_SCALE: f64 = 0.5;

// Substream labels so every stage draws from an independent stream.
const STREAM_LAYOUT: u64 = 1;
const STREAM_APPEARANCE: u64 = 2;
const STREAM_DOMAIN: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_CORRUPT: u64 = 5;
const STREAM_DRIFT_BASIS: u64 = 6;

/// Dimension of the shared drift subspace: appearance drift (pose, viewpoint,
/// lighting) moves along directions common to all identities, the way real
/// appearance variation does. Must stay below `id_signal_dim`.
const DRIFT_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_domains: u32,
    pub videos_per_domain: u32,
    pub frames_per_video: u32,
    pub identities_per_video: u32,
    /// Raw feature dimension D_in.
    pub raw_dim: usize,
    pub id_signal_dim: usize,
    pub domain_signal_dim: usize,
    /// Frame-gap scale of the similarity decay, in frames.
    pub decay_sigma: f64,
    /// Asymptotic cosine similarity floor b in [0, 1).
    pub decay_floor: f64,
    pub noise_std: f64,
    pub omission_rate: f64,
    /// Box jitter, as a fraction of box size.
    pub jitter_std: f64,
    pub false_box_rate: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_domains: 3,
            videos_per_domain: 10,
            frames_per_video: 60,
            identities_per_video: 8,
            raw_dim: 32,
            id_signal_dim: 16,
            domain_signal_dim: 8,
            decay_sigma: 10.0,
            decay_floor: 0.4,
            noise_std: 0.04,
            omission_rate: 0.3,
            jitter_std: 0.08,
            false_box_rate: 0.1,
            seed: 17,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.id_signal_dim + self.domain_signal_dim > self.raw_dim {
            return Err(Error::Config(format!(
                "id_signal_dim ({}) + domain_signal_dim ({}) exceeds raw_dim ({})",
                self.id_signal_dim, self.domain_signal_dim, self.raw_dim
            )));
        }
        if !(0.0..1.0).contains(&self.decay_floor) {
            return Err(Error::Config(format!(
                "decay_floor must be in [0, 1), got {}",
                self.decay_floor
            )));
        }
        for (name, v) in [
            ("omission_rate", self.omission_rate),
            ("false_box_rate", self.false_box_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.num_domains == 0
            || self.videos_per_domain == 0
            || self.frames_per_video == 0
            || self.identities_per_video == 0
            || self.raw_dim == 0
            || self.id_signal_dim == 0
        {
            return Err(Error::Config("all counts must be positive".into()));
        }
        if self.decay_sigma <= 0.0 {
            return Err(Error::Config("decay_sigma must be positive".into()));
        }
        if self.noise_std < 0.0 || self.jitter_std < 0.0 {
            return Err(Error::Config("noise/jitter std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn total_videos(&self) -> u32 {
        self.num_domains * self.videos_per_domain
    }

    pub fn total_frames(&self) -> u64 {
        self.total_videos() as u64 * self.frames_per_video as u64
    }
}

/// Calibrate the walk's per-step retention rho so that rho^gap tracks the
/// target decay exp(-gap^2 / (2 sigma^2)) over gaps up to 3 sigma.
/// Golden-section search; deterministic.
pub fn calibrate_rho(sigma: f64) -> f64 {
    let max_gap = (3.0 * sigma).ceil().max(2.0) as usize;
    let objective = |rho: f64| -> f64 {
        let mut err = 0.0;
        for gap in 1..=max_gap {
            let target = (-((gap * gap) as f64) / (2.0 * sigma * sigma)).exp();
            let d = rho.powi(gap as i32) - target;
            err += d * d;
        }
        err
    };
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..200 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = objective(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = objective(d);
        }
    }
    0.5 * (lo + hi)
}

/// Log-std of the per-domain channel gains (camera response / dynamic-range
/// shift); the statistics gap that per-domain normalization exists to fix.
pub const DOMAIN_GAIN_LOG_STD: f64 = 0.15;

/// The per-domain signal: a fixed additive unit vector spanning the identity
/// and domain-signal dimensions (so no column selection separates it from
/// the appearance) plus fixed per-channel gains over the same dimensions.
/// Derived from the seed alone so `corrupt` can re-derive it.
struct DomainSignal {
    offset: Vec<f64>,
    gain: Vec<f64>,
}

fn domain_signal(cfg: &GeneratorConfig, domain: u32) -> DomainSignal {
    let mut rng = Rng::substream(cfg.seed, STREAM_DOMAIN, domain as u64);
    let dim = cfg.id_signal_dim + cfg.domain_signal_dim;
    let offset = rng.unit_vec(dim);
    let gain = (0..dim)
        .map(|_| (DOMAIN_GAIN_LOG_STD * rng.normal()).exp())
        .collect();
    DomainSignal { offset, gain }
}

/// Assemble a raw feature: the id-signal slice and additive domain component
/// pass through the domain's channel gains, dead dimensions stay zero, and
/// isotropic sensor noise is added last.
fn assemble_feature(
    cfg: &GeneratorConfig,
    id_part: &[f64],
    dom: &DomainSignal,
    noise_rng: &mut Rng,
) -> Vec<f64> {
    let mut f = vec![0.0; cfg.raw_dim];
    f[..cfg.id_signal_dim].copy_from_slice(id_part);
    for (k, dv) in dom.offset.iter().enumerate() {
        f[k] += DOMAIN_SIGNAL_SCALE * dv;
    }
    for (k, g) in dom.gain.iter().enumerate() {
        f[k] *= g;
    }
    if cfg.noise_std > 0.0 {
        for x in f.iter_mut() {
            *x += cfg.noise_std * noise_rng.normal();
        }
    }
    f
}

/// Orthonormal basis of the shared drift subspace inside the id-signal
/// dimensions, derived from the seed alone.
fn drift_basis(cfg: &GeneratorConfig) -> Vec<Vec<f64>> {
    let dim = cfg.id_signal_dim;
    let k = DRIFT_DIM.min(dim.saturating_sub(1)).max(1);
    let mut rng = Rng::substream(cfg.seed, STREAM_DRIFT_BASIS, 0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = rng.unit_vec(dim);
        for b in &basis {
            let p = crate::types::dot(&v, b);
            for (x, bv) in v.iter_mut().zip(b) {
                *x -= p * bv;
            }
        }
        if crate::types::normalize(&mut v) > 1e-6 {
            basis.push(v);
        }
    }
    basis
}

struct IdentityState {
    global_id: u32,
    base: Vec<f64>,
    /// Drift coefficients over the shared basis; unit norm.
    omega: Vec<f64>,
    bbox: BoxGeom,
    rng: Rng,
}

impl IdentityState {
    /// a(t) = sqrt(b) * base + sqrt(1-b) * w(t), where w(t) is the shared
    /// drift basis applied to this identity's walk coefficients, kept
    /// orthogonal to the base so the similarity floor is exact.
    fn appearance(&self, floor: f64, basis: &[Vec<f64>]) -> Vec<f64> {
        let dim = self.base.len();
        let mut w = vec![0.0; dim];
        for (coef, dir) in self.omega.iter().zip(basis) {
            for (wv, dv) in w.iter_mut().zip(dir) {
                *wv += coef * dv;
            }
        }
        let proj = crate::types::dot(&w, &self.base);
        for (wv, bv) in w.iter_mut().zip(&self.base) {
            *wv -= proj * bv;
        }
        crate::types::normalize(&mut w);
        let sb = floor.sqrt();
        let sw = (1.0 - floor).sqrt();
        self.base
            .iter()
            .zip(&w)
            .map(|(b, wv)| sb * b + sw * wv)
            .collect()
    }

    fn step_walk(&mut self, rho: f64) {
        let dim = self.omega.len();
        let scale = ((1.0 - rho * rho) / dim as f64).sqrt();
        let mut v: Vec<f64> = self
            .omega
            .iter()
            .map(|w| rho * w + scale * self.rng.normal())
            .collect();
        crate::types::normalize(&mut v);
        self.omega = v;
    }

    fn step_box(&mut self) {
        let b = &mut self.bbox;
        b.x = (b.x + 6.0 * self.rng.normal()).clamp(0.0, FRAME_W - b.w);
        b.y = (b.y + 4.0 * self.rng.normal()).clamp(0.0, FRAME_H - b.h);
    }
}

fn init_identity(cfg: &GeneratorConfig, global_id: u32, drift_dim: usize) -> IdentityState {
    let mut rng = Rng::substream(cfg.seed, STREAM_APPEARANCE, global_id as u64);
    let base = rng.unit_vec(cfg.id_signal_dim);
    let omega = rng.unit_vec(drift_dim);

    let mut layout = Rng::substream(cfg.seed, STREAM_LAYOUT, global_id as u64);
    let w = layout.range(30.0, 60.0);
    let h = 2.0 * w * layout.range(0.9, 1.1);
    let x = layout.range(0.0, FRAME_W - w);
    let y = layout.range(0.0, FRAME_H - h);
    IdentityState {
        global_id,
        base,
        omega,
        bbox: BoxGeom::new(x, y, w, h),
        rng,
    }
}

/// Generate a clean dataset: observable fields equal ground truth, all
/// identities labeled, confidence 1. Deterministic for a fixed seed.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let rho = calibrate_rho(cfg.decay_sigma);
    let domains: Vec<DomainSignal> = (0..cfg.num_domains).map(|d| domain_signal(cfg, d)).collect();
    let basis = drift_basis(cfg);

    let mut frames = Vec::with_capacity(cfg.total_frames() as usize);
    let mut next_identity: u32 = 0;
    let mut frame_id: u64 = 0;

    for domain in 0..cfg.num_domains {
        for v in 0..cfg.videos_per_domain {
            let video_id = domain * cfg.videos_per_domain + v;
            let mut idents: Vec<IdentityState> = (0..cfg.identities_per_video)
                .map(|_| {
                    let st = init_identity(cfg, next_identity, basis.len());
                    next_identity += 1;
                    st
                })
                .collect();
            let mut noise_rng = Rng::substream(cfg.seed, STREAM_NOISE, video_id as u64);

            for t in 0..cfg.frames_per_video {
                let half = if t < cfg.frames_per_video / 2 {
                    Half::First
                } else {
                    Half::Second
                };
                let mut boxes = Vec::with_capacity(idents.len());
                for ident in idents.iter_mut() {
                    if t > 0 {
                        ident.step_walk(rho);
                        ident.step_box();
                    }
                    let appearance = ident.appearance(cfg.decay_floor, &basis);
                    let feature =
                        assemble_feature(cfg, &appearance, &domains[domain as usize], &mut noise_rng);
                    boxes.push(BoxAnn {
                        frame_id,
                        video_id,
                        domain_id: domain,
                        bbox: ident.bbox,
                        confidence: 1.0,
                        identity: Some(ident.global_id),
                        source: Source::Original,
                        feature,
                        gt_identity: Some(ident.global_id),
                        gt_box: Some(ident.bbox),
                    });
                }
                frames.push(Frame {
                    frame_id,
                    video_id,
                    domain_id: domain,
                    frame_index: t,
                    half,
                    boxes,
                });
                frame_id += 1;
            }
        }
    }

    Ok(Dataset {
        frames,
        generator: cfg.clone(),
    })
}

/// Inject observable noise: box jitter with confidence degradation and
/// feature dilution, identity-label omission, and false background boxes.
/// Ground-truth fields are never modified.
pub fn corrupt(dataset: &Dataset, cfg: &GeneratorConfig) -> Dataset {
    let domains: Vec<DomainSignal> = (0..cfg.num_domains).map(|d| domain_signal(cfg, d)).collect();

    // Tracklet-boundary omission windows per labeled identity.
    let mut omit: std::collections::BTreeMap<u32, std::ops::Range<u32>> =
        std::collections::BTreeMap::new();
    for frame in &dataset.frames {
        for b in &frame.boxes {
            if let Some(id) = b.identity {
                omit.entry(id).or_insert_with(|| {
                    let mut r = Rng::substream(cfg.seed, STREAM_CORRUPT, 0x10_0000 + id as u64);
                    omission_window(cfg.omission_rate, cfg.frames_per_video, &mut r)
                });
            }
        }
    }

    let mut frames = Vec::with_capacity(dataset.frames.len());

    for frame in &dataset.frames {
        let mut rng = Rng::substream(cfg.seed, STREAM_CORRUPT, frame.frame_id);
        let mut boxes = Vec::with_capacity(frame.boxes.len());

        for b in &frame.boxes {
            let mut nb = b.clone();
            let gt = b.gt_box.unwrap_or(b.bbox);
            if cfg.jitter_std > 0.0 {
                let scale = if rng.bernoulli(HEAVY_JITTER_RATE) {
                    HEAVY_JITTER_SCALE
                } else {
                    LIGHT_JITTER_SCALE
                };
                let sigma = scale * cfg.jitter_std;
                let jb = BoxGeom::new(
                    gt.x + rng.normal() * sigma * gt.w,
                    gt.y + rng.normal() * sigma * gt.h,
                    (gt.w * (1.0 + rng.normal() * sigma)).max(2.0),
                    (gt.h * (1.0 + rng.normal() * sigma)).max(2.0),
                );
                nb.bbox = jb;
            }
            let q = nb.bbox.iou(&gt);
            nb.confidence = (1.0 - CONF_KAPPA * (1.0 - q)).clamp(0.0, 1.0);
            if q < 1.0 {
                // A misaligned crop mixes person appearance with background
                // seen through the same camera response.
                let gain = &domains[frame.domain_id as usize].gain;
                let clutter = rng.unit_vec(cfg.id_signal_dim);
                for (k, c) in clutter.iter().enumerate() {
                    nb.feature[k] = q * nb.feature[k] + (1.0 - q) * gain[k] * c;
                }
            }
            if let Some(id) = nb.identity {
                if omit.get(&id).is_some_and(|w| w.contains(&frame.frame_index)) {
                    nb.identity = None;
                }
            }
            boxes.push(nb);
        }

        // Detector-style false positives: partial-person crops that mix a
        // visible person's appearance with background clutter.
        let n_true = frame.boxes.len();
        for _ in 0..n_true {
            if !rng.bernoulli(cfg.false_box_rate) {
                continue;
            }
            let w = rng.range(20.0, 70.0);
            let h = 2.0 * w * rng.range(0.8, 1.2);
            let bbox = BoxGeom::new(
                rng.range(0.0, (FRAME_W - w).max(1.0)),
                rng.range(0.0, (FRAME_H - h).max(1.0)),
                w,
                h,
            );
            let mut clutter = rng.unit_vec(cfg.id_signal_dim);
            {
                // Mimic the identity core of a person from another video of
                // the same domain, so the crop is a plausible distractor but
                // never matches this video's identity set.
                let ids_per_dom = cfg.videos_per_domain * cfg.identities_per_video;
                let dom_first = frame.domain_id * ids_per_dom;
                let video_first =
                    frame.video_id * cfg.identities_per_video;
                let victim = loop {
                    let cand = dom_first + rng.below(ids_per_dom as usize) as u32;
                    if cfg.videos_per_domain == 1
                        || cand < video_first
                        || cand >= video_first + cfg.identities_per_video
                    {
                        break cand;
                    }
                };
                let vbase = init_identity(cfg, victim, 1).base;
                for (c, pb) in clutter.iter_mut().zip(&vbase) {
                    *c = FALSE_BOX_PERSON_MIX * pb + (1.0 - FALSE_BOX_PERSON_MIX) * *c;
                }
            }
            let feature =
                assemble_feature(cfg, &clutter, &domains[frame.domain_id as usize], &mut rng);
            boxes.push(BoxAnn {
                frame_id: frame.frame_id,
                video_id: frame.video_id,
                domain_id: frame.domain_id,
                bbox,
                confidence: rng.range(0.05, 0.25),
                identity: None,
                source: Source::Auxiliary,
                feature,
                gt_identity: None,
                gt_box: None,
            });
        }

        frames.push(Frame {
            boxes,
            ..frame.clone()
        });
    }

    Dataset {
        frames,
        generator: dataset.generator.clone(),
    }
}

/// Split by domain id into (train = all other domains, heldout = one domain).
pub fn split(dataset: &Dataset, holdout_domain: u32) -> Result<(Dataset, Dataset)> {
    let k = dataset.generator.num_domains;
    if k < 2 {
        return Err(Error::Config(format!(
            "need at least 2 domains to split, have {k}"
        )));
    }
    if holdout_domain >= k {
        return Err(Error::Config(format!(
            "holdout domain {holdout_domain} out of range (K = {k})"
        )));
    }
    let (heldout, train): (Vec<Frame>, Vec<Frame>) = dataset
        .frames
        .iter()
        .cloned()
        .partition(|f| f.domain_id == holdout_domain);
    Ok((
        Dataset {
            frames: train,
            generator: dataset.generator.clone(),
        },
        Dataset {
            frames: heldout,
            generator: dataset.generator.clone(),
        },
    ))
}
