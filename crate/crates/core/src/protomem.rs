//! Memory banks: labeled identity prototypes, the circular negative queue,
//! per-identity binary half-prototypes, and per-domain prototypes. All are
//! maintained by the same momentum rule; identity and half prototypes are
//! renormalized to unit length after every update, domain prototypes are
//! kept raw.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Embedding, Half};

/// Raw momentum update: m * c + (1 - m) * x.
pub fn momentum_update_raw(c: &[f64], x: &[f64], m: f64) -> Vec<f64> {
    assert_eq!(c.len(), x.len(), "momentum update dimension mismatch");
    c.iter().zip(x).map(|(ci, xi)| m * ci + (1.0 - m) * xi).collect()
}

/// Momentum update followed by renormalization to unit length, as used for
/// identity and half prototypes.
pub fn momentum_update_unit(c: &[f64], x: &[f64], m: f64) -> Vec<f64> {
    let mut v = momentum_update_raw(c, x, m);
    let n = crate::types::normalize(&mut v);
    if n <= 1e-12 {
        // Opposite vectors can cancel; fall back to the newer sample.
        return x.to_vec();
    }
    v
}

/// Closed form of n successive raw momentum updates from a zero-initialized
/// prototype: sum_{i=1..n} m^(n-i) (1-m) x_i.
pub fn expand_series(history: &[Vec<f64>], m: f64) -> Vec<f64> {
    if history.is_empty() {
        return Vec::new();
    }
    let dim = history[0].len();
    let n = history.len();
    let mut out = vec![0.0; dim];
    for (i, x) in history.iter().enumerate() {
        let w = m.powi((n - 1 - i) as i32) * (1.0 - m);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += w * xi;
        }
    }
    out
}

/// Unit-norm prototype per labeled identity, momentum-averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityMemory {
    prototypes: BTreeMap<u32, Vec<f64>>,
    pub dim: usize,
    pub momentum: f64,
}

impl IdentityMemory {
    pub fn new(dim: usize, momentum: f64) -> Self {
        IdentityMemory {
            prototypes: BTreeMap::new(),
            dim,
            momentum,
        }
    }

    /// Fold one observation into the identity's prototype. The first
    /// observation initializes the prototype directly.
    pub fn observe(&mut self, identity: u32, x: &Embedding) {
        debug_assert_eq!(x.dim(), self.dim);
        match self.prototypes.get_mut(&identity) {
            Some(c) => *c = momentum_update_unit(c, x, self.momentum),
            None => {
                self.prototypes.insert(identity, x.as_slice().to_vec());
            }
        }
    }

    pub fn get(&self, identity: u32) -> Option<Embedding> {
        self.prototypes
            .get(&identity)
            .map(|v| Embedding::from_unit(v.clone()))
    }

    pub fn contains(&self, identity: u32) -> bool {
        self.prototypes.contains_key(&identity)
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// Identity -> prototype snapshot, e.g. for label generation.
    pub fn snapshot(&self) -> BTreeMap<u32, Embedding> {
        self.prototypes
            .iter()
            .map(|(id, v)| (*id, Embedding::from_unit(v.clone())))
            .collect()
    }

    pub fn identities(&self) -> impl Iterator<Item = u32> + '_ {
        self.prototypes.keys().copied()
    }

    /// Prototypes as (identity, vector) rows, ascending by identity.
    pub fn rows(&self) -> Vec<(u32, &[f64])> {
        self.prototypes.iter().map(|(id, v)| (*id, v.as_slice())).collect()
    }
}

/// Fixed-capacity circular buffer of unlabeled-instance features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeQueue {
    slots: Vec<Vec<f64>>,
    cursor: usize,
    capacity: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize) -> Self {
        NegativeQueue {
            slots: Vec::with_capacity(capacity),
            cursor: 0,
            capacity,
        }
    }

    /// Append, overwriting the oldest entry once full.
    pub fn push(&mut self, u: &Embedding) {
        if self.capacity == 0 {
            return;
        }
        if self.slots.len() < self.capacity {
            self.slots.push(u.as_slice().to_vec());
        } else {
            self.slots[self.cursor] = u.as_slice().to_vec();
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.slots.iter().map(|v| v.as_slice())
    }
}

/// First-half / second-half prototypes per identity, each updated only from
/// frames of its own half.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HalfPrototypes {
    first: BTreeMap<u32, Vec<f64>>,
    second: BTreeMap<u32, Vec<f64>>,
    pub momentum: f64,
}

impl HalfPrototypes {
    pub fn new(momentum: f64) -> Self {
        HalfPrototypes {
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            momentum,
        }
    }

    fn side_mut(&mut self, half: Half) -> &mut BTreeMap<u32, Vec<f64>> {
        match half {
            Half::First => &mut self.first,
            Half::Second => &mut self.second,
        }
    }

    fn side(&self, half: Half) -> &BTreeMap<u32, Vec<f64>> {
        match half {
            Half::First => &self.first,
            Half::Second => &self.second,
        }
    }

    pub fn observe(&mut self, identity: u32, half: Half, x: &Embedding) {
        let m = self.momentum;
        let side = self.side_mut(half);
        match side.get_mut(&identity) {
            Some(c) => *c = momentum_update_unit(c, x, m),
            None => {
                side.insert(identity, x.as_slice().to_vec());
            }
        }
    }

    pub fn known(&self, identity: u32) -> bool {
        self.first.contains_key(&identity) || self.second.contains_key(&identity)
    }

    /// The opposite half's prototype: the inter-frame positive for an anchor
    /// observed in `anchor_half`. Unset if that half has never been seen.
    pub fn fetch_inter_frame_positive(
        &self,
        identity: u32,
        anchor_half: Half,
    ) -> Result<Option<Embedding>> {
        if !self.known(identity) {
            return Err(Error::Lookup(format!(
                "identity {identity} has no half prototypes"
            )));
        }
        Ok(self
            .side(anchor_half.opposite())
            .get(&identity)
            .map(|v| Embedding::from_unit(v.clone())))
    }

    pub fn get(&self, identity: u32, half: Half) -> Option<Embedding> {
        self.side(half)
            .get(&identity)
            .map(|v| Embedding::from_unit(v.clone()))
    }
}

/// Raw (un-normalized) momentum prototypes, one per training domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPrototypes {
    rows: Vec<Option<Vec<f64>>>,
    pub dim: usize,
    pub momentum: f64,
}

impl DomainPrototypes {
    pub fn new(num_domains: usize, dim: usize, momentum: f64) -> Self {
        DomainPrototypes {
            rows: vec![None; num_domains],
            dim,
            momentum,
        }
    }

    pub fn observe(&mut self, domain: usize, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        match &mut self.rows[domain] {
            Some(c) => *c = momentum_update_raw(c, x, self.momentum),
            slot @ None => *slot = Some(x.to_vec()),
        }
    }

    pub fn get(&self, domain: usize) -> Option<&[f64]> {
        self.rows.get(domain).and_then(|r| r.as_deref())
    }

    pub fn num_domains(&self) -> usize {
        self.rows.len()
    }

    pub fn populated(&self) -> bool {
        self.rows.iter().all(|r| r.is_some())
    }
}

/// All memory banks bundled for the trainer and for checkpointing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBanks {
    pub identities: IdentityMemory,
    pub negatives: NegativeQueue,
    pub halves: HalfPrototypes,
}

impl MemoryBanks {
    pub fn new(dim: usize, momentum: f64, queue_capacity: usize) -> Self {
        MemoryBanks {
            identities: IdentityMemory::new(dim, momentum),
            negatives: NegativeQueue::new(queue_capacity),
            halves: HalfPrototypes::new(momentum),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::from_raw(v).unwrap()
    }

    #[test]
    fn fixed_point_of_raw_update() {
        let c = vec![0.3, -0.7, 0.2];
        let out = momentum_update_raw(&c, &c, 0.9);
        for (a, b) in out.iter().zip(&c) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_raw_updates_from_zero() {
        // c0 = 0, x = 1 twice, m = 0.9: 0.9 * 0.1 + 0.1 = 0.19.
        let c = momentum_update_raw(&[0.0], &[1.0], 0.9);
        let c = momentum_update_raw(&c, &[1.0], 0.9);
        assert!((c[0] - 0.19).abs() < 1e-15);
    }

    #[test]
    fn series_expansion_base_cases() {
        let one = expand_series(&[vec![2.0]], 0.9);
        assert!((one[0] - 0.2).abs() < 1e-15);
        let two = expand_series(&[vec![1.0], vec![1.0]], 0.9);
        assert!((two[0] - 0.19).abs() < 1e-15);
    }

    #[test]
    fn series_matches_iterated_updates() {
        let mut rng = Rng::new(77);
        for _ in 0..100 {
            let n = 1 + rng.below(50);
            let dim = 1 + rng.below(6);
            let m = rng.range(0.05, 0.99);
            let history: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.range(-1.0, 1.0)).collect())
                .collect();
            let mut iterated = vec![0.0; dim];
            for x in &history {
                iterated = momentum_update_raw(&iterated, x, m);
            }
            let closed = expand_series(&history, m);
            for (a, b) in iterated.iter().zip(&closed) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn identity_prototypes_stay_unit_norm() {
        let mut rng = Rng::new(3);
        let mut mem = IdentityMemory::new(8, 0.9);
        for _ in 0..200 {
            let id = rng.below(5) as u32;
            mem.observe(id, &unit(&rng.normal_vec(8)));
        }
        for (_, row) in mem.rows() {
            let n = crate::types::norm(row);
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prototype_initializes_from_first_observation() {
        let mut mem = IdentityMemory::new(4, 0.9);
        let x = unit(&[1.0, 2.0, 3.0, 4.0]);
        mem.observe(9, &x);
        assert_eq!(mem.get(9).unwrap().as_slice(), x.as_slice());
    }

    #[test]
    fn queue_is_fifo_with_overwrite() {
        let mut q = NegativeQueue::new(2);
        let a = unit(&[1.0, 0.0]);
        let b = unit(&[0.0, 1.0]);
        let c = unit(&[-1.0, 0.0]);
        q.push(&a);
        q.push(&b);
        q.push(&c);
        assert_eq!(q.len(), 2);
        let contents: Vec<Vec<f64>> = q.iter().map(|s| s.to_vec()).collect();
        // Oldest (a) overwritten; b and c remain.
        assert!(contents.contains(&b.as_slice().to_vec()));
        assert!(contents.contains(&c.as_slice().to_vec()));
        assert!(!contents.contains(&a.as_slice().to_vec()));
    }

    #[test]
    fn queue_fills_every_slot_exactly_once() {
        // Cursor trace: Q distinct pushes land in Q distinct slots.
        let q_cap = 16;
        let mut q = NegativeQueue::new(q_cap);
        for i in 0..q_cap {
            let theta = (i as f64 + 1.0) * 0.1;
            q.push(&Embedding::from_unit(vec![theta.cos(), theta.sin()]));
        }
        assert_eq!(q.len(), q_cap);
        let markers: std::collections::BTreeSet<u64> =
            q.iter().map(|s| s[0].to_bits()).collect();
        assert_eq!(markers.len(), q_cap);
    }

    #[test]
    fn half_prototypes_are_segregated() {
        let mut rng = Rng::new(4);
        let mut halves = HalfPrototypes::new(0.9);
        let first_x = unit(&rng.normal_vec(4));
        halves.observe(1, Half::First, &first_x);
        let before = halves.get(1, Half::First).unwrap();
        // Second-half updates never touch the first-half prototype.
        for _ in 0..10 {
            halves.observe(1, Half::Second, &unit(&rng.normal_vec(4)));
        }
        assert_eq!(halves.get(1, Half::First).unwrap(), before);
    }

    #[test]
    fn inter_frame_positive_is_opposite_half() {
        let mut halves = HalfPrototypes::new(0.9);
        let fx = unit(&[1.0, 0.0]);
        let sx = unit(&[0.0, 1.0]);
        halves.observe(1, Half::First, &fx);
        assert_eq!(
            halves.fetch_inter_frame_positive(1, Half::Second).unwrap(),
            Some(fx)
        );
        // Identity seen only in the first half: anchor in first half has no
        // positive, and the term is skipped.
        assert_eq!(halves.fetch_inter_frame_positive(1, Half::First).unwrap(), None);
        halves.observe(1, Half::Second, &sx);
        assert_eq!(
            halves.fetch_inter_frame_positive(1, Half::First).unwrap(),
            Some(sx)
        );
        assert!(matches!(
            halves.fetch_inter_frame_positive(42, Half::First),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn half_prototype_tracks_its_halfs_mean() {
        // After many updates the second-half prototype should sit closer to
        // the second-half mean than to the first-half mean.
        use crate::synthdata::{generate_dataset, GeneratorConfig};
        let cfg = GeneratorConfig {
            num_domains: 1,
            videos_per_domain: 1,
            frames_per_video: 60,
            identities_per_video: 4,
            noise_std: 0.0,
            jitter_std: 0.0,
            omission_rate: 0.0,
            false_box_rate: 0.0,
            decay_sigma: 6.0,
            ..GeneratorConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let mut halves = HalfPrototypes::new(0.9);
        let mut mean_first: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        let mut mean_second: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        let mut counts: BTreeMap<(u32, bool), usize> = BTreeMap::new();
        for f in &ds.frames {
            for b in &f.boxes {
                let id = b.identity.unwrap();
                let e = Embedding::from_raw(&b.feature).unwrap();
                halves.observe(id, f.half, &e);
                let (target, is_first) = match f.half {
                    Half::First => (mean_first.entry(id).or_insert_with(|| vec![0.0; e.dim()]), true),
                    Half::Second => (mean_second.entry(id).or_insert_with(|| vec![0.0; e.dim()]), false),
                };
                for (t, x) in target.iter_mut().zip(e.as_slice()) {
                    *t += x;
                }
                *counts.entry((id, is_first)).or_insert(0) += 1;
            }
        }
        for id in 0..cfg.identities_per_video {
            let c2 = halves.get(id, Half::Second).unwrap();
            let m1 = &mean_first[&id];
            let m2 = &mean_second[&id];
            let cos_second = crate::types::cosine(c2.as_slice(), m2);
            let cos_first = crate::types::cosine(c2.as_slice(), m1);
            assert!(
                cos_second > cos_first,
                "identity {id}: {cos_second} vs {cos_first}"
            );
        }
    }

    #[test]
    fn domain_prototypes_stay_raw() {
        let mut domains = DomainPrototypes::new(2, 3, 0.9);
        domains.observe(0, &[1.0, 1.0, 1.0]);
        domains.observe(0, &[1.0, 1.0, 1.0]);
        // Raw momentum from first-observation init keeps the value, no
        // renormalization.
        let p = domains.get(0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(!domains.populated());
        domains.observe(1, &[0.0, 0.0, 2.0]);
        assert!(domains.populated());
    }
}
