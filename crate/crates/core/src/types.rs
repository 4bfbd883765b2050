//! Core data model: annotated frames, boxes, features, and embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BoxGeom;

/// Stand-in for a cropped person's appearance: a raw feature vector of
/// `raw_dim` scalars produced by the synthetic generator.
pub type RawFeature = Vec<f64>;

/// Where an annotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Tracker-style label from the primary annotation stream.
    Original,
    /// Detector-style box from the secondary stream (never carries an
    /// identity of its own).
    Auxiliary,
    /// Identity filled in by missing-label generation.
    Pseudo,
}

/// Which half of its video's frame sequence a frame belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Half {
    First,
    Second,
}

impl Half {
    pub fn opposite(self) -> Half {
        match self {
            Half::First => Half::Second,
            Half::Second => Half::First,
        }
    }
}

/// One annotated person (or clutter) box in a frame.
///
/// The `gt_*` fields are hidden ground truth: they are serialized to a
/// separate sidecar file and are only ever read by evaluation and test code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAnn {
    pub frame_id: u64,
    pub video_id: u32,
    pub domain_id: u32,
    pub bbox: BoxGeom,
    pub confidence: f64,
    pub identity: Option<u32>,
    pub source: Source,
    pub feature: RawFeature,
    #[serde(skip)]
    pub gt_identity: Option<u32>,
    #[serde(skip)]
    pub gt_box: Option<BoxGeom>,
}

impl BoxAnn {
    pub fn is_labeled(&self) -> bool {
        self.identity.is_some()
    }
}

/// One frame of a synthetic video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: u64,
    pub video_id: u32,
    pub domain_id: u32,
    /// Index of the frame within its video; determines `half`.
    pub frame_index: u32,
    pub half: Half,
    pub boxes: Vec<BoxAnn>,
}

/// An immutable collection of frames plus the generator configuration it was
/// built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub generator: crate::synthdata::GeneratorConfig,
}

impl Dataset {
    pub fn num_domains(&self) -> u32 {
        self.generator.num_domains
    }

    /// Distinct (observable) identity labels in frame order.
    pub fn labeled_identities(&self) -> Vec<u32> {
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.frames {
            for b in &f.boxes {
                if let Some(id) = b.identity {
                    seen.insert(id);
                }
            }
        }
        seen.into_iter().collect()
    }

    pub fn num_boxes(&self) -> usize {
        self.frames.iter().map(|f| f.boxes.len()).sum()
    }
}

/// Unit-length identity feature in R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalize a raw vector to unit length.
    pub fn from_raw(v: &[f64]) -> Result<Embedding> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-12 || !norm.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "cannot normalize vector of norm {norm}"
            )));
        }
        Ok(Embedding(v.iter().map(|x| x / norm).collect()))
    }

    /// Wrap a vector that is already (approximately) unit-norm. The check
    /// is loose enough to admit finite-difference probes of unit inputs.
    pub fn from_unit(v: Vec<f64>) -> Embedding {
        debug_assert!({
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (n - 1.0).abs() < 1e-3
        });
        Embedding(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl std::ops::Deref for Embedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Plain dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two raw vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na <= 1e-300 || nb <= 1e-300 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Normalize in place; returns the original norm.
pub fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_rejects_zero_vector() {
        assert!(Embedding::from_raw(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn embedding_normalizes() {
        let e = Embedding::from_raw(&[3.0, 4.0]).unwrap();
        assert!((norm(&e) - 1.0).abs() < 1e-15);
        assert!((e[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_opposite() {
        assert_eq!(Half::First.opposite(), Half::Second);
        assert_eq!(Half::Second.opposite(), Half::First);
    }
}
