//! Retrieval and detection metrics.
//!
//! Retrieval: gallery ranked by cosine similarity, average precision as the
//! mean of precision@k over positive ranks, mAP over queries, and the top-1
//! match rate. Detection: greedy score-ordered matching at an IoU threshold
//! with all-points interpolated average precision and recall.

use serde::{Deserialize, Serialize};

use crate::geom::BoxGeom;
use crate::types::Embedding;

#[derive(Debug, Clone)]
pub struct Query {
    pub embedding: Embedding,
    pub identity: u32,
}

#[derive(Debug, Clone)]
pub struct GalleryItem {
    pub embedding: Embedding,
    /// None marks a distractor (clutter) item that is negative for every
    /// query.
    pub identity: Option<u32>,
    pub frame_id: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub per_query_ap: Vec<f64>,
    pub map: f64,
    pub top1: f64,
    /// Queries dropped because the gallery holds no positive for them.
    pub excluded_queries: usize,
}

/// Rank the gallery for each query by cosine similarity (descending, ties to
/// the lower gallery index) and score AP and top-1. Queries without any
/// gallery positive are excluded and reported.
pub fn retrieval_metrics(queries: &[Query], gallery: &[GalleryItem]) -> RetrievalResult {
    let mut per_query_ap = Vec::new();
    let mut top1_hits = 0usize;
    let mut excluded = 0usize;

    for q in queries {
        let num_pos = gallery
            .iter()
            .filter(|g| g.identity == Some(q.identity))
            .count();
        if num_pos == 0 {
            excluded += 1;
            continue;
        }
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        let sims: Vec<f64> = gallery
            .iter()
            .map(|g| q.embedding.dot(&g.embedding))
            .collect();
        order.sort_by(|&a, &b| {
            sims[b]
                .partial_cmp(&sims[a])
                .unwrap()
                .then_with(|| a.cmp(&b))
        });

        let mut tp = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &gi) in order.iter().enumerate() {
            if gallery[gi].identity == Some(q.identity) {
                tp += 1;
                precision_sum += tp as f64 / (rank + 1) as f64;
            }
        }
        per_query_ap.push(precision_sum / num_pos as f64);
        if gallery[order[0]].identity == Some(q.identity) {
            top1_hits += 1;
        }
    }

    let evaluated = per_query_ap.len();
    RetrievalResult {
        map: if evaluated > 0 {
            per_query_ap.iter().sum::<f64>() / evaluated as f64
        } else {
            0.0
        },
        top1: if evaluated > 0 {
            top1_hits as f64 / evaluated as f64
        } else {
            0.0
        },
        per_query_ap,
        excluded_queries: excluded,
    }
}

/// One image's detections (box, score) and its ground-truth boxes.
#[derive(Debug, Clone, Default)]
pub struct DetectionImage {
    pub predictions: Vec<(BoxGeom, f64)>,
    pub ground_truth: Vec<BoxGeom>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Average precision at the IoU threshold, all-points interpolation.
    pub ap: f64,
    pub recall: f64,
    /// Images skipped because they have no ground-truth boxes.
    pub excluded_images: usize,
}

/// Pooled detection evaluation. Within each image, predictions match ground
/// truth greedily in descending score order (ties to the lower prediction
/// index), each ground-truth box at most once, at IoU >= `iou_min`.
pub fn detection_metrics(images: &[DetectionImage], iou_min: f64) -> DetectionResult {
    let mut excluded = 0usize;
    let mut total_gt = 0usize;
    // (score, image index, prediction index, is_tp) pooled across images.
    let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();

    for (img_idx, img) in images.iter().enumerate() {
        if img.ground_truth.is_empty() {
            excluded += 1;
            continue;
        }
        total_gt += img.ground_truth.len();
        let mut order: Vec<usize> = (0..img.predictions.len()).collect();
        order.sort_by(|&a, &b| {
            img.predictions[b]
                .1
                .partial_cmp(&img.predictions[a].1)
                .unwrap()
                .then_with(|| a.cmp(&b))
        });
        let mut gt_used = vec![false; img.ground_truth.len()];
        for &pi in &order {
            let (pbox, score) = &img.predictions[pi];
            let mut best: Option<(usize, f64)> = None;
            for (gi, gbox) in img.ground_truth.iter().enumerate() {
                if gt_used[gi] {
                    continue;
                }
                let v = pbox.iou(gbox);
                if v >= iou_min && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            let tp = if let Some((gi, _)) = best {
                gt_used[gi] = true;
                true
            } else {
                false
            };
            pooled.push((*score, img_idx, pi, tp));
        }
    }

    if total_gt == 0 {
        return DetectionResult {
            ap: 0.0,
            recall: 0.0,
            excluded_images: excluded,
        };
    }
    pooled.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });

    let n = pooled.len();
    let mut precisions = vec![0.0; n];
    let mut tp_counts = vec![0usize; n];
    let mut tp = 0usize;
    for (k, entry) in pooled.iter().enumerate() {
        if entry.3 {
            tp += 1;
        }
        tp_counts[k] = tp;
        precisions[k] = tp as f64 / (k + 1) as f64;
    }
    let matched = tp;

    // All-points interpolation: precision envelope from the right.
    let mut envelope = precisions.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        if pooled[k].3 {
            let recall = tp_counts[k] as f64 / total_gt as f64;
            ap += (recall - prev_recall) * envelope[k];
            prev_recall = recall;
        }
    }

    DetectionResult {
        ap,
        recall: matched as f64 / total_gt as f64,
        excluded_images: excluded,
    }
}
