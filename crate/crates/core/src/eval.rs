//! Average precision with greedy score-ordered matching and all-point
//! interpolation of the precision envelope.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::data::GroundTruth;
use crate::geom::{iou_cxcywh, BoxCxCyWH};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Detection {
    pub scene_id: u64,
    pub bbox: BoxCxCyWH,
    pub class: usize,
    pub score: f64,
}

/// A ground-truth box tagged with its scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub scene_id: u64,
    pub gt: GroundTruth,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Descending score; ties resolved by scene id then box so the result does
/// not depend on input order.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.scene_id.cmp(&b.scene_id))
        .then_with(|| {
            a.bbox
                .to_array()
                .iter()
                .zip(b.bbox.to_array())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// True-positive flags of detections in ranked order. Each detection takes
/// the best-overlapping still unmatched ground truth of its scene.
pub fn match_detections(dets: &[Detection], gts: &[(u64, BoxCxCyWH)], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank(a, b));
    let mut taken = alloc::vec![false; gts.len()];
    order
        .iter()
        .map(|d| {
            let mut best: Option<(f64, usize)> = None;
            for (k, (sid, g)) in gts.iter().enumerate() {
                if *sid != d.scene_id || taken[k] {
                    continue;
                }
                let u = iou_cxcywh(&d.bbox, g);
                if u >= iou_thr && best.is_none_or(|(b, _)| u > b) {
                    best = Some((u, k));
                }
            }
            best.map(|(_, k)| taken[k] = true).is_some()
        })
        .collect()
}

/// Area under the interpolated precision-recall curve from ranked
/// true-positive flags.
pub fn ap_from_flags(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// AP of one class. Zero ground truths give 0.
pub fn average_precision(dets: &[Detection], gts: &[(u64, BoxCxCyWH)], iou_thr: f64) -> f64 {
    ap_from_flags(&match_detections(dets, gts, iou_thr), gts.len())
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassAp {
    pub class: usize,
    pub n_gt: usize,
    /// One entry per evaluated threshold.
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub thresholds: Vec<f64>,
    pub per_class: Vec<ClassAp>,
    pub map50: f64,
    pub ap75: f64,
    /// Mean over classes and over every evaluated threshold.
    pub map_50_95: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-class AP at every threshold plus the summary means. Classes without
/// ground truth are listed with `n_gt = 0` but left out of every mean.
pub fn evaluate(dets: &[Detection], gts: &[SceneBox], n_classes: usize, thresholds: &[f64]) -> MetricsReport {
    let mut per_class = Vec::with_capacity(n_classes);
    let mut at50 = Vec::new();
    let mut at75 = Vec::new();
    for class in 0..n_classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class == class).copied().collect();
        let cg: Vec<(u64, BoxCxCyWH)> = gts
            .iter()
            .filter(|g| g.gt.class == class)
            .map(|g| (g.scene_id, g.gt.bbox))
            .collect();
        let ap: Vec<f64> = thresholds.iter().map(|&t| average_precision(&cd, &cg, t)).collect();
        if !cg.is_empty() {
            at50.push(average_precision(&cd, &cg, 0.5));
            at75.push(average_precision(&cd, &cg, 0.75));
        }
        per_class.push(ClassAp {
            class,
            n_gt: cg.len(),
            ap,
        });
    }
    let present = || per_class.iter().filter(|c| c.n_gt > 0);
    MetricsReport {
        thresholds: thresholds.to_vec(),
        map50: mean(at50.into_iter()),
        ap75: mean(at75.into_iter()),
        map_50_95: mean(present().map(|c| mean(c.ap.iter().copied()))),
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(scene_id: u64, bbox: BoxCxCyWH, score: f64) -> Detection {
        Detection {
            scene_id,
            bbox,
            class: 0,
            score,
        }
    }

    #[test]
    fn single_perfect_detection() {
        let b = BoxCxCyWH::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(average_precision(&[det(0, b, 0.1)], &[(0, b)], 0.5), 1.0);
        assert_eq!(average_precision(&[], &[(0, b)], 0.5), 0.0);
        assert_eq!(average_precision(&[], &[], 0.5), 0.0);
    }

    #[test]
    fn hand_walked_curve() {
        let g1 = BoxCxCyWH::new(0.2, 0.2, 0.2, 0.2);
        let g2 = BoxCxCyWH::new(0.7, 0.7, 0.2, 0.2);
        let miss = BoxCxCyWH::new(0.5, 0.2, 0.05, 0.05);
        let dets = [det(0, g1, 0.9), det(0, miss, 0.8), det(0, g2, 0.7)];
        let ap = average_precision(&dets, &[(0, g1), (0, g2)], 0.5);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn duplicates_count_once() {
        let b = BoxCxCyWH::new(0.5, 0.5, 0.2, 0.2);
        let flags = match_detections(&[det(0, b, 0.9), det(0, b, 0.8)], &[(0, b)], 0.5);
        assert_eq!(flags, [true, false]);
    }

    #[test]
    fn detections_only_match_their_scene() {
        let b = BoxCxCyWH::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(average_precision(&[det(1, b, 0.9)], &[(0, b)], 0.5), 0.0);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let b = BoxCxCyWH::new(0.5, 0.5, 0.2, 0.2);
        let gts = [SceneBox {
            scene_id: 0,
            gt: GroundTruth::new(b, 0),
        }];
        let r = evaluate(&[det(0, b, 0.9)], &gts, 3, &coco_thresholds());
        assert_eq!((r.map50, r.ap75, r.map_50_95), (1.0, 1.0, 1.0));
        assert_eq!(r.per_class[2].n_gt, 0);
    }
}
