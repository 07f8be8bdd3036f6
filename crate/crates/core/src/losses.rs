//! IoU-guided classification loss, box regression losses, the denoising
//! loss and the weighted total objective.

use alloc::vec::Vec;

use crate::data::GroundTruth;
use crate::decoder::{boxes_of, LayerOutput};
use crate::geom::{iou_cxcywh, BoxCxCyWH};
use crate::matching::{hungarian, match_cost_matrix, Assignment, MatchCoeffs, PROB_EPS};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_dn: f64,
    /// Kept for configuration compatibility; the IoU-guided loss has no
    /// class-balance factor.
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 6.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            lambda_dn: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_l1, self.lambda_giou, self.lambda_dn, self.focal_gamma];
        if all.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub matching: MatchCoeffs,
    /// Match every layer independently instead of reusing the last layer's
    /// assignment.
    pub per_layer_matching: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            matching: MatchCoeffs::default(),
            per_layer_matching: true,
        }
    }
}

/// Per-layer diagnostics and unweighted components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerLoss {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub dn_cls: f64,
    pub dn_l1: f64,
    pub dn_giou: f64,
    pub mean_matched_iou: f64,
    pub mean_dn_iou: f64,
    pub mean_dn_weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    /// Layer means of the matching-branch components.
    pub cls: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    /// Weighted denoising loss, averaged over layers.
    pub dn: f64,
    pub total: f64,
    pub layers: Vec<LayerLoss>,
}

/// Plain-value form of one term of the IoU-guided loss:
/// `|t − p|^γ · BCE(p, t)` with `p` clamped.
pub fn iou_guided_term(p: f64, t: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let bce = -(t * libm::log(p) + (1.0 - t) * libm::log(1.0 - p));
    libm::pow((t - p).abs(), gamma) * bce
}

/// Row-major `n_queries x n_classes` targets: the localization quality `s`
/// at each positive `(query, class)` and zero elsewhere.
pub fn cls_targets(n_queries: usize, n_classes: usize, positives: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut t = alloc::vec![0.0; n_queries * n_classes];
    for &(q, c, s) in positives {
        t[q * n_classes + c] = s.clamp(0.0, 1.0);
    }
    t
}

/// Sum over all queries and classes of `|t − p|^γ · BCE(p, t)`, divided by
/// `norm`. Targets are constants.
pub fn iou_guided_cls_loss(g: &mut Graph, logits: Var, targets: &[f64], gamma: f64, norm: f64) -> Result<Var> {
    let (r, c) = g.shape(logits);
    let p = g.sigmoid(logits);
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let t = g.constant_from(r, c, targets.to_vec())?;
    let one_minus_t = g.constant_from(r, c, targets.iter().map(|v| 1.0 - v).collect())?;
    let lp = g.ln(p);
    let q = g.scale(p, -1.0);
    let q = g.add_const(q, &alloc::vec![1.0; r * c])?;
    let lq = g.ln(q);
    let a = g.mul(t, lp)?;
    let b = g.mul(one_minus_t, lq)?;
    let s = g.add(a, b)?;
    let bce = g.scale(s, -1.0);
    let diff = g.sub(p, t)?;
    let w = g.pow_abs(diff, gamma);
    let terms = g.mul(w, bce)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / norm))
}

/// Corners `(x0, y0, x1, y1)` of a `k x 4` center/size matrix, each `k x 1`.
fn corners(g: &mut Graph, b: Var) -> Result<[Var; 4]> {
    let cx = g.slice_cols(b, 0, 1)?;
    let cy = g.slice_cols(b, 1, 1)?;
    let w = g.slice_cols(b, 2, 1)?;
    let h = g.slice_cols(b, 3, 1)?;
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
}

/// `k x 1` GIoU between predicted rows and constant targets.
pub fn giou_var(g: &mut Graph, pred: Var, gts: &[BoxCxCyWH]) -> Result<Var> {
    let [x0, y0, x1, y1] = corners(g, pred)?;
    let gc: Vec<_> = gts.iter().map(|b| b.to_xyxy()).collect();
    let col = |f: fn(&crate::geom::BoxXYXY) -> f64| gc.iter().map(f).collect::<Vec<f64>>();
    let (gx0, gy0, gx1, gy1) = (col(|b| b.x0), col(|b| b.y0), col(|b| b.x1), col(|b| b.y1));
    let garea: Vec<f64> = gc.iter().map(|b| b.area()).collect();

    let ix0 = g.max_const(x0, &gx0)?;
    let iy0 = g.max_const(y0, &gy0)?;
    let ix1 = g.min_const(x1, &gx1)?;
    let iy1 = g.min_const(y1, &gy1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;

    let pw = g.sub(x1, x0)?;
    let ph = g.sub(y1, y0)?;
    let parea = g.mul(pw, ph)?;
    let sum_area = g.add_const(parea, &garea)?;
    let union = g.sub(sum_area, inter)?;
    let iou = g.div(inter, union)?;

    let hx0 = g.min_const(x0, &gx0)?;
    let hy0 = g.min_const(y0, &gy0)?;
    let hx1 = g.max_const(x1, &gx1)?;
    let hy1 = g.max_const(y1, &gy1)?;
    let hw = g.sub(hx1, hx0)?;
    let hh = g.sub(hy1, hy0)?;
    let hull = g.mul(hw, hh)?;
    let gap = g.sub(hull, union)?;
    let frac = g.div(gap, hull)?;
    Ok(g.sub(iou, frac)?)
}

/// `(Σ L1, Σ (1 − GIoU))` over the given prediction rows against `gts`,
/// both divided by `norm`.
pub fn box_loss(g: &mut Graph, boxes: Var, rows: &[usize], gts: &[BoxCxCyWH], norm: f64) -> Result<(Var, Var)> {
    let idx: Vec<usize> = rows.iter().flat_map(|&r| (4 * r)..(4 * r + 4)).collect();
    let pred = g.gather(boxes, idx, rows.len(), 4)?;
    let target: Vec<f64> = gts.iter().flat_map(|b| b.to_array()).collect();
    let neg: Vec<f64> = target.iter().map(|v| -v).collect();
    let d = g.add_const(pred, &neg)?;
    let d = g.abs(d);
    let l1 = g.sum(d);
    let l1 = g.scale(l1, 1.0 / norm);
    let gi = giou_var(g, pred, gts)?;
    let s = g.sum(gi);
    let n = rows.len() as f64;
    // Σ(1 − giou) = n − Σ giou
    let s = g.scale(s, -1.0);
    let s = g.add_const(s, &[n])?;
    Ok((l1, g.scale(s, 1.0 / norm)))
}

/// Hungarian assignment of one layer's matching predictions.
pub fn match_layer(g: &mut Graph, out: &LayerOutput, gts: &[GroundTruth], n_classes: usize, coeffs: &MatchCoeffs) -> Assignment {
    let boxes = boxes_of(g, out.match_boxes);
    let probs: Vec<f64> = g.stopped(out.match_logits).iter().map(|&z| crate::encode::sigmoid(z)).collect();
    hungarian(&match_cost_matrix(&boxes, &probs, n_classes, gts, coeffs))
}

struct Components {
    cls: Var,
    l1: Option<Var>,
    giou: Option<Var>,
    mean_iou: f64,
}

/// Classification and box components for predictions paired with ground
/// truths (`pairs` of `(row, gt index)`), normalized by `norm`.
fn set_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    pairs: &[(usize, usize)],
    gts: &[GroundTruth],
    gamma: f64,
    norm: f64,
) -> Result<Components> {
    let (nq, nc) = g.shape(logits);
    let pred = boxes_of(g, boxes);
    let ious: Vec<f64> = pairs.iter().map(|&(r, k)| iou_cxcywh(&pred[r], &gts[k].bbox)).collect();
    let positives: Vec<(usize, usize, f64)> = pairs
        .iter()
        .zip(&ious)
        .map(|(&(r, k), &s)| (r, gts[k].class, s))
        .collect();
    let cls = iou_guided_cls_loss(g, logits, &cls_targets(nq, nc, &positives), gamma, norm)?;
    let mean_iou = if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    if pairs.is_empty() {
        return Ok(Components {
            cls,
            l1: None,
            giou: None,
            mean_iou,
        });
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let targets: Vec<BoxCxCyWH> = pairs.iter().map(|p| gts[p.1].bbox).collect();
    let (l1, giou) = box_loss(g, boxes, &rows, &targets, pairs.len() as f64)?;
    Ok(Components {
        cls,
        l1: Some(l1),
        giou: Some(giou),
        mean_iou,
    })
}

/// Denoising loss of one layer: query `j` of each group reconstructs ground
/// truth `j`. Normalized by the number of denoising queries.
pub fn dn_layer_loss(
    g: &mut Graph,
    out: &LayerOutput,
    targets: &[GroundTruth],
    weights: &LossWeights,
) -> Result<Option<(Var, [f64; 3])>> {
    let (Some(logits), Some(boxes)) = (out.dn_logits, out.dn_boxes) else {
        return Ok(None);
    };
    let pairs: Vec<(usize, usize)> = (0..targets.len()).map(|j| (j, j)).collect();
    let c = set_loss(g, logits, boxes, &pairs, targets, weights.focal_gamma, targets.len() as f64)?;
    let (l1, giou) = (c.l1.expect("non-empty"), c.giou.expect("non-empty"));
    let parts = [g.scalar(c.cls), g.scalar(l1), g.scalar(giou)];
    let a = g.scale(c.cls, weights.lambda_cls);
    let b = g.scale(l1, weights.lambda_l1);
    let d = g.scale(giou, weights.lambda_giou);
    let s = g.add(a, b)?;
    Ok(Some((g.add(s, d)?, parts)))
}

/// `λ_cls·cls + λ_l1·l1 + λ_giou·giou + λ_dn·dn`.
pub fn total_loss(cls: f64, l1: f64, giou: f64, dn: f64, w: &LossWeights) -> Result<f64> {
    for (v, name) in [(cls, "cls"), (l1, "box_l1"), (giou, "box_giou"), (dn, "dn")] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(w.lambda_cls * cls + w.lambda_l1 * l1 + w.lambda_giou * giou + w.lambda_dn * dn)
}

/// Full objective of one scene over every decoder layer. Returns the loss
/// node and its report.
pub fn scene_objective(
    g: &mut Graph,
    outs: &[LayerOutput],
    gts: &[GroundTruth],
    dn_targets: &[GroundTruth],
    n_classes: usize,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossReport)> {
    let w = &cfg.weights;
    let norm = gts.len().max(1) as f64;
    let n_layers = outs.len() as f64;
    let shared = match (cfg.per_layer_matching, outs.last()) {
        (false, Some(last)) => Some(match_layer(g, last, gts, n_classes, &cfg.matching)),
        _ => None,
    };
    let mut terms: Vec<Var> = Vec::new();
    let mut report = LossReport::default();
    for out in outs {
        let assignment = match &shared {
            Some(a) => a.clone(),
            None => match_layer(g, out, gts, n_classes, &cfg.matching),
        };
        let c = set_loss(g, out.match_logits, out.match_boxes, &assignment.pairs, gts, w.focal_gamma, norm)?;
        let mut layer = LayerLoss {
            cls: g.scalar(c.cls),
            mean_matched_iou: c.mean_iou,
            ..Default::default()
        };
        terms.push(g.scale(c.cls, w.lambda_cls / n_layers));
        if let (Some(l1), Some(giou)) = (c.l1, c.giou) {
            layer.l1 = g.scalar(l1);
            layer.giou = g.scalar(giou);
            terms.push(g.scale(l1, w.lambda_l1 / n_layers));
            terms.push(g.scale(giou, w.lambda_giou / n_layers));
        }
        if let Some((dn, parts)) = dn_layer_loss(g, out, dn_targets, w)? {
            [layer.dn_cls, layer.dn_l1, layer.dn_giou] = parts;
            layer.mean_dn_iou = mean(&out.dn_ious);
            layer.mean_dn_weight = mean(&out.dn_weights);
            report.dn += g.scalar(dn) / n_layers;
            terms.push(g.scale(dn, w.lambda_dn / n_layers));
        }
        report.cls += layer.cls / n_layers;
        report.box_l1 += layer.l1 / n_layers;
        report.box_giou += layer.giou / n_layers;
        report.layers.push(layer);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    report.total = g.scalar(loss);
    total_loss(report.cls, report.box_l1, report.box_giou, report.dn, w)?;
    Ok((loss, report))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::giou_cxcywh;
    use crate::tensor::Tensor;

    #[test]
    fn hand_evaluated_positive_term() {
        // BCE(0.5, 0.8) = ln 2
        let expected = 0.09 * core::f64::consts::LN_2;
        assert!((iou_guided_term(0.5, 0.8, 2.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_quality_positive_is_a_negative() {
        let p = 0.3;
        let neg = libm::pow(p, 2.0) * -libm::log(1.0 - p);
        assert!((iou_guided_term(p, 0.0, 2.0) - neg).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_matches_plain_terms() {
        let z = [0.3, -1.2, 2.0, 0.1, -0.4, 0.9];
        let t = cls_targets(2, 3, &[(0, 2, 0.8), (1, 0, 0.4)]);
        let mut g = Graph::new();
        let logits = g.constant(&Tensor::new(2, 3, z.to_vec()).unwrap());
        let l = iou_guided_cls_loss(&mut g, logits, &t, 2.0, 2.0).unwrap();
        let plain: f64 = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| iou_guided_term(crate::encode::sigmoid(z), t, 2.0))
            .sum::<f64>()
            / 2.0;
        assert!((g.scalar(l) - plain).abs() < 1e-12);
    }

    #[test]
    fn target_fixed_point_is_near_zero() {
        let s = 0.7;
        let zs = [crate::encode::inv_sigmoid(s), -40.0];
        let t = cls_targets(1, 2, &[(0, 0, s)]);
        let mut g = Graph::new();
        let logits = g.constant(&Tensor::new(1, 2, zs.to_vec()).unwrap());
        let l = iou_guided_cls_loss(&mut g, logits, &t, 2.0, 1.0).unwrap();
        assert!(g.scalar(l) < 1e-12);
    }

    #[test]
    fn graph_giou_matches_geometry() {
        let preds = [BoxCxCyWH::new(0.1, 0.1, 0.2, 0.2), BoxCxCyWH::new(0.5, 0.5, 0.3, 0.1)];
        let gts = [BoxCxCyWH::new(0.2, 0.2, 0.2, 0.2), BoxCxCyWH::new(0.9, 0.8, 0.1, 0.1)];
        let mut g = Graph::new();
        let data: Vec<f64> = preds.iter().flat_map(|b| b.to_array()).collect();
        let p = g.constant(&Tensor::new(2, 4, data).unwrap());
        let v = giou_var(&mut g, p, &gts).unwrap();
        for i in 0..2 {
            assert!((g.value(v)[i] - giou_cxcywh(&preds[i], &gts[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn box_loss_values() {
        let a = BoxCxCyWH::new(0.5, 0.5, 0.2, 0.2);
        let b = BoxCxCyWH::new(0.6, 0.5, 0.2, 0.2);
        let mut g = Graph::new();
        let p = g.constant(&Tensor::new(2, 4, [a.to_array(), a.to_array()].concat()).unwrap());
        let (l1, gi) = box_loss(&mut g, p, &[0], &[a], 1.0).unwrap();
        assert_eq!((g.scalar(l1), g.scalar(gi)), (0.0, 0.0));
        let (l1, gi) = box_loss(&mut g, p, &[1], &[b], 1.0).unwrap();
        assert!((g.scalar(l1) - 0.1).abs() < 1e-12);
        assert!((g.scalar(gi) - (1.0 - giou_cxcywh(&a, &b))).abs() < 1e-12);
    }

    #[test]
    fn total_is_linear_and_rejects_nan() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let base = total_loss(1.0, 1.0, 1.0, 0.5, &w).unwrap();
        let w2 = LossWeights {
            lambda_dn: 2.0,
            ..w
        };
        assert_eq!(total_loss(1.0, 1.0, 1.0, 0.5, &w2).unwrap() - base, 0.5);
        assert_eq!(base, 6.0 + 5.0 + 2.0 + 0.5);
        assert_eq!(total_loss(f64::NAN, 0.0, 0.0, 0.0, &w), Err(Error::NonFinite("cls")));
    }
}
