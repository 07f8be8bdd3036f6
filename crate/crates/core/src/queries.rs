//! Matching-branch and denoising-branch queries and the attention mask that
//! keeps the two branches, and the denoising groups, mutually invisible.

use alloc::vec::Vec;

use rand::Rng;

use crate::data::GroundTruth;
use crate::features::{self, GridVar};
use crate::geom::{apply_corner_offsets, BoxCxCyWH};
use crate::model::{Model, QueryInit};
use crate::params::Bindings;
use crate::proposals::Proposal;
use crate::tensor::{Graph, Mask, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DnConfig {
    pub groups: usize,
    pub box_noise: f64,
}

impl Default for DnConfig {
    fn default() -> Self {
        Self {
            groups: 5,
            box_noise: 0.4,
        }
    }
}

impl DnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !(self.box_noise >= 0.0) {
            return Err(Error::Config("dn groups >= 1 and box_noise >= 0 required".into()));
        }
        Ok(())
    }
}

/// Anchors and contents of both branches, matching rows first.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub anchors: Vec<BoxCxCyWH>,
    pub contents: Var,
    pub n_match: usize,
    pub dn_groups: Vec<usize>,
    /// Ground truth reconstructed by each denoising query, in row order.
    pub dn_targets: Vec<GroundTruth>,
    pub mask: Mask,
}

impl QuerySet {
    pub fn n_dn(&self) -> usize {
        self.dn_targets.len()
    }
}

/// Block-diagonal visibility over the matching block and each group.
pub fn attention_mask(n_match: usize, group_sizes: &[usize]) -> Mask {
    let n = n_match + group_sizes.iter().sum::<usize>();
    let mut mask = Mask::all_visible(n, n);
    if group_sizes.is_empty() {
        return mask;
    }
    let mut block = alloc::vec![0usize; n];
    let mut start = n_match;
    for (gi, &s) in group_sizes.iter().enumerate() {
        block[start..start + s].fill(gi + 1);
        start += s;
    }
    for r in 0..n {
        for c in 0..n {
            mask.set(r, c, block[r] == block[c]);
        }
    }
    mask
}

/// Shifts the center by up to `noise·(w, h)/2` and scales each side by a
/// factor in `[1 − noise, 1 + noise]`, all uniform, then clamps.
pub fn dn_noisy_box<R: Rng + ?Sized>(gt: &BoxCxCyWH, noise: f64, rng: &mut R) -> BoxCxCyWH {
    if noise == 0.0 {
        return *gt;
    }
    let mut u = || rng.random_range(-noise..=noise);
    let cx = gt.cx + u() * gt.w / 2.0;
    let cy = gt.cy + u() * gt.h / 2.0;
    let w = gt.w * (1.0 + u());
    let h = gt.h * (1.0 + u());
    let c = gt.to_xyxy();
    let n = BoxCxCyWH::new(cx, cy, w, h).to_xyxy();
    apply_corner_offsets(gt, [n.x0 - c.x0, n.y0 - c.y0, n.x1 - c.x1, n.y1 - c.y1])
}

/// A 4 x 4 lattice of quarter-size anchors.
pub fn fallback_anchors() -> Vec<BoxCxCyWH> {
    (0..16)
        .map(|i| BoxCxCyWH::new(0.125 + 0.25 * (i % 4) as f64, 0.125 + 0.25 * (i / 4) as f64, 0.25, 0.25))
        .collect()
}

/// Pooled-region contents for a set of anchors.
pub fn region_contents(g: &mut Graph, p: &Bindings, model: &Model, backbone: GridVar, boxes: &[BoxCxCyWH]) -> Result<Var> {
    let regions = features::roi_pool_var(g, backbone, boxes, model.cfg.roi_size)?;
    Ok(features::neck(g, p, &model.neck, regions)?)
}

/// One query per proposal: the proposal box as anchor and the neck of its
/// pooled backbone region as content.
pub fn init_matching_queries(
    g: &mut Graph,
    p: &Bindings,
    model: &Model,
    backbone: GridVar,
    props: &[Proposal],
) -> Result<(Vec<BoxCxCyWH>, Var)> {
    if props.is_empty() {
        return Err(Error::EmptyProposals);
    }
    let anchors: Vec<BoxCxCyWH> = props.iter().map(|p| p.bbox).collect();
    let contents = region_contents(g, p, model, backbone, &anchors)?;
    Ok((anchors, contents))
}

/// Matching queries for the configured init mode. Proposal init without
/// proposals falls back to [`fallback_anchors`] with zero contents.
pub fn matching_queries(
    g: &mut Graph,
    p: &Bindings,
    model: &Model,
    backbone: GridVar,
    props: &[Proposal],
) -> Result<(Vec<BoxCxCyWH>, Var)> {
    match model.cfg.query_init {
        QueryInit::Hqp => match init_matching_queries(g, p, model, backbone, props) {
            Err(Error::EmptyProposals) => {
                let anchors = fallback_anchors();
                let zeros = g.constant(&Tensor::zeros(anchors.len(), model.cfg.d_model));
                Ok((anchors, zeros))
            }
            other => other,
        },
        QueryInit::Random => {
            let id = model.random_contents.ok_or(Error::Config("model lacks random queries".into()))?;
            Ok((model.random_anchor_boxes(), p.get(id)))
        }
    }
}

/// `groups·|gts|` denoising queries: group-major, ground-truth order within a
/// group, anchored on noisy boxes with contents pooled from those boxes.
pub fn make_dn_queries<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bindings,
    model: &Model,
    backbone: GridVar,
    gts: &[GroundTruth],
    cfg: &DnConfig,
    rng: &mut R,
) -> Result<(Vec<BoxCxCyWH>, Var, Vec<usize>)> {
    if gts.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let mut anchors = Vec::with_capacity(cfg.groups * gts.len());
    for _ in 0..cfg.groups {
        for gt in gts {
            anchors.push(dn_noisy_box(&gt.bbox, cfg.box_noise, rng));
        }
    }
    let contents = region_contents(g, p, model, backbone, &anchors)?;
    Ok((anchors, contents, alloc::vec![gts.len(); cfg.groups]))
}

/// Both branches for one scene. `dn` is `None` at inference and for scenes
/// without ground truth.
pub fn build_queries<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bindings,
    model: &Model,
    backbone: GridVar,
    props: &[Proposal],
    dn: Option<(&[GroundTruth], &DnConfig)>,
    rng: &mut R,
) -> Result<QuerySet> {
    let (mut anchors, mcontents) = matching_queries(g, p, model, backbone, props)?;
    let n_match = anchors.len();
    let (contents, dn_groups, dn_targets) = match dn {
        Some((gts, cfg)) if !gts.is_empty() => {
            let (da, dc, groups) = make_dn_queries(g, p, model, backbone, gts, cfg, rng)?;
            anchors.extend(da);
            let targets = (0..cfg.groups).flat_map(|_| gts.iter().copied()).collect();
            (g.concat_rows(&[mcontents, dc])?, groups, targets)
        }
        _ => (mcontents, Vec::new(), Vec::new()),
    };
    let mask = attention_mask(n_match, &dn_groups);
    Ok(QuerySet {
        anchors,
        contents,
        n_match,
        dn_groups,
        dn_targets,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::iou_cxcywh;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_two_match_one_group() {
        let m = attention_mask(2, &[2]);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m.get(r, c), (r < 2) == (c < 2), "({r},{c})");
            }
        }
    }

    #[test]
    fn mask_without_groups_is_open() {
        let m = attention_mask(3, &[]);
        assert!(m.allowed.iter().all(|&a| a));
    }

    #[test]
    fn groups_do_not_see_each_other() {
        let m = attention_mask(1, &[2, 2]);
        assert!(m.get(1, 2) && !m.get(1, 3) && !m.get(3, 1) && m.get(4, 3) && !m.get(0, 1));
    }

    #[test]
    fn zero_noise_keeps_ground_truth() {
        let b = BoxCxCyWH::new(0.4, 0.5, 0.2, 0.3);
        assert_eq!(dn_noisy_box(&b, 0.0, &mut ChaCha8Rng::seed_from_u64(0)), b);
    }

    #[test]
    fn noisy_boxes_keep_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in 0..1000 {
            let w = 0.05 + 0.5 * (k % 10) as f64 / 10.0;
            let b = BoxCxCyWH::new(w / 2.0 + 0.01, 0.5, w, 0.2);
            let n = dn_noisy_box(&b, 0.4, &mut rng);
            assert!(iou_cxcywh(&n, &b) > 0.0);
            assert!(n.to_xyxy().is_valid());
        }
    }

    #[test]
    fn fallback_grid_tiles_the_image() {
        let a = fallback_anchors();
        assert_eq!(a.len(), 16);
        let area: f64 = a.iter().map(|b| b.w * b.h).sum();
        assert!((area - 1.0).abs() < 1e-12);
    }
}
