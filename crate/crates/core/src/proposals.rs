//! Region proposals: extraction from masks, a statistical stand-in for a
//! segmentation model, recall statistics and box snapping at inference.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, Dataset, Scene};
use crate::eval::Detection;
use crate::geom::{iou_cxcywh, perturb_box, BoxCxCyWH, BoxXYXY};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ProposalSource {
    Emulated,
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Proposal {
    pub bbox: BoxCxCyWH,
    pub source: ProposalSource,
    pub score: Option<f64>,
}

impl Proposal {
    pub fn emulated(bbox: BoxCxCyWH) -> Self {
        Self {
            bbox,
            source: ProposalSource::Emulated,
            score: None,
        }
    }
}

/// Boolean occupancy grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: alloc::vec![false; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }
}

/// Tightest box around the set cells, normalized by the grid size.
pub fn mask_to_bbox(m: &MaskGrid) -> Result<BoxXYXY> {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..m.height {
        for c in 0..m.width {
            if m.get(r, c) {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r + 1);
                c1 = c1.max(c + 1);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    let (h, w) = (m.height as f64, m.width as f64);
    Ok(BoxXYXY::new(c0 as f64 / w, r0 as f64 / h, c1 as f64 / w, r1 as f64 / h))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EmulatorConfig {
    /// Upper bound on proposals per scene.
    pub target_count: usize,
    pub gt_hit_rate: f64,
    /// Corner jitter as a fraction of the object's width and height.
    pub jitter_sigma: f64,
    pub distractor_count: usize,
    /// Side length range of background proposals.
    pub distractor_min_size: f64,
    pub distractor_max_size: f64,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        Self {
            target_count: 180,
            gt_hit_rate: 0.95,
            jitter_sigma: 0.05,
            distractor_count: 4,
            distractor_min_size: 0.1,
            distractor_max_size: 0.5,
        }
    }
}

impl EmulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gt_hit_rate) || !(self.jitter_sigma >= 0.0) {
            return Err(Error::Config("gt_hit_rate in [0,1] and jitter_sigma >= 0 required".into()));
        }
        if self.target_count == 0 {
            return Err(Error::Config("target_count must be positive".into()));
        }
        if !(self.distractor_min_size > 0.0 && self.distractor_min_size <= self.distractor_max_size && self.distractor_max_size <= 1.0) {
            return Err(Error::Config("distractor size range must satisfy 0 < min <= max <= 1".into()));
        }
        Ok(())
    }
}

fn random_box<R: Rng + ?Sized>(cfg: &EmulatorConfig, rng: &mut R) -> BoxCxCyWH {
    let w = rng.random_range(cfg.distractor_min_size..=cfg.distractor_max_size);
    let h = rng.random_range(cfg.distractor_min_size..=cfg.distractor_max_size);
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    BoxCxCyWH::new(cx, cy, w, h)
}

/// Jittered copies of the (clean) ground-truth boxes followed by background
/// boxes, truncated to `target_count`. Never returns an empty list.
pub fn emulate_sam<R: Rng + ?Sized>(scene: &Scene, cfg: &EmulatorConfig, rng: &mut R) -> Vec<Proposal> {
    let mut out = Vec::with_capacity(scene.gts.len() + cfg.distractor_count);
    for gt in &scene.gts {
        if rng.random_bool(cfg.gt_hit_rate) {
            out.push(Proposal::emulated(perturb_box(&gt.bbox, cfg.jitter_sigma, rng)));
        }
    }
    for _ in 0..cfg.distractor_count {
        out.push(Proposal::emulated(random_box(cfg, rng)));
    }
    if out.is_empty() {
        out.push(Proposal::emulated(random_box(cfg, rng)));
    }
    out.truncate(cfg.target_count);
    out
}

/// Emulates proposals for every scene of a dataset from its current boxes,
/// with a per-scene seed derived from `seed`.
pub fn attach_proposals(ds: &mut Dataset, cfg: &EmulatorConfig, seed: u64) {
    for scene in &mut ds.scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, scene.id));
        scene.proposals = Some(emulate_sam(scene, cfg, &mut rng));
    }
}

/// Fraction of ground-truth boxes covered by at least one proposal at IoU
/// `>= iou_thr`.
pub fn proposal_recall(props: &[Proposal], gts: &[BoxCxCyWH], iou_thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let hit = gts
        .iter()
        .filter(|g| props.iter().any(|p| iou_cxcywh(&p.bbox, g) >= iou_thr))
        .count();
    hit as f64 / gts.len() as f64
}

/// Snaps each detection to its best-overlapping proposal when that overlap
/// reaches `snap_thr`. The first proposal wins ties.
pub fn refine_with_proposals(dets: &[Detection], props: &[Proposal], snap_thr: f64) -> Vec<Detection> {
    dets.iter()
        .map(|d| {
            let mut best: Option<(f64, &Proposal)> = None;
            for p in props {
                let u = iou_cxcywh(&d.bbox, &p.bbox);
                if best.is_none_or(|(b, _)| u > b) {
                    best = Some((u, p));
                }
            }
            match best {
                Some((u, p)) if u >= snap_thr => Detection { bbox: p.bbox, ..*d },
                _ => *d,
            }
        })
        .collect()
}
