//! Synthetic detection scenes and the pseudo-label corruption protocol.
//!
//! A scene is a small RGB raster holding one to four axis-aligned textured
//! rectangles. Each class has its own base color; texture and background are
//! uniform noise. Ground-truth boxes are the exact pixel extents of the
//! rectangles, so the label oracle is exact by construction.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{iou_cxcywh, perturb_box, BoxCxCyWH, BoxXYXY};
use crate::image::Image;
use crate::proposals::Proposal;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroundTruth {
    pub bbox: BoxCxCyWH,
    pub class: usize,
}

impl GroundTruth {
    pub const fn new(bbox: BoxCxCyWH, class: usize) -> Self {
        Self { bbox, class }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    /// Seed the scene was rendered from.
    pub seed: u64,
    pub image: Image,
    pub gts: Vec<GroundTruth>,
    pub proposals: Option<Vec<Proposal>>,
    pub corrupted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct GenConfig {
    pub n_scenes: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Sampling weights of the common, moderate and rare class tiers.
    pub tier_weights: [f64; 3],
    /// Object side length range as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest IoU allowed between two ground-truth boxes of a scene.
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_scenes: 2000,
            image_size: 32,
            n_classes: 3,
            min_objects: 1,
            max_objects: 4,
            tier_weights: [3.0, 2.0, 1.0],
            min_size: 0.2,
            max_size: 0.5,
            max_overlap: 0.7,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.image_size < 4 || self.n_classes == 0 {
            return bad("image_size >= 4 and n_classes >= 1 required");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return bad("size range must satisfy 0 < min <= max <= 1");
        }
        if self.tier_weights.iter().any(|&w| !(w > 0.0)) {
            return bad("tier weights must be positive");
        }
        Ok(())
    }

    /// Tier of each class: the first third of the class ids is common, the
    /// next third moderate, the rest rare.
    pub fn class_tier(&self, class: usize) -> usize {
        let per = self.n_classes.div_ceil(3);
        (class / per).min(2)
    }

    pub fn class_weights(&self) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| self.tier_weights[self.class_tier(c)])
            .collect()
    }
}

/// Mixes a master seed with a scene id (SplitMix64 finalizer).
pub fn derive_seed(master: u64, id: u64) -> u64 {
    let mut z = master ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Base RGB color of a class: evenly spaced hues at high saturation.
pub fn class_color(class: usize, n_classes: usize) -> [u8; 3] {
    let h = class as f64 / n_classes.max(1) as f64 * 6.0;
    let (s, v) = (0.85, 0.95);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to = |u: f64| libm::round((u + m) * 255.0) as u8;
    [to(r), to(g), to(b)]
}

fn sample_class<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.random_range(0.0..total);
    for (c, &w) in weights.iter().enumerate() {
        if t < w {
            return c;
        }
        t -= w;
    }
    weights.len() - 1
}

fn jitter<R: Rng + ?Sized>(base: u8, amp: i32, rng: &mut R) -> u8 {
    (base as i32 + rng.random_range(-amp..=amp)).clamp(0, 255) as u8
}

/// Renders one scene. Later objects are painted over earlier ones.
pub fn gen_scene<R: Rng + ?Sized>(cfg: &GenConfig, id: u64, seed: u64, rng: &mut R) -> Scene {
    let s = cfg.image_size;
    let mut image = Image::new(s, s);
    let bg = rng.random_range(40u8..=110);
    for y in 0..s {
        for x in 0..s {
            let v = jitter(bg, 30, rng);
            image.set(y, x, [v, jitter(v, 6, rng), jitter(v, 6, rng)]);
        }
    }

    let weights = cfg.class_weights();
    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let min_px = libm::round(cfg.min_size * s as f64).max(1.0) as usize;
    let max_px = (libm::round(cfg.max_size * s as f64) as usize).clamp(min_px, s);
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class = sample_class(&weights, rng);
        for _attempt in 0..50 {
            let w = rng.random_range(min_px..=max_px);
            let h = rng.random_range(min_px..=max_px);
            let x0 = rng.random_range(0..=s - w);
            let y0 = rng.random_range(0..=s - h);
            let bbox = BoxXYXY::new(
                x0 as f64 / s as f64,
                y0 as f64 / s as f64,
                (x0 + w) as f64 / s as f64,
                (y0 + h) as f64 / s as f64,
            )
            .to_cxcywh();
            if gts.iter().any(|g| iou_cxcywh(&g.bbox, &bbox) > cfg.max_overlap) {
                continue;
            }
            let base = class_color(class, cfg.n_classes);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    image.set(y, x, base.map(|c| jitter(c, 25, rng)));
                }
            }
            gts.push(GroundTruth::new(bbox, class));
            break;
        }
    }
    Scene {
        id,
        seed,
        image,
        gts,
        proposals: None,
        corrupted: false,
    }
}

/// Regenerates the scene with the given id from the configuration alone.
pub fn scene_from_seed(cfg: &GenConfig, id: u64) -> Scene {
    let seed = derive_seed(cfg.seed, id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gen_scene(cfg, id, seed, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub gen: GenConfig,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    /// `cfg.n_scenes` scenes with ids `first_id..first_id + n`.
    pub fn generate(cfg: &GenConfig, split: Split, first_id: u64) -> Self {
        let scenes = (0..cfg.n_scenes as u64)
            .map(|k| scene_from_seed(cfg, first_id + k))
            .collect();
        Self {
            split,
            gen: cfg.clone(),
            scenes,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.scenes.iter().map(|s| s.id)
    }
}

/// Replaces every training box by a Gaussian-corrupted copy. Labels and
/// proposals are left untouched; a zero noise level returns the scenes as is.
pub fn corrupt_dataset<R: Rng + ?Sized>(ds: &Dataset, noise_level: f64, rng: &mut R) -> Result<Dataset> {
    if ds.split == Split::Eval {
        return Err(Error::CorruptEvalSplit);
    }
    if !(noise_level >= 0.0) {
        return Err(Error::Config("noise_level must be non-negative".into()));
    }
    let mut out = ds.clone();
    if noise_level == 0.0 {
        return Ok(out);
    }
    for scene in &mut out.scenes {
        for gt in &mut scene.gts {
            gt.bbox = perturb_box(&gt.bbox, noise_level, rng);
        }
        scene.corrupted = true;
    }
    Ok(out)
}
