//! Axis-aligned box algebra in normalized image coordinates.
//!
//! Boxes come in two interchangeable forms: [`BoxCxCyWH`] (center and size,
//! the form anchors and regression targets use) and [`BoxXYXY`] (corners, the
//! form overlap computations use).

use rand::Rng;
use rand_distr::StandardNormal;

/// Smallest width or height a corrupted box may collapse to.
pub const MIN_BOX_SIZE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoxCxCyWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoxXYXY {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxCxCyWH {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_xyxy(self) -> BoxXYXY {
        BoxXYXY {
            x0: self.cx - 0.5 * self.w,
            y0: self.cy - 0.5 * self.h,
            x1: self.cx + 0.5 * self.w,
            y1: self.cy + 0.5 * self.h,
        }
    }

    /// Finite coordinates and strictly positive size.
    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Sum of absolute coordinate differences in center/size form.
    pub fn l1_distance(&self, other: &BoxCxCyWH) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }
}

impl BoxXYXY {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn to_cxcywh(self) -> BoxCxCyWH {
        BoxCxCyWH {
            cx: 0.5 * (self.x0 + self.x1),
            cy: 0.5 * (self.y0 + self.y1),
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
            && self.x0 <= self.x1
            && self.y0 <= self.y1
    }

    /// Restricts all corners to the unit square.
    pub fn clamp_unit(self) -> Self {
        Self {
            x0: self.x0.clamp(0.0, 1.0),
            y0: self.y0.clamp(0.0, 1.0),
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
        }
    }

    pub fn contains(&self, other: &BoxXYXY) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    fn intersection_area(&self, other: &BoxXYXY) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    fn hull(&self, other: &BoxXYXY) -> BoxXYXY {
        BoxXYXY {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

/// Intersection over union. Two zero-area boxes have IoU 0.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered
/// by the union. A degenerate (zero-area) hull yields `iou - 1`.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = a.intersection_area(b);
    let union = (a.area() + b.area() - inter).max(0.0);
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull = a.hull(b).area();
    if hull <= 0.0 {
        return iou - 1.0;
    }
    (iou - (hull - union) / hull).clamp(-1.0, 1.0)
}

pub fn iou_cxcywh(a: &BoxCxCyWH, b: &BoxCxCyWH) -> f64 {
    iou(&a.to_xyxy(), &b.to_xyxy())
}

pub fn giou_cxcywh(a: &BoxCxCyWH, b: &BoxCxCyWH) -> f64 {
    giou(&a.to_xyxy(), &b.to_xyxy())
}

/// Draws independent Gaussian corner offsets `[dx0, dy0, dx1, dy1]` with
/// standard deviation `scale * w` on x corners and `scale * h` on y corners.
pub fn corner_noise<R: Rng + ?Sized>(b: &BoxCxCyWH, scale: f64, rng: &mut R) -> [f64; 4] {
    let sx = scale * b.w;
    let sy = scale * b.h;
    let mut draw = |s: f64| -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        z * s
    };
    let dx0 = draw(sx);
    let dy0 = draw(sy);
    let dx1 = draw(sx);
    let dy1 = draw(sy);
    [dx0, dy0, dx1, dy1]
}

/// Applies corner offsets, restores corner order, clamps to the unit square
/// and widens any side that collapsed below [`MIN_BOX_SIZE`].
pub fn apply_corner_offsets(b: &BoxCxCyWH, d: [f64; 4]) -> BoxCxCyWH {
    let c = b.to_xyxy();
    let (ax, bx) = (c.x0 + d[0], c.x1 + d[2]);
    let (ay, by) = (c.y0 + d[1], c.y1 + d[3]);
    let (x0, x1) = fit_interval(ax.min(bx), ax.max(bx));
    let (y0, y1) = fit_interval(ay.min(by), ay.max(by));
    BoxXYXY { x0, y0, x1, y1 }.to_cxcywh()
}

fn fit_interval(lo: f64, hi: f64) -> (f64, f64) {
    let lo = lo.clamp(0.0, 1.0);
    let hi = hi.clamp(0.0, 1.0);
    if hi - lo >= MIN_BOX_SIZE {
        return (lo, hi);
    }
    let center = (0.5 * (lo + hi)).clamp(0.5 * MIN_BOX_SIZE, 1.0 - 0.5 * MIN_BOX_SIZE);
    (center - 0.5 * MIN_BOX_SIZE, center + 0.5 * MIN_BOX_SIZE)
}

/// Gaussian annotation-noise model: every corner coordinate moves by
/// `N(0, (noise_level * side)^2)`, then the box is re-ordered and clamped.
pub fn perturb_box<R: Rng + ?Sized>(b: &BoxCxCyWH, noise_level: f64, rng: &mut R) -> BoxCxCyWH {
    if noise_level == 0.0 {
        return *b;
    }
    let d = corner_noise(b, noise_level, rng);
    apply_corner_offsets(b, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn xyxy(x0: f64, y0: f64, x1: f64, y1: f64) -> BoxXYXY {
        BoxXYXY::new(x0, y0, x1, y1)
    }

    #[test]
    fn conversions() {
        assert_eq!(BoxCxCyWH::new(0.5, 0.5, 1.0, 1.0).to_xyxy(), xyxy(0.0, 0.0, 1.0, 1.0));
        assert_eq!(
            BoxCxCyWH::new(0.5, 0.5, 0.5, 0.5).to_xyxy(),
            xyxy(0.25, 0.25, 0.75, 0.75)
        );
    }

    #[test]
    fn iou_cases() {
        let a = xyxy(0.0, 0.0, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&xyxy(0.0, 0.0, 0.1, 0.1), &xyxy(0.5, 0.5, 0.6, 0.6)), 0.0);
        let b = xyxy(0.1, 0.1, 0.3, 0.3);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn zero_area_boxes() {
        let p = xyxy(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(giou(&p, &p), -1.0);
        let line = xyxy(0.1, 0.1, 0.1, 0.5);
        assert!(giou(&line, &xyxy(0.2, 0.2, 0.2, 0.6)).is_finite());
    }

    #[test]
    fn giou_cases() {
        let a = xyxy(0.0, 0.0, 0.2, 0.2);
        let b = xyxy(0.1, 0.1, 0.3, 0.3);
        // hull 0.09, union 0.07
        let expected = 1.0 / 7.0 - (0.09 - 0.07) / 0.09;
        assert!((giou(&a, &b) - expected).abs() < 1e-12);
        assert!((giou(&a, &b) + 0.0794).abs() < 1e-4);
        assert_eq!(giou(&a, &a), 1.0);
        let outer = xyxy(0.0, 0.0, 0.5, 0.5);
        let inner = xyxy(0.1, 0.1, 0.2, 0.3);
        assert!((giou(&outer, &inner) - iou(&outer, &inner)).abs() < 1e-15);
    }

    #[test]
    fn perturb_zero_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = BoxCxCyWH::new(0.4, 0.6, 0.2, 0.3);
        assert_eq!(perturb_box(&b, 0.0, &mut rng), b);
    }

    #[test]
    fn perturb_collapsed_box_gets_min_size() {
        let b = BoxCxCyWH::new(0.999, 0.5, 0.002, 0.2);
        let out = apply_corner_offsets(&b, [0.5, 0.0, 0.5, 0.0]);
        let c = out.to_xyxy();
        assert!(c.is_valid());
        assert!((out.w - MIN_BOX_SIZE).abs() < 1e-12);
        assert!(c.x1 <= 1.0 + 1e-12 && c.x0 >= 0.0);
    }

    #[test]
    fn perturb_is_deterministic() {
        let b = BoxCxCyWH::new(0.4, 0.6, 0.2, 0.3);
        let a1 = perturb_box(&b, 0.1, &mut ChaCha8Rng::seed_from_u64(9));
        let a2 = perturb_box(&b, 0.1, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a1, a2);
    }
}
