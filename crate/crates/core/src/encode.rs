//! Sinusoidal encoding of anchor boxes into positional queries, and the
//! inverse-sigmoid parametrization used for iterative anchor refinement.

use alloc::vec::Vec;

use crate::geom::BoxCxCyWH;
use crate::params::{Bindings, Mlp};
use crate::tensor::{Graph, Result, Tensor, Var};
use crate::Error;

/// Probabilities are clamped into `[EPS, 1 - EPS]` before inversion.
pub const INV_SIGMOID_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PeConfig {
    pub dim_per_coord: usize,
    pub temperature: f64,
}

impl PeConfig {
    /// Half the model width per coordinate, so the four concatenated
    /// encodings span `2 * d_model`.
    pub fn for_model(d_model: usize) -> Self {
        Self {
            dim_per_coord: d_model / 2,
            temperature: 10_000.0,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.dim_per_coord == 0 || self.dim_per_coord % 2 != 0 {
            return Err(Error::Config("dim_per_coord must be even and positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Angular frequency of sin/cos pair `i`: `2π / temperature^(2i / dim)`.
    pub fn frequency(&self, i: usize) -> f64 {
        let expo = (2 * i) as f64 / self.dim_per_coord as f64;
        2.0 * core::f64::consts::PI / libm::pow(self.temperature, expo)
    }
}

/// Interleaved `[sin(ω₀x), cos(ω₀x), sin(ω₁x), cos(ω₁x), ...]`.
pub fn sinusoidal_pe(coord: f64, cfg: &PeConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.dim_per_coord);
    for i in 0..cfg.dim_per_coord / 2 {
        let a = coord * cfg.frequency(i);
        out.push(libm::sin(a));
        out.push(libm::cos(a));
    }
    out
}

/// `Cat(PE(cx), PE(cy), PE(w), PE(h))` for every anchor, one row each.
pub fn anchor_encoding(anchors: &[BoxCxCyWH], cfg: &PeConfig) -> Tensor {
    let width = 4 * cfg.dim_per_coord;
    let mut data = Vec::with_capacity(anchors.len() * width);
    for a in anchors {
        for c in a.to_array() {
            data.extend(sinusoidal_pe(c, cfg));
        }
    }
    Tensor {
        rows: anchors.len(),
        cols: width,
        data,
    }
}

/// Positional queries `MLP(Cat(PE(x), PE(y), PE(w), PE(h)))` for a batch of
/// anchors. Anchors enter as constants.
pub fn positional_queries(
    g: &mut Graph,
    params: &Bindings,
    mlp: &Mlp,
    anchors: &[BoxCxCyWH],
    cfg: &PeConfig,
) -> Result<Var> {
    let enc = g.constant(&anchor_encoding(anchors, cfg));
    mlp.forward(g, params, enc)
}

/// Positional query of a single anchor, as a plain vector.
pub fn positional_query(
    anchor: &BoxCxCyWH,
    cfg: &PeConfig,
    mlp: &Mlp,
    store: &crate::params::ParamStore,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let q = positional_queries(&mut g, &p, mlp, core::slice::from_ref(anchor), cfg)?;
    Ok(g.value(q).to_vec())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn inv_sigmoid(p: f64) -> f64 {
    let p = p.clamp(INV_SIGMOID_EPS, 1.0 - INV_SIGMOID_EPS);
    libm::log(p / (1.0 - p))
}

/// Row-major `n x 4` inverse-sigmoid image of a set of anchors.
pub fn anchor_logits(anchors: &[BoxCxCyWH]) -> Vec<f64> {
    anchors
        .iter()
        .flat_map(|a| a.to_array().map(inv_sigmoid))
        .collect()
}

/// Applies predicted offsets in inverse-sigmoid space.
pub fn refine_anchor(anchor: &BoxCxCyWH, offsets: [f64; 4]) -> BoxCxCyWH {
    let a = anchor.to_array();
    BoxCxCyWH::from_array(core::array::from_fn(|i| sigmoid(inv_sigmoid(a[i]) + offsets[i])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> PeConfig {
        PeConfig::for_model(16)
    }

    #[test]
    fn zero_coordinate_encoding() {
        let pe = sinusoidal_pe(0.0, &cfg());
        assert_eq!(pe.len(), 8);
        for pair in pe.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn distinct_coordinates_differ_in_every_band() {
        let c = cfg();
        let (a, b) = (sinusoidal_pe(0.3, &c), sinusoidal_pe(0.7, &c));
        for i in 0..c.dim_per_coord / 2 {
            // Below Nyquist: the phase difference 0.4·ω is not a multiple of 2π.
            let d = (a[2 * i] - b[2 * i]).abs() + (a[2 * i + 1] - b[2 * i + 1]).abs();
            assert!(d > 1e-9, "band {i}");
        }
    }

    #[test]
    fn frequencies_decrease_geometrically() {
        let c = cfg();
        let ratio = libm::pow(c.temperature, 2.0 / c.dim_per_coord as f64);
        for i in 1..c.dim_per_coord / 2 {
            let (hi, lo) = (c.frequency(i - 1), c.frequency(i));
            assert!(lo < hi);
            assert!((hi / lo - ratio).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_sigmoid_values() {
        assert_eq!(inv_sigmoid(0.5), 0.0);
        assert!((inv_sigmoid(0.9) - libm::log(9.0)).abs() < 1e-12);
        assert!((inv_sigmoid(0.9) - 2.1972).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p: f64 = rng.random_range(0.001..0.999);
            assert!((sigmoid(inv_sigmoid(p)) - p).abs() < 1e-9);
        }
    }

    #[test]
    fn positional_query_width_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let d = 16;
        let mlp = Mlp::new(&mut store, "pos", (2 * d, d, d), &mut rng);
        let a = BoxCxCyWH::new(0.3, 0.4, 0.2, 0.1);
        let q1 = positional_query(&a, &cfg(), &mlp, &store).unwrap();
        let q2 = positional_query(&a, &cfg(), &mlp, &store).unwrap();
        assert_eq!(q1.len(), d);
        assert_eq!(q1, q2);
        let q3 = positional_query(&BoxCxCyWH::new(0.31, 0.4, 0.2, 0.1), &cfg(), &mlp, &store).unwrap();
        assert_ne!(q1, q3);
    }

    #[test]
    fn zero_offsets_keep_anchor() {
        let a = BoxCxCyWH::new(0.3, 0.4, 0.2, 0.1);
        let r = refine_anchor(&a, [0.0; 4]);
        for (x, y) in r.to_array().iter().zip(a.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
