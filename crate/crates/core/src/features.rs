//! Toy backbone, transformer encoder with dense fusion, RoI max pooling and
//! the neck that turns pooled regions into content embeddings.
//!
//! A feature grid of `H' x W'` cells with `C` channels is stored as an
//! `(H'·W') x C` matrix whose row `y·W' + x` holds cell `(y, x)`.

use alloc::vec::Vec;

use rand::Rng;

use crate::encode::{sinusoidal_pe, PeConfig};
use crate::geom::BoxCxCyWH;
use crate::image::Image;
use crate::params::{Bindings, LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::{nn, Graph, Result, Tensor, TensorError, Var};

/// Feature values outside the autodiff graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub values: Tensor,
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.values.cols
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        self.values.row(y * self.width + x)
    }
}

/// A feature grid living on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridVar {
    pub height: usize,
    pub width: usize,
    pub var: Var,
}

impl GridVar {
    pub fn to_grid(&self, g: &Graph) -> FeatureGrid {
        FeatureGrid {
            height: self.height,
            width: self.width,
            values: g.tensor(self.var),
        }
    }
}

/// Pooled region, `bins x bins` cells of `channels` values, bin-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature {
    pub bins: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

/// Grid side length after padding the image up to a multiple of `patch`.
pub fn grid_side(pixels: usize, patch: usize) -> usize {
    pixels.div_ceil(patch)
}

/// One row per patch holding its pixels scaled to `[0, 1]`, channel-last.
/// Pixels beyond the image border are zero.
pub fn patch_matrix(image: &Image, patch: usize) -> Tensor {
    let (gh, gw) = (grid_side(image.height, patch), grid_side(image.width, patch));
    let cols = patch * patch * 3;
    let mut data = alloc::vec![0.0; gh * gw * cols];
    for py in 0..gh {
        for px in 0..gw {
            let row = &mut data[(py * gw + px) * cols..][..cols];
            for dy in 0..patch {
                for dx in 0..patch {
                    let (y, x) = (py * patch + dy, px * patch + dx);
                    if y < image.height && x < image.width {
                        let rgb = image.get(y, x);
                        for c in 0..3 {
                            row[(dy * patch + dx) * 3 + c] = rgb[c] as f64 / 255.0;
                        }
                    }
                }
            }
        }
    }
    Tensor {
        rows: gh * gw,
        cols,
        data,
    }
}

/// Non-overlapping patches projected linearly to the model width.
pub fn patch_embed(g: &mut Graph, p: &Bindings, proj: &Linear, image: &Image, patch: usize) -> Result<GridVar> {
    let x = g.constant(&patch_matrix(image, patch));
    let var = proj.forward(g, p, x)?;
    Ok(GridVar {
        height: grid_side(image.height, patch),
        width: grid_side(image.width, patch),
        var,
    })
}

/// 2D sinusoidal encoding of cell centers: `Cat(PE(x), PE(y))`, one row per
/// cell, `d_model` wide.
pub fn grid_positions(height: usize, width: usize, d_model: usize, temperature: f64) -> Tensor {
    let cfg = PeConfig {
        dim_per_coord: d_model / 2,
        temperature,
    };
    let mut data = Vec::with_capacity(height * width * d_model);
    for y in 0..height {
        for x in 0..width {
            data.extend(sinusoidal_pe((x as f64 + 0.5) / width as f64, &cfg));
            data.extend(sinusoidal_pe((y as f64 + 0.5) / height as f64, &cfg));
        }
    }
    Tensor {
        rows: height * width,
        cols: d_model,
        data,
    }
}

/// Post-norm transformer block: self-attention over cells, then FFN.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, ffn: usize, rng: &mut R) -> Self {
        let n = |s: &str| alloc::format!("{name}.{s}");
        Self {
            q: Linear::new(store, &n("q"), d, d, rng),
            k: Linear::new(store, &n("k"), d, d, rng),
            v: Linear::new(store, &n("v"), d, d, rng),
            o: Linear::new(store, &n("o"), d, d, rng),
            norm1: LayerNorm::new(store, &n("norm1"), d),
            ffn: Mlp::new(store, &n("ffn"), (d, ffn, d), rng),
            norm2: LayerNorm::new(store, &n("norm2"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var, pos: Var, heads: usize) -> Result<Var> {
        let xp = g.add(x, pos)?;
        let q = self.q.forward(g, p, xp)?;
        let k = self.k.forward(g, p, xp)?;
        let v = self.v.forward(g, p, x)?;
        let a = nn::multi_head_attention(g, q, k, v, heads, None)?;
        let a = self.o.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, p, x)
    }
}

/// Runs the encoder stack; an empty stack returns the input unchanged.
pub fn encode_features(
    g: &mut Graph,
    p: &Bindings,
    layers: &[EncoderLayer],
    grid: GridVar,
    pos: Var,
    heads: usize,
) -> Result<GridVar> {
    let mut x = grid.var;
    for layer in layers {
        x = layer.forward(g, p, x, pos, heads)?;
    }
    Ok(GridVar { var: x, ..grid })
}

/// Channel concatenation of encoder and backbone features projected back to
/// the model width.
pub fn dense_fusion(g: &mut Graph, p: &Bindings, proj: &Linear, enc: GridVar, bb: GridVar) -> Result<GridVar> {
    if (enc.height, enc.width) != (bb.height, bb.width) {
        return Err(TensorError::Shape {
            op: "dense_fusion",
            lhs: (enc.height, enc.width),
            rhs: (bb.height, bb.width),
        });
    }
    let cat = g.concat_cols(&[enc.var, bb.var])?;
    let var = proj.forward(g, p, cat)?;
    Ok(GridVar { var, ..enc })
}

/// Slack when deciding whether a bin edge reaches into a cell.
const BIN_TOLERANCE: f64 = 1e-9;

/// Cells overlapped by each of the `bins x bins` bins of `b` on an
/// `height x width` grid, bin-major. A bin that overlaps no cell gets the
/// cell nearest to its center.
pub fn roi_bins(height: usize, width: usize, b: &BoxCxCyWH, bins: usize) -> Vec<Vec<usize>> {
    let c = b.to_xyxy().clamp_unit();
    let (gx0, gx1) = (c.x0 * width as f64, c.x1 * width as f64);
    let (gy0, gy1) = (c.y0 * height as f64, c.y1 * height as f64);
    let (bw, bh) = ((gx1 - gx0) / bins as f64, (gy1 - gy0) / bins as f64);
    let span = |lo: f64, hi: f64, n: usize| -> Vec<usize> {
        (0..n)
            .filter(|&k| (k as f64) < hi - BIN_TOLERANCE && (k + 1) as f64 > lo + BIN_TOLERANCE)
            .collect()
    };
    let nearest = |v: f64, n: usize| (libm::floor(v).max(0.0) as usize).min(n - 1);
    let mut out = Vec::with_capacity(bins * bins);
    for by in 0..bins {
        let (y0, y1) = (gy0 + by as f64 * bh, gy0 + (by + 1) as f64 * bh);
        let mut ys = span(y0, y1, height);
        if ys.is_empty() {
            ys.push(nearest(0.5 * (y0 + y1), height));
        }
        for bx in 0..bins {
            let (x0, x1) = (gx0 + bx as f64 * bw, gx0 + (bx + 1) as f64 * bw);
            let mut xs = span(x0, x1, width);
            if xs.is_empty() {
                xs.push(nearest(0.5 * (x0 + x1), width));
            }
            out.push(ys.iter().flat_map(|&y| xs.iter().map(move |&x| y * width + x)).collect());
        }
    }
    out
}

/// Flat indices into the grid matrix realizing the max over each bin, per
/// channel. The first maximal cell wins ties.
fn roi_argmax(values: &[f64], channels: usize, cells: &[Vec<usize>]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(cells.len() * channels);
    for bin in cells {
        for ch in 0..channels {
            let mut best = bin[0] * channels + ch;
            for &cell in &bin[1..] {
                let i = cell * channels + ch;
                if values[i] > values[best] {
                    best = i;
                }
            }
            idx.push(best);
        }
    }
    idx
}

pub fn roi_pool(f: &FeatureGrid, b: &BoxCxCyWH, bins: usize) -> RegionFeature {
    let ch = f.channels();
    let cells = roi_bins(f.height, f.width, b, bins);
    let values = roi_argmax(&f.values.data, ch, &cells)
        .into_iter()
        .map(|i| f.values.data[i])
        .collect();
    RegionFeature {
        bins,
        channels: ch,
        values,
    }
}

/// Pools every box at once; row `i` is the flattened region of `boxes[i]`.
/// Gradients flow to the pooled maxima.
pub fn roi_pool_var(g: &mut Graph, grid: GridVar, boxes: &[BoxCxCyWH], bins: usize) -> Result<Var> {
    let ch = g.shape(grid.var).1;
    let mut index = Vec::with_capacity(boxes.len() * bins * bins * ch);
    for b in boxes {
        let cells = roi_bins(grid.height, grid.width, b, bins);
        index.extend(roi_argmax(g.value(grid.var), ch, &cells));
    }
    g.gather(grid.var, index, boxes.len(), bins * bins * ch)
}

/// Flatten → Linear → ReLU → Linear.
pub fn neck(g: &mut Graph, p: &Bindings, mlp: &Mlp, regions: Var) -> Result<Var> {
    mlp.forward(g, p, regions)
}
