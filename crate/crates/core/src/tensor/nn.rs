//! Neural building blocks composed from [`Graph`] primitives.

use alloc::vec::Vec;

use super::{Graph, Mask, Result, TensorError, Var};

/// Additive logit applied to masked attention positions.
pub const MASKED_LOGIT: f64 = -1e9;

/// `x · w + b` with `w: in x out` and `b: 1 x out`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Row-wise layer normalization followed by a learned gain and bias.
pub fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let y = g.layer_norm_rows(x, 1e-5);
    let y = g.mul_row(y, gain)?;
    g.add_row(y, bias)
}

/// Scaled dot-product attention of `q: m x d` over `k, v: n x d`.
///
/// Masked positions receive a logit of [`MASKED_LOGIT`], which underflows to
/// an exact zero weight. Every query row must keep at least one key.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&Mask>) -> Result<Var> {
    let (m, d) = g.shape(q);
    let (n, _) = g.shape(k);
    let scores = g.matmul_bt(q, k)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
    let scores = match mask {
        Some(mask) => {
            if (mask.rows, mask.cols) != (m, n) {
                return Err(TensorError::Shape {
                    op: "attention mask",
                    lhs: (m, n),
                    rhs: (mask.rows, mask.cols),
                });
            }
            let bias = mask_bias(mask)?;
            g.add_const(scores, &bias)?
        }
        None => scores,
    };
    let weights = g.softmax_rows(scores);
    g.matmul(weights, v)
}

fn mask_bias(mask: &Mask) -> Result<Vec<f64>> {
    for r in 0..mask.rows {
        if !(0..mask.cols).any(|c| mask.get(r, c)) {
            return Err(TensorError::FullyMaskedRow(r));
        }
    }
    Ok(mask
        .allowed
        .iter()
        .map(|&ok| if ok { 0.0 } else { MASKED_LOGIT })
        .collect())
}

/// Splits the feature columns into `heads` equal slices, attends per head and
/// concatenates the results.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Mask>,
) -> Result<Var> {
    let (_, d) = g.shape(q);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Shape {
            op: "multi_head_attention",
            lhs: (d, heads),
            rhs: (d, heads),
        });
    }
    if heads == 1 {
        return attention(g, q, k, v, mask);
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        outs.push(attention(g, qh, kh, vh, mask)?);
    }
    g.concat_cols(&outs)
}
