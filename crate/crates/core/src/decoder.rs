//! The transformer decoder with iterative anchor refinement and per-layer
//! modulation of the denoising branch.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cascade::{dn_weight, threshold_schedule, CascadeConfig};
use crate::data::Scene;
use crate::encode::{anchor_logits, positional_queries};
use crate::eval::Detection;
use crate::geom::{iou_cxcywh, BoxCxCyWH};
use crate::model::{Model, SceneMemory};
use crate::params::{Bindings, LayerNorm, Linear, Mlp, ParamStore};
use crate::queries::{build_queries, DnConfig, QuerySet};
use crate::tensor::{nn, Graph, Var};
use crate::{Error, Result};

/// Post-norm decoder block: masked self-attention, cross-attention to the
/// fused grid, feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_q: Linear,
    pub self_k: Linear,
    pub self_v: Linear,
    pub self_o: Linear,
    pub norm1: LayerNorm,
    pub cross_q: Linear,
    pub cross_k: Linear,
    pub cross_v: Linear,
    pub cross_o: Linear,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, ffn: usize, rng: &mut R) -> Self {
        let n = |s: &str| alloc::format!("{name}.{s}");
        Self {
            self_q: Linear::new(store, &n("self_q"), d, d, rng),
            self_k: Linear::new(store, &n("self_k"), d, d, rng),
            self_v: Linear::new(store, &n("self_v"), d, d, rng),
            self_o: Linear::new(store, &n("self_o"), d, d, rng),
            norm1: LayerNorm::new(store, &n("norm1"), d),
            cross_q: Linear::new(store, &n("cross_q"), d, d, rng),
            cross_k: Linear::new(store, &n("cross_k"), d, d, rng),
            cross_v: Linear::new(store, &n("cross_v"), d, d, rng),
            cross_o: Linear::new(store, &n("cross_o"), d, d, rng),
            norm2: LayerNorm::new(store, &n("norm2"), d),
            ffn: Mlp::new(store, &n("ffn"), (d, ffn, d), rng),
            norm3: LayerNorm::new(store, &n("norm3"), d),
        }
    }

    /// Updates the content stream `x` given positional queries `pos`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bindings,
        x: Var,
        pos: Var,
        mem: &SceneMemory,
        mask: &crate::tensor::Mask,
        heads: usize,
    ) -> Result<Var> {
        let xp = g.add(x, pos)?;
        let q = self.self_q.forward(g, p, xp)?;
        let k = self.self_k.forward(g, p, xp)?;
        let v = self.self_v.forward(g, p, x)?;
        let a = nn::multi_head_attention(g, q, k, v, heads, Some(mask))?;
        let a = self.self_o.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, p, x)?;

        let xp = g.add(x, pos)?;
        let q = self.cross_q.forward(g, p, xp)?;
        let k = self.cross_k.forward(g, p, mem.keys)?;
        let v = self.cross_v.forward(g, p, mem.memory)?;
        let a = nn::multi_head_attention(g, q, k, v, heads, None)?;
        let a = self.cross_o.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let x = self.norm2.forward(g, p, x)?;

        let f = self.ffn.forward(g, p, x)?;
        let x = g.add(x, f)?;
        Ok(self.norm3.forward(g, p, x)?)
    }
}

/// How denoising features are weighted before the prediction heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DnWeighting {
    /// Sigmoid weights from layer-wise IoU thresholds.
    Cascade(CascadeConfig),
    /// No modulation; the heads see the raw features.
    Uniform,
    /// Every weight set to the given constant.
    Constant(f64),
}

/// Graph outputs of one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// `n_match x n_classes` logits.
    pub match_logits: Var,
    /// `n_match x 4` boxes, center/size.
    pub match_boxes: Var,
    pub dn_logits: Option<Var>,
    pub dn_boxes: Option<Var>,
    /// Weight applied to each denoising query; empty without the branch.
    pub dn_weights: Vec<f64>,
    /// IoU of each unmodulated reconstruction with its ground truth.
    pub dn_ious: Vec<f64>,
}

/// Rows of `v` as boxes, read as constants.
pub fn boxes_of(g: &mut Graph, v: Var) -> Vec<BoxCxCyWH> {
    g.stopped(v)
        .chunks(4)
        .map(|c| BoxCxCyWH::new(c[0], c[1], c[2], c[3]))
        .collect()
}

/// `sigmoid(offset + inv_sigmoid(anchor))` for every row.
fn refine(g: &mut Graph, p: &Bindings, model: &Model, x: Var, anchors: &[BoxCxCyWH]) -> Result<Var> {
    let off = model.box_head.forward(g, p, x)?;
    let z = g.add_const(off, &anchor_logits(anchors))?;
    Ok(g.sigmoid(z))
}

/// Runs every decoder layer. Anchors are refined layer by layer and carried
/// forward as constants.
pub fn forward(
    g: &mut Graph,
    p: &Bindings,
    model: &Model,
    mem: &SceneMemory,
    qs: &QuerySet,
    weighting: &DnWeighting,
) -> Result<Vec<LayerOutput>> {
    let n_layers = model.layers.len();
    let thresholds = match weighting {
        DnWeighting::Cascade(c) => {
            c.validate()?;
            if c.n_layers != n_layers {
                return Err(Error::Config(alloc::format!(
                    "cascade has {} layers, decoder has {n_layers}",
                    c.n_layers
                )));
            }
            threshold_schedule(c)
        }
        _ => Vec::new(),
    };
    let pe = model.cfg.pe();
    let (nm, nd) = (qs.n_match, qs.n_dn());
    let targets: Vec<BoxCxCyWH> = qs.dn_targets.iter().map(|t| t.bbox).collect();
    let mut anchors = qs.anchors.clone();
    let mut x = qs.contents;
    let mut outs = Vec::with_capacity(n_layers);
    for (l, layer) in model.layers.iter().enumerate() {
        let pos = positional_queries(g, p, &model.pos_mlp, &anchors, &pe)?;
        x = layer.forward(g, p, x, pos, mem, &qs.mask, model.cfg.n_heads)?;

        let xm = if nd == 0 { x } else { g.slice_rows(x, 0, nm)? };
        let match_logits = model.class_head.forward(g, p, xm)?;
        let match_boxes = refine(g, p, model, xm, &anchors[..nm])?;
        let mut next = boxes_of(g, match_boxes);

        let mut out = LayerOutput {
            match_logits,
            match_boxes,
            dn_logits: None,
            dn_boxes: None,
            dn_weights: Vec::new(),
            dn_ious: Vec::new(),
        };
        if nd > 0 {
            let xd = g.slice_rows(x, nm, nd)?;
            let raw = refine(g, p, model, xd, &anchors[nm..])?;
            let raw_boxes = boxes_of(g, raw);
            out.dn_ious = raw_boxes.iter().zip(&targets).map(|(b, t)| iou_cxcywh(b, t)).collect();
            let (logits, boxes, weights) = match weighting {
                DnWeighting::Uniform => (model.class_head.forward(g, p, xd)?, raw, alloc::vec![1.0; nd]),
                DnWeighting::Cascade(c) => {
                    let w: Vec<f64> = out.dn_ious.iter().map(|&u| dn_weight(u, thresholds[l], c.tau)).collect();
                    modulated_heads(g, p, model, xd, &anchors[nm..], w)?
                }
                DnWeighting::Constant(k) => modulated_heads(g, p, model, xd, &anchors[nm..], alloc::vec![*k; nd])?,
            };
            out.dn_logits = Some(logits);
            out.dn_boxes = Some(boxes);
            out.dn_weights = weights;
            next.extend(raw_boxes);
        }
        anchors = next;
        outs.push(out);
    }
    Ok(outs)
}

fn modulated_heads(
    g: &mut Graph,
    p: &Bindings,
    model: &Model,
    xd: Var,
    anchors: &[BoxCxCyWH],
    w: Vec<f64>,
) -> Result<(Var, Var, Vec<f64>)> {
    let xm = g.scale_rows(xd, &w)?;
    let logits = model.class_head.forward(g, p, xm)?;
    let boxes = refine(g, p, model, xm, anchors)?;
    Ok((logits, boxes, w))
}

/// Encodes a scene and runs the decoder. `dn` adds the denoising branch.
pub fn run_scene<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &Bindings,
    model: &Model,
    scene: &Scene,
    dn: Option<&DnConfig>,
    weighting: &DnWeighting,
    rng: &mut R,
) -> Result<(QuerySet, Vec<LayerOutput>)> {
    let mem = model.encode(g, p, &scene.image)?;
    let props = scene.proposals.as_deref().unwrap_or(&[]);
    let dn = dn.map(|c| (scene.gts.as_slice(), c));
    let qs = build_queries(g, p, model, mem.backbone, props, dn, rng)?;
    let outs = forward(g, p, model, &mem, &qs, weighting)?;
    Ok((qs, outs))
}

/// Final-layer detections without the denoising branch: one per query with
/// its best class, kept when the score exceeds `score_thr` (every query is
/// kept when `score_thr <= 0`).
pub fn predict(model: &Model, scene: &Scene, score_thr: f64) -> Result<Vec<Detection>> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let (_, outs) = run_scene(&mut g, &p, model, scene, None, &DnWeighting::Uniform, &mut unused)?;
    let last = outs.last().expect("decoder has at least one layer");
    let nc = model.cfg.n_classes;
    let boxes = boxes_of(&mut g, last.match_boxes);
    let logits = g.value(last.match_logits);
    let mut dets = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let row = &logits[i * nc..(i + 1) * nc];
        let (class, &z) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |best, (c, z)| if *z > *best.1 { (c, z) } else { best });
        let score = crate::encode::sigmoid(z);
        if score_thr <= 0.0 || score > score_thr {
            dets.push(Detection {
                scene_id: scene.id,
                bbox: *b,
                class,
                score,
            });
        }
    }
    Ok(dets)
}
