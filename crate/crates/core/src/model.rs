//! Model configuration and the parameter layout of the whole detector.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::DecoderLayer;
use crate::encode::PeConfig;
use crate::features::{self, EncoderLayer, GridVar};
use crate::geom::BoxCxCyWH;
use crate::image::Image;
use crate::params::{Bindings, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// How matching-branch queries are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum QueryInit {
    /// Anchors from proposals, contents from pooled proposal regions.
    Hqp,
    /// A fixed set of random anchors with learned content embeddings.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_classes: usize,
    pub roi_size: usize,
    pub neck_hidden: usize,
    pub query_init: QueryInit,
    pub n_random_queries: usize,
    pub pe_temperature: f64,
    /// Initial foreground probability of the class head.
    pub prior_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            d_model: 32,
            n_heads: 4,
            ffn_dim: 64,
            enc_layers: 1,
            dec_layers: 6,
            n_classes: 3,
            roi_size: 4,
            neck_hidden: 64,
            query_init: QueryInit::Hqp,
            n_random_queries: 10,
            pe_temperature: 20.0,
            prior_prob: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return bad("d_model must be a positive multiple of 4");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.patch == 0 || self.image_size < self.patch {
            return bad("patch must be positive and no larger than the image");
        }
        if self.dec_layers == 0 || self.n_classes == 0 || self.roi_size == 0 {
            return bad("dec_layers, n_classes and roi_size must be positive");
        }
        if self.query_init == QueryInit::Random && self.n_random_queries == 0 {
            return bad("n_random_queries must be positive for random query init");
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return bad("prior_prob must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        features::grid_side(self.image_size, self.patch)
    }

    pub fn pe(&self) -> PeConfig {
        PeConfig {
            dim_per_coord: self.d_model / 2,
            temperature: self.pe_temperature,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub patch: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub fusion: Linear,
    pub neck: Mlp,
    pub pos_mlp: Mlp,
    pub layers: Vec<DecoderLayer>,
    pub class_head: Linear,
    pub box_head: Mlp,
    /// Frozen anchors and learned contents of random query init.
    pub random_anchors: Option<ParamId>,
    pub random_contents: Option<ParamId>,
    grid_pos: Tensor,
}

/// Features of one image placed on a graph.
#[derive(Debug, Clone, Copy)]
pub struct SceneMemory {
    /// Backbone output, the source of RoI pooling.
    pub backbone: GridVar,
    /// Fused encoder output attended by the decoder.
    pub memory: Var,
    /// `memory` plus cell position encodings.
    pub keys: Var,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let d = cfg.d_model;
        let mut store = ParamStore::new();
        let patch = Linear::new(&mut store, "backbone.patch", cfg.patch * cfg.patch * 3, d, rng);
        let encoder = (0..cfg.enc_layers)
            .map(|l| EncoderLayer::new(&mut store, &alloc::format!("encoder.{l}"), d, cfg.ffn_dim, rng))
            .collect();
        let fusion = Linear::new(&mut store, "fusion", 2 * d, d, rng);
        let region = cfg.roi_size * cfg.roi_size * d;
        let neck = Mlp::new(&mut store, "neck", (region, cfg.neck_hidden, d), rng);
        let pos_mlp = Mlp::new(&mut store, "pos_mlp", (2 * d, d, d), rng);
        let layers = (0..cfg.dec_layers)
            .map(|l| DecoderLayer::new(&mut store, &alloc::format!("decoder.{l}"), d, cfg.ffn_dim, rng))
            .collect();
        let class_head = Linear::new(&mut store, "head.class", d, cfg.n_classes, rng);
        let prior = -libm::log((1.0 - cfg.prior_prob) / cfg.prior_prob);
        *store.get_mut(class_head.b) = Tensor::filled(1, cfg.n_classes, prior);
        let box_head = Mlp::new(&mut store, "head.box", (d, d, 4), rng);
        *store.get_mut(box_head.second.w) = Tensor::zeros(d, 4);

        let (random_anchors, random_contents) = match cfg.query_init {
            QueryInit::Hqp => (None, None),
            QueryInit::Random => {
                let n = cfg.n_random_queries;
                let mut data = Vec::with_capacity(4 * n);
                for _ in 0..n {
                    let w = rng.random_range(0.1..0.5);
                    let h = rng.random_range(0.1..0.5);
                    data.extend([
                        rng.random_range(w / 2.0..1.0 - w / 2.0),
                        rng.random_range(h / 2.0..1.0 - h / 2.0),
                        w,
                        h,
                    ]);
                }
                let a = store.add_frozen("queries.anchors", Tensor::new(n, 4, data)?);
                let scale = 1.0 / libm::sqrt(d as f64);
                let c: Vec<f64> = (0..n * d).map(|_| rng.random_range(-scale..scale)).collect();
                let c = store.add("queries.contents", Tensor::new(n, d, c)?);
                (Some(a), Some(c))
            }
        };
        let side = cfg.grid_side();
        let grid_pos = features::grid_positions(side, side, d, cfg.pe_temperature);
        Ok(Self {
            cfg,
            store,
            patch,
            encoder,
            fusion,
            neck,
            pos_mlp,
            layers,
            class_head,
            box_head,
            random_anchors,
            random_contents,
            grid_pos,
        })
    }

    pub fn random_anchor_boxes(&self) -> Vec<BoxCxCyWH> {
        self.random_anchors
            .map(|id| {
                self.store
                    .get(id)
                    .data
                    .chunks(4)
                    .map(|c| BoxCxCyWH::new(c[0], c[1], c[2], c[3]))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Backbone, encoder and dense fusion for one image.
    pub fn encode(&self, g: &mut Graph, p: &Bindings, image: &Image) -> Result<SceneMemory> {
        let backbone = features::patch_embed(g, p, &self.patch, image, self.cfg.patch)?;
        let pos = g.constant(&self.grid_pos);
        let enc = features::encode_features(g, p, &self.encoder, backbone, pos, self.cfg.n_heads)?;
        let fused = features::dense_fusion(g, p, &self.fusion, enc, backbone)?;
        let keys = g.add(fused.var, pos)?;
        Ok(SceneMemory {
            backbone,
            memory: fused.var,
            keys,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_is_seeded() {
        let cfg = ModelConfig {
            d_model: 16,
            ffn_dim: 32,
            dec_layers: 2,
            roi_size: 2,
            neck_hidden: 8,
            ..Default::default()
        };
        let a = Model::new(cfg.clone(), 7).unwrap();
        let b = Model::new(cfg.clone(), 7).unwrap();
        let c = Model::new(cfg, 8).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn random_init_adds_query_parameters() {
        let cfg = ModelConfig {
            d_model: 16,
            ffn_dim: 32,
            dec_layers: 1,
            roi_size: 2,
            neck_hidden: 8,
            query_init: QueryInit::Random,
            n_random_queries: 5,
            ..Default::default()
        };
        let m = Model::new(cfg, 1).unwrap();
        let anchors = m.random_anchor_boxes();
        assert_eq!(anchors.len(), 5);
        assert!(anchors.iter().all(|a| a.to_xyxy().is_valid() && a.w > 0.0));
        assert!(!m.store.entries()[m.random_anchors.unwrap().index()].trainable);
    }

    #[test]
    fn rejects_bad_widths() {
        let cfg = ModelConfig {
            d_model: 18,
            ..Default::default()
        };
        assert!(Model::new(cfg, 0).is_err());
    }
}
