//! Per-scene gradients, minibatch updates and model evaluation.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cascade::CascadeConfig;
use crate::data::{derive_seed, Scene};
use crate::decoder::{predict, run_scene, DnWeighting};
use crate::eval::{evaluate, Detection, MetricsReport, SceneBox};
use crate::losses::{scene_objective, LayerLoss, LossReport, ObjectiveConfig};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::queries::DnConfig;
use crate::params::Bindings;
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

/// Treatment of the denoising branch during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DnMode {
    Cascade,
    Uniform,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub dn: DnConfig,
    pub dn_mode: DnMode,
    pub cascade: CascadeConfig,
    pub objective: ObjectiveConfig,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            dn: DnConfig::default(),
            dn_mode: DnMode::Cascade,
            cascade: CascadeConfig::default(),
            objective: ObjectiveConfig::default(),
            optim: AdamWConfig::default(),
            batch_size: 4,
            epochs: 12,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dn.validate()?;
        self.objective.weights.validate()?;
        self.optim.validate()?;
        if self.dn_mode == DnMode::Cascade {
            self.cascade.validate()?;
            if self.cascade.n_layers != self.model.dec_layers {
                return Err(Error::Config("cascade n_layers must equal dec_layers".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn weighting(&self) -> DnWeighting {
        match self.dn_mode {
            DnMode::Cascade => DnWeighting::Cascade(self.cascade),
            DnMode::Uniform | DnMode::Off => DnWeighting::Uniform,
        }
    }
}

/// Loss node of one scene with the parameters bound as `p`.
pub fn scene_loss(
    g: &mut Graph,
    p: &Bindings,
    model: &Model,
    scene: &Scene,
    cfg: &TrainConfig,
    weighting: &DnWeighting,
    dn_seed: u64,
) -> Result<(Var, LossReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(dn_seed);
    let dn = (cfg.dn_mode != DnMode::Off).then_some(&cfg.dn);
    let (qs, outs) = run_scene(g, p, model, scene, dn, weighting, &mut rng)?;
    scene_objective(g, &outs, &scene.gts, &qs.dn_targets, model.cfg.n_classes, &cfg.objective)
}

/// Loss and gradients of one scene; gradients follow store order with
/// `None` for frozen entries.
pub fn scene_gradients(
    model: &Model,
    scene: &Scene,
    cfg: &TrainConfig,
    weighting: &DnWeighting,
    dn_seed: u64,
) -> Result<(Vec<Option<Vec<f64>>>, LossReport)> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let (loss, report) = scene_loss(&mut g, &p, model, scene, cfg, weighting, dn_seed)?;
    let grads = g.backward(loss)?;
    Ok((model.store.gradients(&p, &grads), report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub epoch: usize,
    pub step: u64,
    /// Batch mean of the scene reports.
    pub loss: LossReport,
}

fn accumulate(acc: &mut LossReport, r: &LossReport, k: f64) {
    acc.cls += k * r.cls;
    acc.box_l1 += k * r.box_l1;
    acc.box_giou += k * r.box_giou;
    acc.dn += k * r.dn;
    acc.total += k * r.total;
    if acc.layers.len() < r.layers.len() {
        acc.layers.resize(r.layers.len(), LayerLoss::default());
    }
    for (a, l) in acc.layers.iter_mut().zip(&r.layers) {
        a.cls += k * l.cls;
        a.l1 += k * l.l1;
        a.giou += k * l.giou;
        a.dn_cls += k * l.dn_cls;
        a.dn_l1 += k * l.dn_l1;
        a.dn_giou += k * l.dn_giou;
        a.mean_matched_iou += k * l.mean_matched_iou;
        a.mean_dn_iou += k * l.mean_dn_iou;
        a.mean_dn_weight += k * l.mean_dn_weight;
    }
}

/// Model, optimizer state and the number of completed epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamW,
    pub epoch: usize,
}

/// Seed streams derived from the run seed.
const MODEL_STREAM: u64 = 0x6d6f_6465_6c00;
const SHUFFLE_STREAM: u64 = 0x7368_7566_666c;
const NOISE_STREAM: u64 = 0x6e6f_6973_6500;

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), derive_seed(cfg.seed, MODEL_STREAM))?;
        let opt = AdamW::new(cfg.optim, &model.store);
        Ok(Self {
            cfg,
            model,
            opt,
            epoch: 0,
        })
    }

    /// Applies one update from the mean gradient of `scenes`.
    pub fn step(&mut self, scenes: &[&Scene]) -> Result<LossReport> {
        let weighting = self.cfg.weighting();
        let k = 1.0 / scenes.len() as f64;
        let mut sum: Option<Vec<Option<Vec<f64>>>> = None;
        let mut report = LossReport::default();
        let epoch_seed = derive_seed(derive_seed(self.cfg.seed, NOISE_STREAM), self.epoch as u64);
        for scene in scenes {
            let (grads, r) = scene_gradients(&self.model, scene, &self.cfg, &weighting, derive_seed(epoch_seed, scene.id))?;
            if !r.total.is_finite() {
                return Err(Error::NonFinite("total"));
            }
            accumulate(&mut report, &r, k);
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        if let (Some(a), Some(g)) = (a, g) {
                            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
        }
        let mut grads = sum.ok_or(Error::Config("empty batch".into()))?;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= k);
        }
        self.opt.update(&mut self.model.store, &grads)?;
        Ok(report)
    }

    /// One pass over `scenes` in a seeded shuffled order.
    pub fn train_epoch(&mut self, scenes: &[Scene], mut on_step: impl FnMut(&StepReport)) -> Result<LossReport> {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.cfg.seed, SHUFFLE_STREAM), self.epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_report = LossReport::default();
        let n_batches = order.len().div_ceil(self.cfg.batch_size);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let r = self.step(&batch)?;
            accumulate(&mut epoch_report, &r, 1.0 / n_batches as f64);
            on_step(&StepReport {
                epoch: self.epoch,
                step: self.opt.step,
                loss: r,
            });
        }
        self.epoch += 1;
        Ok(epoch_report)
    }
}

/// Every final-layer detection over `scenes`.
pub fn predict_all(model: &Model, scenes: &[Scene], score_thr: f64) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend(predict(model, s, score_thr)?);
    }
    Ok(out)
}

pub fn scene_boxes(scenes: &[Scene]) -> Vec<SceneBox> {
    scenes
        .iter()
        .flat_map(|s| s.gts.iter().map(move |&gt| SceneBox { scene_id: s.id, gt }))
        .collect()
}

/// Metrics of `model` on clean scenes.
pub fn evaluate_model(model: &Model, scenes: &[Scene], thresholds: &[f64]) -> Result<MetricsReport> {
    if scenes.iter().any(|s| s.corrupted) {
        return Err(Error::Config("evaluation scenes carry corrupted labels".into()));
    }
    let dets = predict_all(model, scenes, 0.0)?;
    Ok(evaluate(&dets, &scene_boxes(scenes), model.cfg.n_classes, thresholds))
}
