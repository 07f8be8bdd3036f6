//! Data preparation, training runs with logs and checkpoints, and evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};

use hqp_core::data::{corrupt_dataset, derive_seed, Dataset, GenConfig, Split};
use hqp_core::eval::{coco_thresholds, evaluate, MetricsReport};
use hqp_core::losses::LossReport;
use hqp_core::proposals::{attach_proposals, refine_with_proposals};
use hqp_core::trainer::{predict_all, scene_boxes, StepReport, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::load_dataset;
use crate::error::{io_err, Error, Result};
use crate::fixture::{attach_fixture, load_proposals};

/// Seed streams derived from the generator seed and the run seed.
const PROPOSAL_STREAM: u64 = 0x7072_6f70_6f73;
const CORRUPTION_STREAM: u64 = 0x636f_7272_7570;

/// Generated evaluation scenes start here so their ids never collide with
/// training ids.
pub const EVAL_FIRST_ID: u64 = 1 << 32;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct Data {
    pub train: Dataset,
    pub eval: Dataset,
}

fn split_gen(cfg: &RunConfig, n: usize) -> GenConfig {
    GenConfig {
        n_scenes: n,
        ..cfg.gen.clone()
    }
}

/// Clean training and evaluation splits with proposals attached. Scenes are
/// loaded from the configured paths or generated; proposals come from the
/// fixture when one is configured, from the file when present, and from the
/// emulator otherwise.
pub fn clean_data(cfg: &RunConfig) -> Result<Data> {
    let mut train = match &cfg.data.train_path {
        Some(p) => load_dataset(p)?,
        None => Dataset::generate(&split_gen(cfg, cfg.data.n_train), Split::Train, 0),
    };
    let mut eval = match &cfg.data.eval_path {
        Some(p) => load_dataset(p)?,
        None => Dataset::generate(&split_gen(cfg, cfg.data.n_eval), Split::Eval, EVAL_FIRST_ID),
    };
    if train.split != Split::Train || eval.split != Split::Eval {
        return Err(Error::Config("train_path and eval_path must hold the train and eval splits".into()));
    }
    if eval.scenes.iter().any(|s| s.corrupted) {
        return Err(hqp_core::Error::CorruptEvalSplit.into());
    }
    if let Some(p) = &cfg.data.proposals_path {
        let fixture = load_proposals(p)?;
        for r in &fixture.rejected {
            eprintln!("{}:{}: skipped proposal: {}", p.display(), r.line, r.reason);
        }
        attach_fixture(&mut train, &fixture);
        attach_fixture(&mut eval, &fixture);
    }
    let prop_seed = derive_seed(cfg.gen.seed, PROPOSAL_STREAM);
    for ds in [&mut train, &mut eval] {
        if ds.scenes.iter().any(|s| s.proposals.is_none()) {
            attach_proposals(ds, &cfg.emulator, prop_seed);
        }
    }
    Ok(Data { train, eval })
}

/// Applies the configured label noise to the training split.
pub fn corrupt_train(cfg: &RunConfig, data: &Data) -> Result<Data> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, CORRUPTION_STREAM));
    Ok(Data {
        train: corrupt_dataset(&data.train, cfg.noise_level, &mut rng)?,
        eval: data.eval.clone(),
    })
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Data> {
    corrupt_train(cfg, &clean_data(cfg)?)
}

/// Summary metrics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub map50: f64,
    pub ap75: f64,
    pub map: f64,
}

impl From<&MetricsReport> for Summary {
    fn from(m: &MetricsReport) -> Self {
        Self {
            map50: m.map50,
            ap75: m.ap75,
            map: m.map_50_95,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: u64,
        loss: LossReport,
    },
    Epoch {
        /// Completed epochs.
        epoch: usize,
        step: u64,
        loss: LossReport,
        eval: Option<Summary>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossReport,
    pub eval: Option<Summary>,
}

/// Switches for [`train`].
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory for `checkpoint.bin` and `log.jsonl`; nothing is written
    /// without one.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model.
    pub resume: Option<PathBuf>,
    /// Evaluate after every epoch rather than only after the last.
    pub eval_every_epoch: bool,
    /// Also log every optimizer step.
    pub log_steps: bool,
    /// Called before each epoch with the trainer about to run it.
    pub before_epoch: Option<&'a mut dyn FnMut(&mut Trainer)>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trainer: Trainer,
    pub history: Vec<EpochRecord>,
    /// Evaluation after the last epoch.
    pub metrics: MetricsReport,
}

impl RunResult {
    /// First epoch (1-based) whose evaluation reached `map50`, or infinity.
    pub fn epochs_to(&self, map50: f64) -> f64 {
        self.history
            .iter()
            .find(|r| r.eval.is_some_and(|e| e.map50 >= map50))
            .map_or(f64::INFINITY, |r| r.epoch as f64)
    }
}

/// Trains per `cfg` on `data`, evaluating on the clean split.
pub fn train(cfg: &RunConfig, data: &Data, mut opts: RunOptions<'_>) -> Result<RunResult> {
    cfg.validate()?;
    let mut trainer = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config.training_view() != cfg.training_view() {
                return Err(Error::Config(format!("{} was trained with a different configuration", path.display())));
            }
            let mut t = ck.into_trainer()?;
            t.cfg.epochs = cfg.epochs;
            t
        }
        None => Trainer::new(cfg.train_config())?,
    };
    let (ck_path, mut log) = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let log_path = dir.join(LOG_FILE);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(opts.resume.is_some())
                .write(true)
                .truncate(opts.resume.is_none())
                .open(&log_path)
                .map_err(io_err(&log_path))?;
            (Some(dir.join(CHECKPOINT_FILE)), Some((log_path, std::io::BufWriter::new(f))))
        }
        None => (None, None),
    };
    let mut last_good = opts.resume.clone();
    let mut history = Vec::new();
    let mut metrics = None;
    while trainer.epoch < cfg.epochs {
        if let Some(hook) = opts.before_epoch.as_mut() {
            hook(&mut trainer);
        }
        let mut step_err = None;
        let log_steps = opts.log_steps;
        let result = trainer.train_epoch(&data.train.scenes, |r: &StepReport| {
            if let (true, Some((path, w))) = (log_steps, log.as_mut()) {
                let rec = LogRecord::Step {
                    epoch: r.epoch,
                    step: r.step,
                    loss: r.loss.clone(),
                };
                if let Err(e) = write_record(w, &rec) {
                    step_err.get_or_insert((path.clone(), e));
                }
            }
        });
        if let Some((path, e)) = step_err {
            return Err(Error::Io { path, source: e });
        }
        let loss = match result {
            Ok(l) => l,
            Err(hqp_core::Error::NonFinite(what)) => {
                return Err(Error::Aborted {
                    epoch: trainer.epoch,
                    step: trainer.opt.step,
                    reason: format!("non-finite {what}"),
                    last_good,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let last = trainer.epoch == cfg.epochs;
        let eval = if opts.eval_every_epoch || last {
            let m = evaluate_trainer(&trainer, &data.eval, None)?;
            let s = Summary::from(&m);
            if last {
                metrics = Some(m);
            }
            Some(s)
        } else {
            None
        };
        if let Some((path, w)) = log.as_mut() {
            let rec = LogRecord::Epoch {
                epoch: trainer.epoch,
                step: trainer.opt.step,
                loss: loss.clone(),
                eval,
            };
            write_record(w, &rec).map_err(io_err(&*path))?;
        }
        if let Some(p) = &ck_path {
            Checkpoint::from_trainer(cfg, &trainer).save(p)?;
            last_good = Some(p.clone());
        }
        history.push(EpochRecord {
            epoch: trainer.epoch,
            loss,
            eval,
        });
    }
    let metrics = match metrics {
        Some(m) => m,
        None => evaluate_trainer(&trainer, &data.eval, None)?,
    };
    Ok(RunResult {
        trainer,
        history,
        metrics,
    })
}

fn write_record(w: &mut impl Write, rec: &LogRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    writeln!(w)?;
    w.flush()
}

/// Metrics of the trainer's model on `eval`; `snap` enables proposal
/// refinement at that IoU threshold.
pub fn evaluate_trainer(trainer: &Trainer, eval: &Dataset, snap: Option<f64>) -> Result<MetricsReport> {
    if eval.split != Split::Eval || eval.scenes.iter().any(|s| s.corrupted) {
        return Err(hqp_core::Error::CorruptEvalSplit.into());
    }
    let model = &trainer.model;
    let mut dets = Vec::new();
    for scene in &eval.scenes {
        let d = predict_all(model, std::slice::from_ref(scene), 0.0)?;
        match snap {
            Some(thr) => dets.extend(refine_with_proposals(&d, scene.proposals.as_deref().unwrap_or(&[]), thr)),
            None => dets.extend(d),
        }
    }
    Ok(evaluate(&dets, &scene_boxes(&eval.scenes), model.cfg.n_classes, &coco_thresholds()))
}

/// Loads a checkpoint and evaluates it on the clean evaluation split of
/// `cfg`. Refinement follows `cfg.sam_refine`.
pub fn eval_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<MetricsReport> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.config.training_view() != cfg.training_view() {
        eprintln!(
            "warning: {} was trained with a different configuration (digest {})",
            checkpoint.display(),
            ck.config.digest()
        );
    }
    let trainer = ck.into_trainer()?;
    let data = clean_data(cfg)?;
    evaluate_trainer(&trainer, &data.eval, cfg.sam_refine.then_some(cfg.snap_threshold))
}
