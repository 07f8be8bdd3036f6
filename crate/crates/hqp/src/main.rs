use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hqp::ablate::{ablate_components, ablate_noise, sweep_cascade, Cell, Runner};
use hqp::checkpoint::Checkpoint;
use hqp::config::RunConfig;
use hqp::dataset::{save_dataset, PixelMode};
use hqp::fixture::{collect_proposals, save_proposals};
use hqp::run::{clean_data, eval_checkpoint, prepare_data, train, RunOptions, Summary};
use hqp::table::{num, Table};
use hqp_core::model::QueryInit;
use hqp_core::trainer::DnMode;

#[derive(Parser)]
#[command(name = "hqp", version, about = "Train, evaluate and ablate the HQP detector on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set optim.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        let cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TableArgs {
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Directory caching finished runs by configuration digest.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and evaluation splits and their proposals.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Store pixels in the files instead of re-rendering them from seeds.
        #[arg(long)]
        inline_pixels: bool,
    },
    /// Train a model, writing `checkpoint.bin` and `log.jsonl` to the output directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Log every optimizer step, not only epochs.
        #[arg(long)]
        log_steps: bool,
        /// Evaluate after every epoch.
        #[arg(long)]
        eval_every_epoch: bool,
    },
    /// Evaluate a checkpoint on the clean evaluation split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Snap detections to overlapping proposals (same as `--set sam_refine=true`).
        #[arg(long)]
        refine: bool,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Cascade against uniform denoising under pseudo-label noise.
    AblateNoise {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: TableArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.05, 0.1, 0.15, 0.2])]
        levels: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Query initialization and denoising variants; with --theta1/--tau, a cascade sweep.
    AblateComponents {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: TableArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
        /// Cells as `queries:dn`, e.g. `hqp:cascade,random:off`; all six by default.
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
        /// mAP@0.5 that counts as converged.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Initial thresholds to sweep.
        #[arg(long, value_delimiter = ',')]
        theta1: Vec<f64>,
        /// Temperatures to sweep.
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
    },
    /// Print a checkpoint's metadata.
    InspectCheckpoint {
        path: PathBuf,
        /// Print the stored configuration as TOML.
        #[arg(long)]
        config: bool,
        /// List every tensor.
        #[arg(long)]
        tensors: bool,
    },
}

fn parse_cell(s: &str) -> Result<Cell> {
    let (q, d) = s.split_once(':').with_context(|| format!("cell {s:?} is not queries:dn"))?;
    let init = match q {
        "hqp" => QueryInit::Hqp,
        "random" => QueryInit::Random,
        _ => bail!("unknown query initialization {q:?}"),
    };
    let dn = match d {
        "cascade" => DnMode::Cascade,
        "uniform" => DnMode::Uniform,
        "off" => DnMode::Off,
        _ => bail!("unknown denoising mode {d:?}"),
    };
    Ok(Cell { init, dn })
}

fn emit(table: &Table, csv: Option<&Path>) -> Result<()> {
    print!("{}", table.to_aligned());
    if let Some(p) = csv {
        let f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        table.write_csv(f)?;
    }
    Ok(())
}

fn runner(cache: Option<PathBuf>) -> Runner {
    let mut r = Runner::new(cache);
    r.verbose = true;
    r
}

fn main() -> std::process::ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            cfg,
            out_dir,
            inline_pixels,
        } => {
            let cfg = cfg.load()?;
            let data = clean_data(&cfg)?;
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let mode = if inline_pixels { PixelMode::Inline } else { PixelMode::Seed };
            save_dataset(&out_dir.join("train.jsonl"), &data.train, mode)?;
            save_dataset(&out_dir.join("eval.jsonl"), &data.eval, mode)?;
            let mut props = collect_proposals(&data.train);
            props.extend(collect_proposals(&data.eval));
            save_proposals(&out_dir.join("proposals.csv"), &props)?;
            println!(
                "wrote {} train and {} eval scenes to {}",
                data.train.scenes.len(),
                data.eval.scenes.len(),
                out_dir.display()
            );
        }
        Command::Train {
            cfg,
            out_dir,
            resume,
            log_steps,
            eval_every_epoch,
        } => {
            let cfg = cfg.load()?;
            let data = prepare_data(&cfg)?;
            let start = std::time::Instant::now();
            let r = train(
                &cfg,
                &data,
                RunOptions {
                    out_dir: Some(out_dir.clone()),
                    resume,
                    eval_every_epoch,
                    log_steps,
                    before_epoch: None,
                },
            )?;
            let s = Summary::from(&r.metrics);
            println!(
                "trained {} epochs in {:.0}s: map50 {:.4} ap75 {:.4} map {:.4}; checkpoint in {}",
                r.trainer.epoch,
                start.elapsed().as_secs_f64(),
                s.map50,
                s.ap75,
                s.map,
                out_dir.display()
            );
        }
        Command::Eval {
            cfg,
            checkpoint,
            refine,
            json,
        } => {
            let mut cfg = cfg.load()?;
            cfg.sam_refine |= refine;
            let m = eval_checkpoint(&cfg, &checkpoint)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&m)?);
            } else {
                let at = |c: &hqp_core::eval::ClassAp, thr: f64| {
                    m.thresholds
                        .iter()
                        .position(|&t| (t - thr).abs() < 1e-9)
                        .map_or(f64::NAN, |i| c.ap[i])
                };
                let mut t = Table::new(["class", "gt", "ap50", "ap75", "ap"]);
                for c in &m.per_class {
                    let mean = c.ap.iter().sum::<f64>() / c.ap.len().max(1) as f64;
                    t.push([c.class.to_string(), c.n_gt.to_string(), num(at(c, 0.5)), num(at(c, 0.75)), num(mean)]);
                }
                t.push(["all".to_string(), String::new(), num(m.map50), num(m.ap75), num(m.map_50_95)]);
                print!("{}", t.to_aligned());
            }
        }
        Command::AblateNoise { cfg, out, levels, seeds } => {
            let cfg = cfg.load()?;
            let report = ablate_noise(&mut runner(out.cache), &cfg, &levels, &seeds)?;
            emit(&report.table(), out.csv.as_deref())?;
        }
        Command::AblateComponents {
            cfg,
            out,
            seeds,
            cells,
            threshold,
            theta1,
            tau,
        } => {
            let cfg = cfg.load()?;
            let mut r = runner(out.cache);
            if !theta1.is_empty() || !tau.is_empty() {
                let t = sweep_cascade(&mut r, &cfg, &theta1, &tau, &seeds)?;
                emit(&t, out.csv.as_deref())?;
            } else {
                let cells = if cells.is_empty() {
                    Cell::lattice()
                } else {
                    cells.iter().map(|c| parse_cell(c)).collect::<Result<_>>()?
                };
                let report = ablate_components(&mut r, &cfg, &cells, &seeds, threshold)?;
                emit(&report.table(), out.csv.as_deref())?;
            }
        }
        Command::InspectCheckpoint { path, config, tensors } => {
            let ck = Checkpoint::load(&path)?;
            let entries = ck.store.entries();
            let n_params: usize = entries.iter().filter(|e| e.trainable).map(|e| e.tensor.data.len()).sum();
            println!("checkpoint   {}", path.display());
            println!("version      {}", hqp::checkpoint::CHECKPOINT_VERSION);
            println!("epoch        {}", ck.epoch);
            println!("step         {}", ck.opt.step);
            println!("config       {}", ck.config.digest());
            println!("seed         {}", ck.config.seed);
            println!("tensors      {}", entries.len());
            println!("parameters   {n_params}");
            if tensors {
                for e in entries {
                    let kind = if e.trainable { "" } else { "  frozen" };
                    println!("  {:<32} {}x{}{kind}", e.name, e.tensor.rows, e.tensor.cols);
                }
            }
            if config {
                print!("{}", ck.config.to_toml());
            }
        }
    }
    Ok(())
}
