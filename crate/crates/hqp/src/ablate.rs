//! Repeated runs: noise robustness, component lattice and cascade sweeps.
//!
//! Every run is identified by the digest of its configuration. A [`Runner`]
//! with a cache directory stores each finished run's history there and
//! reuses it when the same configuration comes up again.

use std::collections::HashMap;
use std::path::PathBuf;

use hqp_core::model::QueryInit;
use hqp_core::trainer::DnMode;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::run::{clean_data, corrupt_train, train, Data, EpochRecord, RunOptions, Summary};
use crate::table::{num, Table};

/// Metrics of a finished run, as stored in the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub digest: String,
    pub history: Vec<EpochRecord>,
    pub last: Summary,
    /// Wall-clock training and evaluation time of the original run.
    #[serde(default)]
    pub seconds: f64,
}

impl RunSummary {
    /// First epoch (1-based) whose evaluation reached `map50`, or infinity.
    pub fn epochs_to(&self, map50: f64) -> f64 {
        self.history
            .iter()
            .find(|r| r.eval.is_some_and(|e| e.map50 >= map50))
            .map_or(f64::INFINITY, |r| r.epoch as f64)
    }
}

#[derive(Default)]
pub struct Runner {
    pub cache_dir: Option<PathBuf>,
    /// Print one line per finished run to stderr.
    pub verbose: bool,
    data: HashMap<String, Data>,
}

impl Runner {
    pub fn new(cache_dir: Option<PathBuf>) -> Self {
        Self {
            cache_dir,
            ..Self::default()
        }
    }

    fn clean(&mut self, cfg: &RunConfig) -> Result<&Data> {
        let key = serde_json::to_string(&(&cfg.data, &cfg.gen, &cfg.emulator)).expect("config serializes");
        if !self.data.contains_key(&key) {
            let d = clean_data(cfg)?;
            self.data.insert(key.clone(), d);
        }
        Ok(&self.data[&key])
    }

    /// Trains `cfg` with an evaluation after every epoch, or returns the
    /// cached result of an identical earlier run.
    pub fn run(&mut self, cfg: &RunConfig) -> Result<RunSummary> {
        let digest = cfg.digest();
        let cached = self.cache_dir.as_ref().map(|d| d.join(format!("{digest}.json")));
        if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            if let Ok(s) = serde_json::from_str::<RunSummary>(&text) {
                if s.digest == digest {
                    return Ok(s);
                }
            }
        }
        let start = std::time::Instant::now();
        let data = corrupt_train(cfg, self.clean(cfg)?)?;
        let r = train(
            cfg,
            &data,
            RunOptions {
                eval_every_epoch: true,
                ..RunOptions::default()
            },
        )?;
        let summary = RunSummary {
            digest,
            last: Summary::from(&r.metrics),
            history: r.history,
            seconds: start.elapsed().as_secs_f64(),
        };
        if self.verbose {
            eprintln!(
                "run seed={} noise={} dn={:?} init={:?}: map50 {:.4} ({:.0}s)",
                cfg.seed,
                cfg.noise_level,
                cfg.dn_mode,
                cfg.model.query_init,
                summary.last.map50,
                summary.seconds
            );
        }
        if let (Some(dir), Some(path)) = (&self.cache_dir, &cached) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let json = serde_json::to_string(&summary).expect("summary serializes");
            std::fs::write(path, json).map_err(io_err(path))?;
        }
        Ok(summary)
    }
}

/// Median of `xs`; the mean of the middle pair for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else if v[n / 2 - 1] == v[n / 2] {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRow {
    pub level: f64,
    pub seed: u64,
    pub cascade: f64,
    pub uniform: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMedian {
    pub level: f64,
    pub cascade: f64,
    pub uniform: f64,
    /// Median of the per-seed gaps.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseReport {
    pub rows: Vec<NoiseRow>,
    pub medians: Vec<NoiseMedian>,
}

impl NoiseReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["noise", "seed", "cascade_map50", "uniform_map50", "gap"]);
        for r in &self.rows {
            t.push([num(r.level), r.seed.to_string(), num(r.cascade), num(r.uniform), num(r.gap)]);
        }
        for m in &self.medians {
            t.push([num(m.level), "median".into(), num(m.cascade), num(m.uniform), num(m.gap)]);
        }
        t
    }
}

/// Cascade against uniform denoising on training labels corrupted at each
/// noise level, both evaluated on the clean split.
pub fn ablate_noise(runner: &mut Runner, base: &RunConfig, levels: &[f64], seeds: &[u64]) -> Result<NoiseReport> {
    if levels.is_empty() || seeds.is_empty() {
        return Err(Error::Config("noise ablation needs at least one level and one seed".into()));
    }
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for &level in levels {
        let mut per_level = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.noise_level = level;
            cfg.dn_mode = DnMode::Cascade;
            let cascade = runner.run(&cfg)?.last.map50;
            cfg.dn_mode = DnMode::Uniform;
            let uniform = runner.run(&cfg)?.last.map50;
            per_level.push(NoiseRow {
                level,
                seed,
                cascade,
                uniform,
                gap: cascade - uniform,
            });
        }
        let col = |f: fn(&NoiseRow) -> f64| median(&per_level.iter().map(f).collect::<Vec<_>>());
        medians.push(NoiseMedian {
            level,
            cascade: col(|r| r.cascade),
            uniform: col(|r| r.uniform),
            gap: col(|r| r.gap),
        });
        rows.extend(per_level);
    }
    Ok(NoiseReport { rows, medians })
}

/// One cell of the component lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub init: QueryInit,
    pub dn: DnMode,
}

impl Cell {
    pub fn lattice() -> Vec<Cell> {
        let mut out = Vec::new();
        for init in [QueryInit::Hqp, QueryInit::Random] {
            for dn in [DnMode::Cascade, DnMode::Uniform, DnMode::Off] {
                out.push(Cell { init, dn });
            }
        }
        out
    }

    pub fn init_name(&self) -> &'static str {
        match self.init {
            QueryInit::Hqp => "hqp",
            QueryInit::Random => "random",
        }
    }

    pub fn dn_name(&self) -> &'static str {
        match self.dn {
            DnMode::Cascade => "cascade",
            DnMode::Uniform => "uniform",
            DnMode::Off => "off",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub map50: Vec<f64>,
    pub epochs_to: Vec<f64>,
}

impl CellResult {
    pub fn median_map50(&self) -> f64 {
        median(&self.map50)
    }

    pub fn median_epochs_to(&self) -> f64 {
        median(&self.epochs_to)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub threshold: f64,
    pub cells: Vec<CellResult>,
}

impl ComponentReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["queries", "dn", "map50", "epochs_to_threshold"]);
        for c in &self.cells {
            t.push([
                c.cell.init_name().to_string(),
                c.cell.dn_name().to_string(),
                num(c.median_map50()),
                num(c.median_epochs_to()),
            ]);
        }
        t
    }
}

/// Trains every requested cell of {HQP, random queries} x {cascade, uniform,
/// no denoising} at each seed. Epochs-to-threshold is the first epoch whose
/// evaluation reaches `threshold`, infinite when none does.
pub fn ablate_components(
    runner: &mut Runner,
    base: &RunConfig,
    cells: &[Cell],
    seeds: &[u64],
    threshold: f64,
) -> Result<ComponentReport> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Config("component ablation needs at least one cell and one seed".into()));
    }
    let mut out = Vec::new();
    for &cell in cells {
        let mut res = CellResult {
            cell,
            map50: Vec::new(),
            epochs_to: Vec::new(),
        };
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.query_init = cell.init;
            cfg.dn_mode = cell.dn;
            let s = runner.run(&cfg)?;
            res.map50.push(s.last.map50);
            res.epochs_to.push(s.epochs_to(threshold));
        }
        out.push(res);
    }
    Ok(ComponentReport { threshold, cells: out })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub theta1: f64,
    pub tau: f64,
    pub map50: f64,
}

/// Cascade runs over initial thresholds (at the base temperature) and over
/// temperatures (at the base initial threshold). The threshold increment is
/// shortened where it would carry the last layer past 1.
pub fn sweep_cascade(runner: &mut Runner, base: &RunConfig, theta1s: &[f64], taus: &[f64], seeds: &[u64]) -> Result<Table> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let mut points: Vec<(f64, f64)> = theta1s.iter().map(|&t| (t, base.cascade.tau)).collect();
    points.extend(taus.iter().map(|&tau| (base.cascade.theta1, tau)));
    let mut t = Table::new(["theta1", "tau", "map50"]);
    for (theta1, tau) in points {
        let mut vals = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.dn_mode = DnMode::Cascade;
            cfg.cascade.theta1 = theta1;
            cfg.cascade.tau = tau;
            cfg.cascade.delta_theta = cfg.cascade.delta_theta.min(1.0 - theta1);
            vals.push(runner.run(&cfg)?.last.map50);
        }
        let row = SweepRow {
            theta1,
            tau,
            map50: median(&vals),
        };
        t.push([num(row.theta1), num(row.tau), num(row.map50)]);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY, 2.0]), f64::INFINITY);
        assert_eq!(median(&[f64::INFINITY, f64::INFINITY]), f64::INFINITY);
    }

    #[test]
    fn lattice_has_six_cells() {
        let cells = Cell::lattice();
        assert_eq!(cells.len(), 6);
        for (i, a) in cells.iter().enumerate() {
            assert!(cells[i + 1..].iter().all(|b| b != a));
        }
    }
}
