//! Ablation suites and the desk-scale ordering benchmark.
//!
//! A [`Bench`] owns one dataset and caches every trained cell (teacher, SSL
//! encoder, student, probe) by key and seed, so suites that share cells train
//! them once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clipgen::{Split, SyntheticDataset, VideoClip};
use crate::error::{invalid, Result};
use crate::fusion::FusionVariant;
use crate::sampler::SslVariant;
use crate::trainer::{
    distill_with_targets, encoder_from_checkpoint, evaluate_student, evaluate_teacher, pretrain_student_ssl, ssl_pool, teacher_targets,
    train_linear_probe, train_teacher, Checkpoint, ClipStore, Metrics, RunOptions, Stage, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Fusion,
    Supcon,
    Ssl,
    Kd,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Fusion, Suite::Supcon, Suite::Ssl, Suite::Kd];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Fusion => "fusion",
            Suite::Supcon => "supcon",
            Suite::Ssl => "ssl",
            Suite::Kd => "kd",
        }
    }

    pub fn rows(self) -> Vec<Cell> {
        let dff = FusionVariant::Dff;
        match self {
            Suite::Fusion => {
                let order = [FusionVariant::DarkOnly, FusionVariant::RetinexOnly, FusionVariant::Static, dff];
                let mut rows: Vec<Cell> = order.iter().map(|&f| Cell::Teacher { fusion: f, supcon: true }).collect();
                rows.extend(order.iter().map(|&f| Cell::Student { fusion: f, ssl: Some(SslVariant::Both), kd: true }));
                rows
            }
            Suite::Supcon => vec![Cell::Teacher { fusion: dff, supcon: false }, Cell::Teacher { fusion: dff, supcon: true }],
            Suite::Ssl => {
                let mut rows = vec![Cell::Student { fusion: dff, ssl: None, kd: true }];
                rows.extend(
                    [SslVariant::SpatialOnly, SslVariant::TemporalOnly, SslVariant::Both].map(|v| Cell::Student { fusion: dff, ssl: Some(v), kd: true }),
                );
                rows
            }
            Suite::Kd => vec![
                Cell::Probe { ssl: SslVariant::Both },
                Cell::Student { fusion: dff, ssl: None, kd: true },
                Cell::Student { fusion: dff, ssl: Some(SslVariant::Both), kd: true },
            ],
        }
    }
}

impl FromStr for Suite {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid(format!("unknown suite `{s}`; expected one of fusion, supcon, ssl, kd")))
    }
}

/// One trained-and-evaluated configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Teacher { fusion: FusionVariant, supcon: bool },
    /// Student distilled from the SupCon teacher with `fusion`, with the
    /// encoder warm-started from SSL variant `ssl` when given.
    Student { fusion: FusionVariant, ssl: Option<SslVariant>, kd: bool },
    /// Linear probe on a frozen SSL encoder.
    Probe { ssl: SslVariant },
}

impl Cell {
    pub fn label(&self) -> String {
        match *self {
            Cell::Teacher { fusion, supcon } => format!("teacher {}{}", fusion.label(), if supcon { "" } else { " (no supcon)" }),
            Cell::Student { fusion, ssl, .. } => match ssl {
                None => format!("student kd-only <- {}", fusion.label()),
                Some(v) => format!("student ssl-{}+kd <- {}", v.label(), fusion.label()),
            },
            Cell::Probe { ssl } => format!("ssl-only probe ({})", ssl.label()),
        }
    }

    fn key(&self, seed: u64) -> String {
        let body = match *self {
            Cell::Teacher { fusion, supcon } => format!("teacher-{}-{}", fusion.label(), if supcon { "supcon" } else { "ce" }),
            Cell::Student { fusion, ssl, .. } => format!("student-{}-{}", fusion.label(), ssl.map_or("none", |v| v.label())),
            Cell::Probe { ssl } => format!("probe-{}", ssl.label()),
        };
        format!("{body}-seed{seed}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub label: String,
    pub seed: u64,
    pub val: Metrics,
    pub test: Metrics,
}

/// Median of `values`; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub val_top1: f64,
    pub val_top5: f64,
    pub test_top1: f64,
    pub test_top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<TableRow>,
    pub raw: Vec<CellResult>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,val_top1,val_top5,test_top1,test_top5\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.4},{:.4},{:.4},{:.4}", r.label, r.val_top1, r.val_top5, r.test_top1, r.test_top5);
        }
        s
    }

    pub fn raw_csv(&self) -> String {
        let mut s = String::from("row,seed,val_top1,val_top5,test_top1,test_top5\n");
        for r in &self.raw {
            let _ = writeln!(s, "{},{},{:.4},{:.4},{:.4},{:.4}", r.label, r.seed, r.val.top1, r.val.top5, r.test.top1, r.test.top5);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!("suite {} (median over seeds {})\n", self.suite, seeds.join(","));
        let _ = writeln!(s, "{:<w$}  {:>8}  {:>8}  {:>8}  {:>8}", "row", "val@1", "val@5", "test@1", "test@5");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>8.2}  {:>8.2}  {:>8.2}  {:>8.2}",
                r.label,
                100.0 * r.val_top1,
                100.0 * r.val_top5,
                100.0 * r.test_top1,
                100.0 * r.test_top5
            );
        }
        s
    }
}

/// Shared state for a set of ablation runs over one dataset.
pub struct Bench {
    pub base: TrainConfig,
    pub dataset: SyntheticDataset,
    store: ClipStore,
    pool: Option<Vec<VideoClip>>,
    teachers: BTreeMap<String, Checkpoint>,
    ssl: BTreeMap<String, Checkpoint>,
    results: BTreeMap<String, CellResult>,
    cache_dir: Option<PathBuf>,
    pub verbose: bool,
}

impl Bench {
    /// `cache_dir`, when set, stores every cell's checkpoint and metrics and
    /// reuses them on later runs with the same configuration.
    pub fn new(base: TrainConfig, dataset: SyntheticDataset, cache_dir: Option<&Path>) -> Result<Self> {
        base.validate()?;
        let store = ClipStore::new(&dataset, base.retinex.clone())?;
        Ok(Self {
            base,
            dataset,
            store,
            pool: None,
            teachers: BTreeMap::new(),
            ssl: BTreeMap::new(),
            results: BTreeMap::new(),
            cache_dir: cache_dir.map(Path::to_path_buf),
            verbose: false,
        })
    }

    pub fn store(&self) -> &ClipStore {
        &self.store
    }

    fn config(&self, stage: Stage, seed: u64) -> TrainConfig {
        let mut c = self.base.clone();
        c.stage = stage;
        c.seed = seed;
        // Per-epoch validation is not needed for final-metric tables.
        c.eval_every_epoch = false;
        c
    }

    fn cell_dir(&self, key: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join("cells").join(key))
    }

    fn cached_checkpoint(&self, key: &str, config: &TrainConfig) -> Option<Checkpoint> {
        let path = self.cell_dir(key)?.join("checkpoint.bin");
        let ck = Checkpoint::load(path).ok()?;
        ck.check_fingerprint(config).ok()?;
        (ck.epoch == config.epochs).then_some(ck)
    }

    fn store_checkpoint(&self, key: &str, ck: &Checkpoint) -> Result<()> {
        if let Some(dir) = self.cell_dir(key) {
            std::fs::create_dir_all(&dir)?;
            ck.save(dir.join("checkpoint.bin"))?;
        }
        Ok(())
    }

    fn log(&self, msg: impl FnOnce() -> String) {
        if self.verbose {
            eprintln!("{}", msg());
        }
    }

    /// Teacher checkpoint for `(fusion, supcon, seed)`.
    pub fn teacher(&mut self, fusion: FusionVariant, supcon: bool, seed: u64) -> Result<Checkpoint> {
        let key = Cell::Teacher { fusion, supcon }.key(seed);
        if let Some(ck) = self.teachers.get(&key) {
            return Ok(ck.clone());
        }
        let mut config = self.config(Stage::Teacher, seed);
        config.fusion_variant = fusion;
        if !supcon {
            config.lambda_sup = 0.0;
        }
        let ck = match self.cached_checkpoint(&key, &config) {
            Some(ck) => ck,
            None => {
                let t0 = std::time::Instant::now();
                let ck = train_teacher(&config, &self.dataset, &self.store, RunOptions::default())?.checkpoint;
                self.log(|| format!("trained {key} in {:.1?}", t0.elapsed()));
                self.store_checkpoint(&key, &ck)?;
                ck
            }
        };
        self.teachers.insert(key, ck.clone());
        Ok(ck)
    }

    /// SSL-pretrained encoder checkpoint for `(variant, seed)`.
    pub fn ssl(&mut self, variant: SslVariant, seed: u64) -> Result<Checkpoint> {
        let key = format!("ssl-{}-seed{seed}", variant.label());
        if let Some(ck) = self.ssl.get(&key) {
            return Ok(ck.clone());
        }
        let mut config = self.config(Stage::Ssl, seed);
        config.ssl_variant = variant;
        let ck = match self.cached_checkpoint(&key, &config) {
            Some(ck) => ck,
            None => {
                if self.pool.is_none() {
                    self.pool = Some(ssl_pool(&self.dataset, self.base.ssl_extra_clips, self.dataset.sampler_seed)?);
                }
                let pool = self.pool.as_deref().unwrap_or_default();
                let t0 = std::time::Instant::now();
                let ck = pretrain_student_ssl(&config, &self.dataset, pool, RunOptions::default())?.checkpoint;
                self.log(|| format!("trained {key} in {:.1?}", t0.elapsed()));
                self.store_checkpoint(&key, &ck)?;
                ck
            }
        };
        self.ssl.insert(key, ck.clone());
        Ok(ck)
    }

    /// Trains (or fetches) one cell and evaluates it on val and test.
    pub fn run(&mut self, cell: Cell, seed: u64) -> Result<CellResult> {
        let key = cell.key(seed);
        if let Some(r) = self.results.get(&key) {
            return Ok(r.clone());
        }
        let (val, test) = match cell {
            Cell::Teacher { fusion, supcon } => {
                let ck = self.teacher(fusion, supcon, seed)?;
                let t = crate::trainer::teacher_from_checkpoint(&ck)?;
                (evaluate_teacher(&t, &self.store, Split::Val)?, evaluate_teacher(&t, &self.store, Split::Test)?)
            }
            Cell::Student { fusion, ssl, kd } => {
                let teacher_ck = self.teacher(fusion, true, seed)?;
                let ssl_ck = match ssl {
                    Some(v) => Some(self.ssl(v, seed)?),
                    None => None,
                };
                let mut config = self.config(Stage::Distill, seed);
                if !kd {
                    config.lambda_kd = 0.0;
                }
                let student = match self.cached_checkpoint(&key, &config) {
                    Some(ck) => crate::trainer::student_from_checkpoint(&ck)?,
                    None => {
                        let teacher = crate::trainer::teacher_from_checkpoint(&teacher_ck)?;
                        let ids: Vec<u32> = self.store.split(Split::Train).into_iter().map(|(id, _)| id).collect();
                        let targets = teacher_targets(&teacher, &self.store, &ids)?;
                        let t0 = std::time::Instant::now();
                        let trained = distill_with_targets(&config, &self.dataset, &self.store, &targets, ssl_ck.as_ref(), RunOptions::default())?;
                        self.log(|| format!("trained {key} in {:.1?}", t0.elapsed()));
                        self.store_checkpoint(&key, &trained.checkpoint)?;
                        trained.model
                    }
                };
                (evaluate_student(&student, &self.store, Split::Val)?, evaluate_student(&student, &self.store, Split::Test)?)
            }
            Cell::Probe { ssl } => {
                let ck = self.ssl(ssl, seed)?;
                let encoder = encoder_from_checkpoint(&ck)?;
                let config = self.config(Stage::Distill, seed);
                let out = train_linear_probe(&config, &encoder, &self.store, self.dataset.num_classes)?;
                (out.val, out.test)
            }
        };
        let result = CellResult { cell, label: cell.label(), seed, val, test };
        if let Some(dir) = self.cell_dir(&key) {
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&result)?)?;
        }
        self.results.insert(key, result.clone());
        Ok(result)
    }

    /// Runs every row of `suite` over `seeds` and reduces to medians.
    pub fn suite(&mut self, suite: Suite, seeds: &[u64]) -> Result<Table> {
        if seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        let mut rows = Vec::new();
        let mut raw = Vec::new();
        for cell in suite.rows() {
            let results = seeds.iter().map(|&s| self.run(cell, s)).collect::<Result<Vec<_>>>()?;
            let m = |f: fn(&CellResult) -> f64| median(&results.iter().map(f).collect::<Vec<_>>());
            rows.push(TableRow {
                label: cell.label(),
                val_top1: m(|r| r.val.top1),
                val_top5: m(|r| r.val.top5),
                test_top1: m(|r| r.test.top1),
                test_top5: m(|r| r.test.top5),
            });
            raw.extend(results);
        }
        Ok(Table { suite: suite.name().to_string(), seeds: seeds.to_vec(), rows, raw })
    }

    /// Median test top-1 of `cell` over `seeds`.
    pub fn median_top1(&mut self, cell: Cell, seeds: &[u64]) -> Result<f64> {
        let v = seeds.iter().map(|&s| Ok(self.run(cell, s)?.test.top1)).collect::<Result<Vec<_>>>()?;
        Ok(median(&v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// The four ordering claims, evaluated on median test top-1 (in points).
pub fn ordering_checks(bench: &mut Bench, seeds: &[u64]) -> Result<Vec<OrderingCheck>> {
    let dff = FusionVariant::Dff;
    let mut top1 = |cell: Cell| -> Result<f64> { Ok(100.0 * bench.median_top1(cell, seeds)?) };
    let t_dff = top1(Cell::Teacher { fusion: dff, supcon: true })?;
    let t_static = top1(Cell::Teacher { fusion: FusionVariant::Static, supcon: true })?;
    let t_dark = top1(Cell::Teacher { fusion: FusionVariant::DarkOnly, supcon: true })?;
    let t_ret = top1(Cell::Teacher { fusion: FusionVariant::RetinexOnly, supcon: true })?;
    let t_ce = top1(Cell::Teacher { fusion: dff, supcon: false })?;
    let s_both = top1(Cell::Student { fusion: dff, ssl: Some(SslVariant::Both), kd: true })?;
    let s_kd = top1(Cell::Student { fusion: dff, ssl: None, kd: true })?;
    let s_spatial = top1(Cell::Student { fusion: dff, ssl: Some(SslVariant::SpatialOnly), kd: true })?;
    let s_temporal = top1(Cell::Student { fusion: dff, ssl: Some(SslVariant::TemporalOnly), kd: true })?;
    let probe = top1(Cell::Probe { ssl: SslVariant::Both })?;
    let check = |name: &str, passed: bool, detail: String| OrderingCheck { name: name.into(), passed, detail };
    Ok(vec![
        check(
            "teacher_fusion_order",
            t_dff >= t_static && t_static >= t_dark.max(t_ret) && t_dff - t_dark >= 5.0,
            format!("dff={t_dff:.2} static={t_static:.2} dark_only={t_dark:.2} retinex_only={t_ret:.2} dff-dark={:.2} (need >= 5)", t_dff - t_dark),
        ),
        check(
            "student_order",
            s_both >= s_kd && s_kd >= probe && s_both - probe >= 3.0,
            format!("ssl+kd={s_both:.2} kd_only={s_kd:.2} ssl_only={probe:.2} ssl+kd-ssl_only={:.2} (need >= 3)", s_both - probe),
        ),
        check("supcon_order", t_dff >= t_ce, format!("with={t_dff:.2} without={t_ce:.2}")),
        check(
            "ssl_view_order",
            s_both >= s_spatial && s_both >= s_temporal,
            format!("both={s_both:.2} spatial={s_spatial:.2} temporal={s_temporal:.2}"),
        ),
    ])
}
