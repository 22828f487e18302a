//! Command-line front end. Every command writes `run_manifest.json` into its
//! output directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablate::{Bench, Suite};
use crate::array_dump;
use crate::clipgen::{generate_dataset, Dims, Split, SyntheticDataset};
use crate::enhance::{gamma_correct, retinex_enhance};
use crate::error::{invalid, Error, Result};
use crate::fusion::FusionVariant;
use crate::par;
use crate::sampler::SslVariant;
use crate::trainer::gradcheck::{grad_check, LOSS_NAMES};
use crate::trainer::{
    distill_student, evaluate, pretrain_student_ssl, ssl_pool, train_teacher, Checkpoint, ClipStore, EpochRecord, RunOptions, Stage,
    TrainConfig,
};
use crate::verify::{run_all, VerifyOptions};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "actlumos", version, about = "Dark-video action recognition: dual-stream teacher, single-stream student")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file overriding the default training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dark-video dataset manifest.
    GenData {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        /// Clip dimensions as LxHxW.
        #[arg(long, default_value = "16x32x32")]
        dims: Dims,
        #[command(flatten)]
        common: Common,
    },
    /// Write enhanced copies of every clip as array dumps.
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = EnhanceMode::Retinex)]
        mode: EnhanceMode,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage.
    Train {
        #[arg(long)]
        stage: Stage,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fusion: Option<FusionVariant>,
        #[arg(long)]
        ssl_variant: Option<SslVariant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        teacher_ckpt: Option<PathBuf>,
        #[arg(long)]
        ssl_ckpt: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a teacher or distilled student checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        common: Common,
    },
    /// Run an ablation suite and write its tables.
    Ablate {
        #[arg(long)]
        suite: Suite,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the invariant, oracle and gradient-check suite.
    Verify {
        /// Swap in the SupCon loss whose denominator includes the anchor.
        #[arg(long)]
        mutate_supcon: bool,
        #[arg(long, default_value_t = 20)]
        grad_instances: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of one analytic gradient.
    GradCheck {
        #[arg(long)]
        loss: String,
        #[arg(long, default_value_t = 20)]
        instances: u64,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EnhanceMode {
    Retinex,
    Gamma,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<serde_json::Value>,
    pub inputs: Vec<PathBuf>,
    /// Output path (relative to the output directory) to hex SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    pub exit_code: u8,
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

struct Run {
    out: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    fn new(command: &str, args: &[String], out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Self {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                args: args.to_vec(),
                config: None,
                inputs: Vec::new(),
                outputs: BTreeMap::new(),
                wall_clock_secs: 0.0,
                exit_code: EXIT_OK,
            },
            started: Instant::now(),
        })
    }

    fn output(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.manifest.outputs.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    fn record_existing(&mut self, rel: &str) -> Result<()> {
        let h = file_hash(&self.out.join(rel))?;
        self.manifest.outputs.insert(rel.to_string(), h);
        Ok(())
    }

    fn finish(&mut self, code: u8) -> Result<u8> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        self.manifest.exit_code = code;
        std::fs::write(self.out.join("run_manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(code)
    }
}

fn load_config(common: &Common, stage: Stage) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.stage = stage;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<SyntheticDataset> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("dataset manifest {} not found", path.display())));
    }
    SyntheticDataset::load(path)
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("{what} checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path)
}

/// Exit code for an error escaping a command.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        Error::InvalidArgument(_) | Error::Insufficient(_) | Error::Stage { .. } | Error::Fingerprint { .. } => EXIT_USAGE,
        _ => EXIT_VERIFY_FAILED,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> u8 {
    let args: Vec<OsString> = args.into_iter().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let threads = std::env::var("ACTLUMOS_THREADS").ok().and_then(|v| v.parse().ok());
    par::configure_threads(threads);
    let printable: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli.command, &printable) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Enhance { .. } => "enhance",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Verify { .. } => "verify",
            Command::GradCheck { .. } => "grad-check",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Enhance { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Verify { common, .. }
            | Command::GradCheck { common, .. } => common,
        }
    }
}

/// Runs `command`, writing its manifest even when the command fails.
pub fn run(command: Command, args: &[String]) -> Result<u8> {
    let mut run = Run::new(command.name(), args, &command.common().out)?;
    match execute(command, &mut run) {
        Ok(code) => run.finish(code),
        Err(e) => {
            let code = exit_code(&e);
            run.finish(code)?;
            Err(e)
        }
    }
}

fn execute(command: Command, run: &mut Run) -> Result<u8> {
    match command {
        Command::GenData { classes, per_class, dims, common } => {
            let ds = generate_dataset(classes, per_class, dims, common.seed.unwrap_or(0))?;
            let path = run.output("dataset.json", ds.to_json()?.as_bytes())?;
            println!("wrote {} ({} clips, {} train)", path.display(), ds.clips.len(), ds.count(Split::Train));
            Ok(EXIT_OK)
        }
        Command::Enhance { input, mode, gamma, common } => {
            let ds = load_dataset(&input)?;
            run.manifest.inputs.push(input);
            let cfg = load_config(&common, Stage::Teacher)?;
            let records: Vec<_> = ds.clips.iter().collect();
            let outputs = par::map(&records, |r| -> Result<(String, Vec<u8>)> {
                let clip = ds.render(r)?;
                let enhanced = match mode {
                    EnhanceMode::Retinex => retinex_enhance(&clip, &cfg.retinex)?,
                    EnhanceMode::Gamma => gamma_correct(&clip, gamma)?,
                };
                let mut bytes = Vec::new();
                array_dump::write_array(&mut bytes, &enhanced.data.into_dyn())?;
                Ok((format!("clip_{:05}.arr", r.id), bytes))
            });
            for o in outputs {
                let (name, bytes) = o?;
                run.output(&name, &bytes)?;
            }
            println!("wrote {} enhanced clips to {}", records.len(), common.out.display());
            Ok(EXIT_OK)
        }
        Command::Train { stage, data, fusion, ssl_variant, epochs, teacher_ckpt, ssl_ckpt, common } => {
            let mut cfg = load_config(&common, stage)?;
            if let Some(f) = fusion {
                cfg.fusion_variant = f;
            }
            if let Some(v) = ssl_variant {
                cfg.ssl_variant = v;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate()?;
            if stage == Stage::Distill && teacher_ckpt.is_none() {
                return Err(invalid("train --stage distill requires --teacher-ckpt"));
            }
            run.manifest.inputs.push(data.clone());
            let ds = load_dataset(&data)?;
            run.manifest.config = Some(serde_json::to_value(&cfg)?);
            let log_path = common.out.join("metrics.jsonl");
            let mut log = OpenOptions::new().create(true).write(true).truncate(true).open(&log_path)?;
            let mut on_epoch = |r: &EpochRecord| {
                println!("{}", r.line());
                if let Ok(line) = serde_json::to_string(r) {
                    let _ = writeln!(log, "{line}");
                }
            };
            let opts = RunOptions { on_epoch: Some(&mut on_epoch), ..Default::default() };
            let checkpoint = match stage {
                Stage::Teacher => {
                    let store = ClipStore::new(&ds, cfg.retinex.clone())?;
                    train_teacher(&cfg, &ds, &store, opts)?.checkpoint
                }
                Stage::Ssl => {
                    let pool = ssl_pool(&ds, cfg.ssl_extra_clips, ds.sampler_seed)?;
                    pretrain_student_ssl(&cfg, &ds, &pool, opts)?.checkpoint
                }
                Stage::Distill => {
                    let tpath = teacher_ckpt.unwrap_or_default();
                    let teacher = load_checkpoint(&tpath, "teacher")?;
                    run.manifest.inputs.push(tpath);
                    let ssl = match &ssl_ckpt {
                        Some(p) => {
                            run.manifest.inputs.push(p.clone());
                            Some(load_checkpoint(p, "ssl")?)
                        }
                        None => None,
                    };
                    let store = ClipStore::new(&ds, teacher.config.retinex.clone())?;
                    distill_student(&cfg, &ds, &store, &teacher, ssl.as_ref(), opts)?.checkpoint
                }
            };
            let path = run.output("checkpoint.bin", &checkpoint.to_bytes()?)?;
            run.record_existing("metrics.jsonl")?;
            println!("checkpoint {} fingerprint {}", path.display(), checkpoint.fingerprint);
            Ok(EXIT_OK)
        }
        Command::Eval { ckpt, data, split, .. } => {
            let ck = load_checkpoint(&ckpt, "model")?;
            let ds = load_dataset(&data)?;
            run.manifest.inputs.extend([ckpt, data]);
            let store = ClipStore::new(&ds, ck.config.retinex.clone())?;
            let m = evaluate(&ck, &store, split)?;
            println!("stage={} split={:?} top1={:.4} top5={:.4} n={}", ck.stage, split, m.top1, m.top5, m.count);
            run.output("metrics.json", &serde_json::to_vec_pretty(&m)?)?;
            Ok(EXIT_OK)
        }
        Command::Ablate { suite, seeds, data, epochs, common } => {
            let mut cfg = load_config(&common, Stage::Teacher)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            run.manifest.inputs.push(data.clone());
            let ds = load_dataset(&data)?;
            run.manifest.config = Some(serde_json::to_value(&cfg)?);
            let mut bench = Bench::new(cfg, ds, Some(&common.out))?;
            bench.verbose = true;
            let table = bench.suite(suite, &seeds)?;
            print!("{}", table.to_text());
            let name = suite.name();
            run.output(&format!("{name}.csv"), table.to_csv().as_bytes())?;
            run.output(&format!("{name}.txt"), table.to_text().as_bytes())?;
            run.output(&format!("{name}_raw.csv"), table.raw_csv().as_bytes())?;
            Ok(EXIT_OK)
        }
        Command::Verify { mutate_supcon, grad_instances, .. } => {
            let checks = run_all(VerifyOptions { mutate_supcon_denominator: mutate_supcon, grad_instances });
            let mut report = String::new();
            for c in &checks {
                println!("{}", c.line());
                report.push_str(&c.line());
                report.push('\n');
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {} failed", checks.len(), failed);
            run.output("verify_report.txt", report.as_bytes())?;
            Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY_FAILED })
        }
        Command::GradCheck { loss, instances, common } => {
            if !LOSS_NAMES.contains(&loss.as_str()) {
                return Err(invalid(format!("unknown loss `{loss}`; expected one of {}", LOSS_NAMES.join(", "))));
            }
            let seed0 = common.seed.unwrap_or(0);
            let reports = (seed0..seed0 + instances).map(|s| grad_check(&loss, s)).collect::<Result<Vec<_>>>()?;
            for r in &reports {
                println!(
                    "{} loss={} seed={} max_rel={:.3e} checked={} kink_skips={} worst={}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.loss,
                    r.seed,
                    r.max_rel_error,
                    r.checked,
                    r.skipped_kinks,
                    r.worst
                );
            }
            run.output("grad_check.json", &serde_json::to_vec_pretty(&reports)?)?;
            Ok(if reports.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_VERIFY_FAILED })
        }
    }
}
