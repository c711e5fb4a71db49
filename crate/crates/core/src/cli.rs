//! Command-line front end of the `sedtriadv` binary.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::audio::{log_mel, read_wav};
use crate::config::RunConfig;
use crate::corpus::{generate_toy_corpus, load_manifest, load_split, GenerateConfig, Split, SplitCounts};
use crate::error::{Error, Result};
use crate::evaluator::{decode, evaluate_run, write_tsv};
use crate::model::Head;
use crate::trainer::{mask_coverage, pseudo_label, run, LoadedRun, MaskCoverage, TrainMode, TrainingSet, FINAL_CKPT, PHASE1_CKPT};

pub const THREADS_ENV: &str = "SEDTRIADV_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sedtriadv", version, about = "Sound event detection with tri-training and domain adaptation")]
pub struct Cli {
    /// Worker threads (falls back to SEDTRIADV_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-domain corpus.
    GenData(GenDataArgs),
    /// Train one ablation mode.
    Train(TrainArgs),
    /// Score a trained run on a strongly labeled split.
    Evaluate(EvaluateArgs),
    /// Decode events of one WAV file as TSV.
    Predict(PredictArgs),
    /// Dump pseudo-label coverage of a tri-training run.
    PseudoLabel(PseudoLabelArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.8)]
    pub gap: f64,
    /// nS,nW,nU,nVal
    #[arg(long, default_value = "200,150,400,100")]
    pub counts: Counts,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Counts(pub SplitCounts);

impl FromStr for Counts {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<usize> = s
            .split(',')
            .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        match v[..] {
            [n_s, n_w, n_u, n_val] => Ok(Counts(SplitCounts { n_s, n_w, n_u, n_val })),
            _ => Err(format!("expected four comma-separated counts, got {}", v.len())),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory (or `paths.data` in the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub mode: TrainMode,
    /// JSON overlay on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory (or `paths.run` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters1: Option<usize>,
    #[arg(long)]
    pub iters2: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "validation")]
    pub split: Split,
    #[arg(long, default_value = FINAL_CKPT)]
    pub checkpoint: String,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long, default_value = FINAL_CKPT)]
    pub checkpoint: String,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint whose feature extractor and labelers produce the masks.
    #[arg(long, default_value = PHASE1_CKPT)]
    pub checkpoint: String,
    /// Overrides the run's agreement threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
}

/// Parses arguments, runs the command and maps errors to exit code 1.
pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli, &mut io::stdout().lock()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}

pub fn execute(cli: Cli, out: &mut impl Write) -> Result<()> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Evaluate(a) => evaluate(&a, out),
        Command::Predict(a) => predict(&a, out),
        Command::PseudoLabel(a) => pseudo_label_cmd(&a, out),
    }
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn refuse_non_empty(dir: &Path, force: bool) -> Result<()> {
    if !force && dir.is_dir() && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::RefuseOverwrite(dir.to_path_buf()));
    }
    Ok(())
}

fn gen_data(a: &GenDataArgs, out: &mut impl Write) -> Result<()> {
    refuse_non_empty(&a.out, a.force)?;
    let cfg = GenerateConfig {
        seed: a.seed,
        n_classes: a.classes,
        counts: a.counts.0,
        domain_gap: a.gap,
    };
    let info = generate_toy_corpus(&a.out, &cfg)?;
    let c = info.counts;
    writeln!(
        out,
        "wrote {} clips to {}: strong {}, weak {}, unlabeled {}, validation {} ({} classes, gap {})",
        c.total(),
        a.out.display(),
        c.n_s,
        c.n_w,
        c.n_u,
        c.n_val,
        info.class_names.len(),
        info.domain_gap
    )?;
    Ok(())
}

/// Preset, then the config file, then command-line flags.
pub fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(&a.preset)?;
    if let Some(path) = &a.config {
        let overlay: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg = cfg.merged(&overlay)?;
    }
    cfg.train = cfg.train.with_mode(a.mode);
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.iters1 {
        cfg.train.iters_phase1 = n;
    }
    if let Some(n) = a.iters2 {
        cfg.train.iters_phase2 = n;
    }
    if let Some(d) = &a.data {
        cfg.paths.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.paths.run = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let cfg = train_config(a)?;
    let data_dir = cfg
        .paths
        .data
        .clone()
        .ok_or_else(|| Error::Config("no corpus given (--data or paths.data)".into()))?;
    let run_dir = cfg
        .paths
        .run
        .clone()
        .ok_or_else(|| Error::Config("no run directory given (--out or paths.run)".into()))?;
    refuse_non_empty(&run_dir, a.force)?;
    let manifest = load_manifest(&data_dir)?;
    log::info!("extracting features for {} clips", manifest.clips.len());
    let data = TrainingSet::from_corpus(&manifest, &cfg.frontend, &cfg.model)?;
    let summary = run(&cfg, &data, &run_dir)?;
    writeln!(
        out,
        "trained {} for {} steps into {}",
        cfg.train.mode(),
        summary.steps,
        summary.dir.display()
    )?;
    let l = summary.last;
    write!(out, "last loss_y {:.6}", l.loss_y)?;
    if let Some(d) = l.loss_d {
        write!(out, " loss_d {d:.6}")?;
    }
    if let Some(o) = l.loss_orth {
        write!(out, " loss_orth {o:.6}")?;
    }
    writeln!(out)?;
    Ok(())
}

fn evaluate(a: &EvaluateArgs, out: &mut impl Write) -> Result<()> {
    let loaded = LoadedRun::load(&a.run, &a.checkpoint)?;
    let manifest = load_manifest(&a.data)?;
    let (report, _) = evaluate_run(&loaded, &manifest, a.split)?;
    write!(out, "{}", report.table())?;
    if let Some(path) = &a.report {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn predict(a: &PredictArgs, out: &mut impl Write) -> Result<()> {
    let loaded = LoadedRun::load(&a.run, &a.checkpoint)?;
    let spec = log_mel(&read_wav(&a.wav)?, &loaded.record.frontend)?;
    let pred = loaded.predict(std::slice::from_ref(&spec))?.remove(0);
    let id = a
        .wav
        .file_stem()
        .map_or_else(|| "clip".to_string(), |s| s.to_string_lossy().into_owned());
    let rows: Vec<_> = decode(&pred, &loaded.record.decode)
        .into_iter()
        .map(|e| (id.clone(), e))
        .collect();
    write_tsv(out, &rows, &loaded.record.class_names)
}

#[derive(Debug, Serialize)]
pub struct ClassCoverage {
    pub class: String,
    #[serde(flatten)]
    pub coverage: MaskCoverage,
}

#[derive(Debug, Serialize)]
pub struct MaskReport {
    pub threshold: f64,
    pub checkpoint: String,
    pub n_weak: usize,
    pub n_unlabeled: usize,
    pub classes: Vec<ClassCoverage>,
    pub weak: Vec<ClassCoverage>,
    pub unlabeled: Vec<ClassCoverage>,
}

fn pseudo_label_cmd(a: &PseudoLabelArgs, out: &mut impl Write) -> Result<()> {
    let loaded = LoadedRun::load(&a.run, &a.checkpoint)?;
    if !loaded.record.mode.tri_training() {
        return Err(Error::Config(format!(
            "run was trained in mode {}, which has no pseudo-labelers",
            loaded.record.mode
        )));
    }
    let manifest = load_manifest(&a.data)?;
    if manifest.class_names != loaded.record.class_names {
        return Err(Error::Config("corpus classes differ from the run's classes".into()));
    }
    let tau = a.threshold.unwrap_or(loaded.record.train.agree_threshold);
    if !(0.0..1.0).contains(&tau) || tau == 0.0 {
        return Err(Error::Config(format!("threshold must be in (0, 1), got {tau}")));
    }
    let k = manifest.n_classes();
    let mut per_split = Vec::new();
    for split in [Split::TrainW, Split::TrainU] {
        let clips = load_split(&manifest, split, &loaded.record.frontend)?;
        let specs: Vec<_> = clips.iter().map(|(_, s)| s.clone()).collect();
        let preds = loaded.predict_heads(&specs, &[Head::F1, Head::F2])?;
        let masks = clips
            .iter()
            .enumerate()
            .map(|(i, (clip, _))| {
                let weak = (split == Split::TrainW).then(|| clip.weak_vector(k));
                pseudo_label(&preds[0][i], &preds[1][i], weak.as_deref(), tau)
            })
            .collect::<Result<Vec<_>>>()?;
        per_split.push(masks);
    }
    let named = |cov: Vec<MaskCoverage>| -> Vec<ClassCoverage> {
        manifest
            .class_names
            .iter()
            .zip(cov)
            .map(|(class, coverage)| ClassCoverage {
                class: class.clone(),
                coverage,
            })
            .collect()
    };
    let report = MaskReport {
        threshold: tau,
        checkpoint: a.checkpoint.clone(),
        n_weak: per_split[0].len(),
        n_unlabeled: per_split[1].len(),
        classes: named(mask_coverage(per_split.iter().flatten(), k)),
        weak: named(mask_coverage(&per_split[0], k)),
        unlabeled: named(mask_coverage(&per_split[1], k)),
    };
    let mut w = BufWriter::new(fs::File::create(&a.out)?);
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    for c in &report.classes {
        writeln!(
            out,
            "{}\tpos {:.2}%\tneg {:.2}%\tignore {:.2}%",
            c.class, c.coverage.pos, c.coverage.neg, c.coverage.ignore
        )?;
    }
    Ok(())
}
