//! Trains and scores ablation modes on a toy corpus.
//!
//! `cargo run --release --example ablation -- DIR SEED ITERS MODE...`
//!
//! `OVERLAY` may hold a JSON config overlay applied to the desk preset.
use std::path::Path;
use std::time::Instant;

use sedtriadv::config::RunConfig;
use sedtriadv::corpus::{generate_toy_corpus, load_manifest, GenerateConfig, Split};
use sedtriadv::evaluator::evaluate_run;
use sedtriadv::trainer::{run, LoadedRun, TrainMode, TrainingSet, FINAL_CKPT};

fn main() -> sedtriadv::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = Path::new(&args[0]);
    let seed: u64 = args[1].parse().unwrap();
    // "I" for both phases or "I1,I2".
    let (i1, i2) = match args[2].split_once(',') {
        Some((a, b)) => (a.parse::<usize>().unwrap(), b.parse::<usize>().unwrap()),
        None => (args[2].parse().unwrap(), args[2].parse().unwrap()),
    };
    let corpus = dir.join("corpus");
    if !corpus.join("manifest.jsonl").exists() {
        generate_toy_corpus(&corpus, &GenerateConfig::default())?;
    }
    let manifest = load_manifest(&corpus)?;
    let mut base = RunConfig::desk();
    if let Ok(o) = std::env::var("OVERLAY") {
        base = base.merged(&serde_json::from_str(&o).unwrap())?;
    }
    let tag = std::env::var("TAG").unwrap_or_default();
    let t0 = Instant::now();
    let data = TrainingSet::from_corpus(&manifest, &base.frontend, &base.model)?;
    eprintln!("features {:.1}s", t0.elapsed().as_secs_f64());
    for m in &args[3..] {
        let mode: TrainMode = m.parse()?;
        let mut cfg = base.clone();
        cfg.train = cfg.train.with_mode(mode);
        cfg.train.seed = seed;
        cfg.train.iters_phase1 = i1;
        cfg.train.iters_phase2 = i2;
        let out = dir.join(format!("{m}{tag}_{seed}"));
        let t = Instant::now();
        let summary = run(&cfg, &data, &out)?;
        let loaded = LoadedRun::load(&out, FINAL_CKPT)?;
        let (rep, _) = evaluate_run(&loaded, &manifest, Split::Validation)?;
        println!(
            "{m:>14} seed {seed}: event {:6.2}  segment {:6.2}  ({:.0}s, last {:?}, cov {:?})",
            100.0 * rep.macro_event_f1,
            100.0 * rep.macro_segment_f1,
            t.elapsed().as_secs_f64(),
            summary.last,
            summary.mask_coverage
        );
    }
    Ok(())
}
