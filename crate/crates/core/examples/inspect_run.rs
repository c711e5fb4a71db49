//! Prints per-class counts and a few decoded clips of a trained run.
//!
//! `cargo run --release --example inspect_run -- RUN CORPUS [N_CLIPS]`
//!
//! `CKPT` picks the checkpoint (default `final.ckpt`); `HEAD=f1|f2` scores a
//! labeler instead of the target classifier.
use std::path::Path;

use sedtriadv::corpus::{clip_features, load_manifest, Split};
use sedtriadv::evaluator::{decode, score, ClipEvents};
use sedtriadv::model::Head;
use sedtriadv::trainer::{LoadedRun, FINAL_CKPT};

fn main() -> sedtriadv::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = std::env::var("CKPT").unwrap_or_else(|_| FINAL_CKPT.to_string());
    let head = match std::env::var("HEAD").as_deref() {
        Ok("f1") => Head::F1,
        Ok("f2") => Head::F2,
        _ => Head::Ft,
    };
    let run = LoadedRun::load(Path::new(&args[0]), &ckpt)?;
    let manifest = load_manifest(Path::new(&args[1]))?;
    let n: usize = args.get(2).map_or(3, |s| s.parse().unwrap());
    let clips = manifest.split(Split::Validation);
    let specs = clips
        .iter()
        .map(|c| clip_features(&manifest, c, &run.record.frontend))
        .collect::<sedtriadv::Result<Vec<_>>>()?;
    let preds = run.predict_heads(&specs, &[head])?.remove(0);
    let scored: Vec<ClipEvents> = clips
        .iter()
        .zip(&preds)
        .map(|(c, p)| ClipEvents {
            id: c.id.clone(),
            reference: c.events.clone(),
            hypothesis: decode(p, &run.record.decode),
        })
        .collect();
    let rep = score(&scored, &run.record.class_names, &run.record.matching);
    println!("{}", rep.table());
    for c in &rep.per_class {
        println!("{:>16} event {:?} segment {:?}", c.class, c.event, c.segment);
    }
    for c in scored.iter().take(n) {
        println!("{}", c.id);
        for e in &c.reference {
            println!("  ref {} {:6.2} {:6.2}", e.class_id, e.onset_s, e.offset_s);
        }
        for e in &c.hypothesis {
            println!("  hyp {} {:6.2} {:6.2}", e.class_id, e.onset_s, e.offset_s);
        }
    }
    Ok(())
}
