//! Scores a run's pseudo-labels against the generator's hidden truth.
//!
//! `cargo run --release --example mask_quality -- RUN CORPUS`
use std::fs::File;
use std::path::Path;

use sedtriadv::corpus::{frame_labels, load_hidden_truth};
use sedtriadv::trainer::{read_masks, LabelState};

fn main() -> sedtriadv::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let masks = read_masks(File::open(Path::new(&args[0]).join("masks.bin"))?)?;
    let truth = load_hidden_truth(Path::new(&args[1]))?;
    for prefix in ["W", "U"] {
        // [state][truth] frame counts
        let mut c = [[0usize; 2]; 3];
        let mut clip = [[0usize; 2]; 3];
        for (id, m) in masks.iter().filter(|(id, _)| id.starts_with(prefix)) {
            let ev = &truth[id];
            let y = frame_labels(ev, m.n_frames, m.n_classes, 10.0 / m.n_frames as f64);
            for (s, &t) in m.frame_state.iter().zip(&y) {
                c[*s as usize][t as usize] += 1;
            }
            for k in 0..m.n_classes {
                let present = ev.iter().any(|e| e.class_id == k) as usize;
                clip[m.clip_state[k] as usize][present] += 1;
            }
        }
        let line = |name: &str, c: &[[usize; 2]; 3]| {
            let pos_prec = c[LabelState::Pos as usize][1] as f64 / (c[1][0] + c[1][1]).max(1) as f64;
            let neg_prec = c[0][0] as f64 / (c[0][0] + c[0][1]).max(1) as f64;
            let recall = c[1][1] as f64 / (c[0][1] + c[1][1] + c[2][1]).max(1) as f64;
            println!("{prefix} {name}: {c:?} pos-precision {pos_prec:.3} neg-precision {neg_prec:.3} pos-recall {recall:.3}");
        };
        line("frame", &c);
        line("clip", &clip);
    }
    Ok(())
}
