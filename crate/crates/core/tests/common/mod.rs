//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

pub mod micro;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sedtriadv::autodiff::{Graph, ParamStore, Tensor, Var};
use sedtriadv::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Worst elementwise relative error between analytic and central-difference
/// gradients of `build(inputs)` reduced to a scalar with fixed random
/// weights. Error per entry is |a - n| / max(|a|, |n|, floor).
pub fn gradcheck<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    // Fixed projection so non-scalar outputs exercise every output entry.
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        let shape = g.shape(out).to_vec();
        let mut r = rng(0xFEED);
        uniform(&mut r, &shape, 0.5, 1.5)
    };
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let w = g.input(probe.clone());
    let prod = g.mul(out, w).expect("probe shape");
    let loss = g.sum_all(prod).unwrap();
    let mut store = ParamStore::new();
    let grads = g.backward(loss, &mut store).expect("backward");

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// O(N²) DFT power spectrum of a real frame, bins 0..=N/2.
pub fn naive_dft_power(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &x) in frame.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * t % n) as f64 / n as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Periodic Hann window, the one used by the front-end.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Maximum number of disjoint (hypothesis, reference) pairs among the
/// admissible ones, by exhaustive search.
pub fn brute_force_max_matching(n_hyp: usize, n_ref: usize, ok: &dyn Fn(usize, usize) -> bool) -> usize {
    fn go(h: usize, n_hyp: usize, n_ref: usize, used: &mut Vec<bool>, ok: &dyn Fn(usize, usize) -> bool) -> usize {
        if h == n_hyp {
            return 0;
        }
        let mut best = go(h + 1, n_hyp, n_ref, used, ok);
        for r in 0..n_ref {
            if !used[r] && ok(h, r) {
                used[r] = true;
                best = best.max(1 + go(h + 1, n_hyp, n_ref, used, ok));
                used[r] = false;
            }
        }
        best
    }
    go(0, n_hyp, n_ref, &mut vec![false; n_ref], ok)
}
