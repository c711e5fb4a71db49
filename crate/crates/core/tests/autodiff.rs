mod common;

use common::{gradcheck, rng, uniform};
use proptest::prelude::*;
use sedtriadv::autodiff::{Graph, ParamStore, Tensor, Var};
use sedtriadv::Error;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(name: &str, inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> sedtriadv::Result<Var>) {
    let err = gradcheck(inputs, EPS, build);
    assert!(err <= TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_primitives() {
    let mut r = rng(1);
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let bias = uniform(&mut r, &[4], -2.0, 2.0);
    check("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check("scale", &[a.clone()], |g, v| g.scale(v[0], -0.7));
    check("add_bias", &[a.clone(), bias], |g, v| g.add_bias(v[0], v[1]));
    check("sigmoid", &[a.clone()], |g, v| g.sigmoid(v[0]));
    check("tanh", &[a.clone()], |g, v| g.tanh(v[0]));
    check("relu", &[a], |g, v| g.relu(v[0]));
}

#[test]
fn matmul_and_reductions() {
    let mut r = rng(2);
    let a = uniform(&mut r, &[3, 5], -2.0, 2.0);
    let b = uniform(&mut r, &[5, 2], -2.0, 2.0);
    check("matmul", &[a, b], |g, v| g.matmul(v[0], v[1]));
    let x = uniform(&mut r, &[2, 4, 3], -2.0, 2.0);
    for axis in 0..3 {
        check("softmax", &[x.clone()], |g, v| g.softmax(v[0], axis));
        check("mean_axis", &[x.clone()], |g, v| g.mean_axis(v[0], axis));
        check("sum_axis", &[x.clone()], |g, v| g.sum_axis(v[0], axis));
    }
    check("sum_all", &[x], |g, v| g.sum_all(v[0]));
}

#[test]
fn convolutions_and_pooling() {
    let mut r = rng(3);
    let x = uniform(&mut r, &[2, 2, 5, 4], -2.0, 2.0);
    let w = uniform(&mut r, &[3, 2, 3, 3], -2.0, 2.0);
    let b = uniform(&mut r, &[3], -2.0, 2.0);
    check("conv2d", &[x.clone(), w, b], |g, v| g.conv2d(v[0], v[1], v[2]));
    let w13 = uniform(&mut r, &[1, 2, 1, 3], -2.0, 2.0);
    let b1 = uniform(&mut r, &[1], -2.0, 2.0);
    check("conv2d 1x3", &[x.clone(), w13, b1], |g, v| g.conv2d(v[0], v[1], v[2]));
    check("max_pool2d", &[x.clone()], |g, v| g.max_pool2d(v[0], 2, 2));
    check("max_pool2d freq only", &[x], |g, v| g.max_pool2d(v[0], 1, 4));
    let x1 = uniform(&mut r, &[2, 3, 6], -2.0, 2.0);
    let w1 = uniform(&mut r, &[2, 3, 5], -2.0, 2.0);
    let b1 = uniform(&mut r, &[2], -2.0, 2.0);
    check("conv1d", &[x1, w1, b1], |g, v| g.conv1d(v[0], v[1], v[2]));
}

#[test]
fn structural_primitives() {
    let mut r = rng(4);
    let a = uniform(&mut r, &[2, 3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[2, 1, 4], -2.0, 2.0);
    check("concat", &[a.clone(), b], |g, v| g.concat(&[v[0], v[1]], 1));
    check("slice", &[a.clone()], |g, v| g.slice(v[0], 2, 1, 2));
    check("reshape", &[a.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    check("permute", &[a], |g, v| g.permute(v[0], &[1, 2, 0]));
}

#[test]
fn gru_cell_gradient() {
    let mut r = rng(5);
    let (n, i, h) = (3, 4, 2);
    let inputs = [
        uniform(&mut r, &[n, i], -2.0, 2.0),
        uniform(&mut r, &[n, h], -1.0, 1.0),
        uniform(&mut r, &[i, 3 * h], -1.0, 1.0),
        uniform(&mut r, &[h, 3 * h], -1.0, 1.0),
        uniform(&mut r, &[3 * h], -1.0, 1.0),
        uniform(&mut r, &[3 * h], -1.0, 1.0),
    ];
    check("gru_cell", &inputs, |g, v| g.gru_cell(v[0], v[1], v[2], v[3], v[4], v[5]));
}

#[test]
fn loss_primitives() {
    let mut r = rng(6);
    let p = uniform(&mut r, &[3, 4], 0.05, 0.95);
    let y = Tensor::from_fn(&[3, 4], |i| (i % 3 == 0) as u8 as f64);
    let mask = Tensor::from_fn(&[3, 4], |i| (i % 5 != 1) as u8 as f64);
    check("bce", &[p.clone()], |g, v| g.bce(v[0], &y, None));
    check("bce masked", &[p], |g, v| g.bce(v[0], &y, Some(&mask)));
    let a = uniform(&mut r, &[6], -2.0, 2.0);
    let b = uniform(&mut r, &[2, 3], -2.0, 2.0);
    check("abs_cosine", &[a, b], |g, v| g.abs_cosine(v[0], v[1]));
}

#[test]
fn sigmoid_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(0.0));
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).data()[0], 0.5);
    let grads = g.backward(y, &mut ParamStore::new()).unwrap();
    assert_eq!(grads.get(x).unwrap().data()[0], 0.25);
}

#[test]
fn zero_weight_gru_cell_outputs_zero() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full(&[2, 3], 0.7));
    let h = g.input(Tensor::zeros(&[2, 4]));
    let wi = g.input(Tensor::zeros(&[3, 12]));
    let wh = g.input(Tensor::zeros(&[4, 12]));
    let bi = g.input(Tensor::zeros(&[12]));
    let bh = g.input(Tensor::zeros(&[12]));
    let out = g.gru_cell(x, h, wi, wh, bi, bh).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn sum_of_parameter_has_unit_gradient() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("theta", Tensor::from_fn(&[2, 3], |i| i as f64)).unwrap();
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let loss = g.sum_all(p).unwrap();
    g.backward(loss, &mut store).unwrap();
    assert!(store.grad(id).data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x, &mut ParamStore::new()), Err(Error::Shape(_))));

    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros(&[2]));
    let s = g.sum_all(x).unwrap();
    g.backward(s, &mut ParamStore::new()).unwrap();
    assert!(matches!(g.backward(s, &mut ParamStore::new()), Err(Error::GraphConsumed)));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    assert!(g.add(a, b).is_ok());
    let c = g.input(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, c), Err(Error::Shape(_))));
}

#[test]
fn finite_check_mode_catches_nan() {
    let mut g = Graph::<f32>::new().with_finite_checks(true);
    let x = g.input(Tensor::scalar(f32::MAX));
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
}

#[test]
fn grad_reverse_contract() {
    let mut r = rng(7);
    let x = uniform(&mut r, &[4, 3], -2.0, 2.0);
    let up = uniform(&mut r, &[4, 3], -2.0, 2.0);
    for alpha in [0.0, 0.3, 1.0, 2.5] {
        let mut g = Graph::<f64>::new();
        let v = g.variable(x.clone());
        let y = g.grad_reverse(v, alpha).unwrap();
        // forward is bit-identical
        assert_eq!(g.value(y).data(), x.data());
        let w = g.input(up.clone());
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum_all(prod).unwrap();
        let grads = g.backward(loss, &mut ParamStore::new()).unwrap();
        let got = grads.get(v).unwrap();
        for (gv, u) in got.data().iter().zip(up.data()) {
            assert_eq!(*gv, u * -alpha);
        }
    }
}

#[test]
fn grad_reverse_scalar_chain_cancels() {
    // y = w * grad_reverse(w, 1): the direct path contributes w, the reversed
    // path contributes -w, so dy/dw = 0.
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("w", Tensor::scalar(1.7)).unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let rev = g.grad_reverse(w, 1.0).unwrap();
    let y = g.mul(w, rev).unwrap();
    g.backward(y, &mut store).unwrap();
    assert_eq!(store.grad(id).data()[0], 0.0);
    // Finite differences of the composite see d(w²)/dw = 2w; the reversal is
    // a training-time device only.
    let f = |w: f64| w * w;
    let fd = (f(1.7 + 1e-5) - f(1.7 - 1e-5)) / 2e-5;
    assert!((fd - 3.4).abs() < 1e-8);
    // And the engine's sign flip is exactly the hand chain rule: w·1 + w·(-1).
    assert_eq!(1.7 * 1.0 + 1.7 * -1.0, store.grad(id).data()[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear_in_loss_scale(seed in 0u64..1000, a in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[3, 2], -2.0, 2.0);
        let wv = uniform(&mut r, &[2, 2], -2.0, 2.0);
        let grad_for = |scale: f64| {
            let mut store = ParamStore::<f64>::new();
            let id = store.insert("w", wv.clone()).unwrap();
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let w = g.param(&store, id);
            let h = g.matmul(xi, w).unwrap();
            let t = g.tanh(h).unwrap();
            let s = g.sum_all(t).unwrap();
            let l = g.scale(s, scale).unwrap();
            g.backward(l, &mut store).unwrap();
            store.grad(id).clone()
        };
        let base = grad_for(1.0);
        let scaled = grad_for(a);
        for (b, s) in base.data().iter().zip(scaled.data()) {
            prop_assert!((b * a - s).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn primitives_pass_gradcheck_on_random_inputs(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[2, 3], -2.0, 2.0);
        let b = uniform(&mut r, &[3, 2], -2.0, 2.0);
        let err = gradcheck(&[a.clone(), b], EPS, |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let s = g.sigmoid(m)?;
            g.softmax(s, 1)
        });
        prop_assert!(err <= TOL);
        let err = gradcheck(&[a], EPS, |g, v| {
            let t = g.tanh(v[0])?;
            g.mean_axis(t, 0)
        });
        prop_assert!(err <= TOL);
    }
}
