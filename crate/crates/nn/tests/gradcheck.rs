//! Central finite differences against the tape's analytic gradients, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spes_nn::layers::{Linear, MlpHead};
use spes_nn::transformer::EncoderLayer;
use spes_nn::{Model64, ModelSpec, MsResNet, MsResNetSpec, ParamStore, Session, Tensor, TransformerSpec, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
// Relative error is measured against max(|analytic|, |numeric|, FLOOR) so
// that gradients that are zero up to round-off do not blow up the ratio.
const FLOOR: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Checks `indices` of the flat parameter vector; `f` builds a scalar loss.
fn check<F>(store: &ParamStore<f64>, indices: &[usize], f: F) -> f64
where
    F: Fn(&mut Session<'_, f64>) -> Var,
{
    let mut s = Session::eval(store);
    let loss = f(&mut s);
    let analytic = s.tape.backward(loss, store).unwrap().flat;

    let eval = |p: &ParamStore<f64>| {
        let mut s = Session::eval(p);
        let l = f(&mut s);
        s.tape.value(l).data()[0]
    };
    let mut worst = 0.0f64;
    let mut p = store.clone();
    for &i in indices {
        let orig = p.flat()[i];
        p.flat_mut()[i] = orig + H;
        let up = eval(&p);
        p.flat_mut()[i] = orig - H;
        let down = eval(&p);
        p.flat_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(rel);
    }
    worst
}

/// Biases start at zero, which puts ReLU inputs fed by dead channels exactly
/// on the kink; jitter every parameter so the check sees a smooth point.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for v in store.flat_mut().iter_mut() {
        *v += 0.05 * (rng.random::<f64>() - 0.5);
    }
}

/// `Σ w_i · v_i`, a readout that weights every output element differently.
fn weighted_sum(s: &mut Session<'_, f64>, v: Var, weights: &Tensor<f64>) -> Var {
    let w = s.tape.constant(weights.clone());
    let flat = s.tape.reshape(v, weights.shape()).unwrap();
    let prod = s.tape.matmul_t(flat, w).unwrap();
    s.tape.sum(prod)
}

#[test]
fn tiny_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let l1 = Linear::new(&mut store, "l1", 4, 6, &mut rng);
    let head = MlpHead::new(&mut store, "head", 6, 0.0, &mut rng);
    assert!(store.len() <= 100);
    let x = rand_tensor(&mut rng, &[1, 4]);
    let all: Vec<usize> = (0..store.len()).collect();
    let worst = check(&store, &all, |s| {
        let xi = s.tape.constant(x.clone());
        let h = l1.forward(s, xi).unwrap();
        let h = s.tape.gelu(h);
        let z = head.forward(s, h).unwrap();
        s.tape.weighted_bce(z, true, 2.5).unwrap()
    });
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn resnet_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let mut spec = MsResNetSpec::new(3, 4);
    spec.base_width = 3;
    spec.branch_kernel_sizes = vec![5];
    let net = MsResNet::new(&mut store, "r", &spec, &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 3, 37]);
    let w = rand_tensor(&mut rng, &[1, 6]);
    let idx: Vec<usize> = (0..store.len()).step_by(3).collect();
    let worst = check(&store, &idx, |s| {
        let xi = s.tape.constant(x.clone());
        let pooled = net.forward_first_branch(s, xi).unwrap();
        weighted_sum(s, pooled, &w)
    });
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn full_resnet_with_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let mut spec = MsResNetSpec::new(2, 5);
    spec.base_width = 2;
    let net = MsResNet::new(&mut store, "r", &spec, &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, &[1, 2, 64]);
    let w = rand_tensor(&mut rng, &[1, 5]);
    let all: Vec<usize> = (0..store.len()).collect();
    let worst = check(&store, &all, |s| {
        let xi = s.tape.constant(x.clone());
        let e = net.forward(s, xi).unwrap();
        weighted_sum(s, e, &w)
    });
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn attention_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let spec = TransformerSpec::new(16, 1, 0.0);
    let layer = EncoderLayer::new(&mut store, "layer", &spec, &mut rng);
    jitter(&mut store, &mut rng);
    let x = rand_tensor(&mut rng, &[5, 16]);
    let w = rand_tensor(&mut rng, &[1, 80]);
    let all: Vec<usize> = (0..store.len()).collect();
    let worst = check(&store, &all, |s| {
        let xi = s.tape.constant(x.clone());
        let y = layer.forward(s, xi).unwrap();
        weighted_sum(s, y, &w)
    });
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn full_cnn_transformer_sampled_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = ModelSpec::transformer(4, 16, 2, 0.0);
    let mut model = Model64::new(&spec, &mut rng).unwrap();
    jitter(&mut model.params, &mut rng);
    let x = rand_tensor(&mut rng, &[6, 90]);
    let n = model.params.len();
    let mut idx: Vec<usize> = (0..50).map(|_| rng.random_range(0..n)).collect();
    idx.sort_unstable();
    idx.dedup();
    let worst = check(&model.params, &idx, |s| model.loss(s, &x, true, 3.0).unwrap());
    assert!(worst < TOL, "worst relative error {worst}");
}

#[test]
fn full_cnn_sampled_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = ModelSpec::cnn(7, 4, 8, 0.0);
    let mut model = Model64::new(&spec, &mut rng).unwrap();
    jitter(&mut model.params, &mut rng);
    let x = rand_tensor(&mut rng, &[7, 120]);
    let n = model.params.len();
    let idx: Vec<usize> = (0..50).map(|_| rng.random_range(0..n)).collect();
    let worst = check(&model.params, &idx, |s| model.loss(s, &x, false, 1.0).unwrap());
    assert!(worst < TOL, "worst relative error {worst}");
}

