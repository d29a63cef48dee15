//! Finite-difference checks for every primitive on the tape.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes to the checked gradient.
fn scalarize(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    if g.value(out).len() == 1 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn eval(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.param(Arc::new(t.clone())))
        .collect();
    let out = build(&mut g, &vars);
    let s = scalarize(&mut g, out, seed);
    g.value(s).item()
}

/// Largest normwise relative error between analytic and central-difference
/// gradients over all inputs.
fn fd_error(inputs: &[Tensor<f64>], build: &Build, seed: u64, h: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.param(Arc::new(t.clone())))
        .collect();
    let out = build(&mut g, &vars);
    let s = scalarize(&mut g, out, seed);
    let grads = g.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|x| x.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            numeric[i] = (eval(&plus, build, seed) - eval(&minus, build, seed)) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n): (&f64, &f64)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .iter()
            .map(|a: &f64| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a: &f64| a * a).sum::<f64>().sqrt())
            .max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

fn property(
    name: &str,
    cases: u64,
    tol: f64,
    make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>),
) {
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, build) = make(&mut rng);
        let err = fd_error(&inputs, &*build, seed, 1e-5);
        assert!(err < tol, "{name}: seed {seed} relative error {err:e}");
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

const CASES: u64 = 100;
const TOL: f64 = 1e-4;

#[test]
fn relu_definition() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Arc::new(Tensor::vector(vec![-1.0, 2.0])));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn mse_of_identical_inputs() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Arc::new(Tensor::vector(vec![1.0, 2.0])));
    let b = g.param(Arc::new(Tensor::vector(vec![1.0, 2.0])));
    let l = g.mse(a, b).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(grads.get(b).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn matmul_2x3_by_3x1_matches_fd_to_1e6() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3]),
            rand_tensor(&mut rng, &[3, 1]),
        ];
        let build: Box<Build> = Box::new(|g, v| g.matmul(v[0], v[1]).unwrap());
        let err = fd_error(&inputs, &*build, seed, 1e-5);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
    let c = g.constant(Tensor::zeros(&[3]));
    assert!(g.add(a, c).is_err());
    assert!(g.straight_through(a, c).is_err());
}

#[test]
fn straight_through_definition() {
    let mut g = Graph::<f64>::new();
    let q = g.param(Arc::new(Tensor::vector(vec![0.5])));
    let z = g.param(Arc::new(Tensor::vector(vec![0.48])));
    let st = g.straight_through(q, z).unwrap();
    assert_eq!(g.value(st).data(), &[0.5]);
    let two = g.constant(Tensor::vector(vec![2.0]));
    let y = g.mul(st, two).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(z).unwrap().data(), &[2.0]);
    assert!(grads.get(q).is_none_or(|t| t.data() == [0.0]));
}

#[test]
fn backward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[4, 6]);
        let w = rand_tensor(&mut rng, &[6, 6]);
        let mut g = Graph::new();
        let av = g.param(Arc::new(a));
        let wv = g.param(Arc::new(w));
        let h = g.matmul(av, wv).unwrap();
        let h = g.relu(h);
        let att_in = g.concat(&[h, h, h], 1).unwrap();
        let o = g.causal_attention(att_in, 2, 2, 2).unwrap();
        let s = g.sum(o);
        let grads = g.backward(s).unwrap();
        grads.get(wv).unwrap().data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn fd_matmul() {
    property("matmul", CASES, TOL, |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..5);
        (
            vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])],
            Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
        )
    });
}

#[test]
fn fd_add_mul_scale() {
    property("add/mul/scale", CASES, TOL, |rng| {
        let (r, c) = dims(rng);
        let a = rand_tensor(rng, &[r, c]);
        let b = rand_tensor(rng, &[r, c]);
        (
            vec![a, b],
            Box::new(|g, v| {
                let s = g.add(v[0], v[1]).unwrap();
                let p = g.mul(s, v[1]).unwrap();
                let d = g.sub(p, v[0]).unwrap();
                g.scale(d, -1.7)
            }),
        )
    });
}

#[test]
fn fd_add_row() {
    property("add_row", CASES, TOL, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[c])],
            Box::new(|g, v| g.add_row(v[0], v[1]).unwrap()),
        )
    });
}

#[test]
fn fd_relu() {
    property("relu", CASES, TOL, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c])],
            Box::new(|g, v| g.relu(v[0])),
        )
    });
}

#[test]
fn fd_softmax() {
    property("softmax", CASES, TOL, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c + 1])],
            Box::new(|g, v| g.softmax(v[0])),
        )
    });
}

#[test]
fn fd_layer_norm() {
    property("layer_norm", CASES, TOL, |rng| {
        let r = rng.random_range(1..4);
        let c = rng.random_range(2..7);
        (
            vec![
                rand_tensor(rng, &[r, c]),
                rand_tensor(rng, &[c]),
                rand_tensor(rng, &[c]),
            ],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()),
        )
    });
}

#[test]
fn fd_embedding() {
    property("embedding", CASES, TOL, |rng| {
        let (vocab, w) = (rng.random_range(1..6), rng.random_range(1..5));
        let ids: Vec<usize> = (0..rng.random_range(1..7))
            .map(|_| rng.random_range(0..vocab))
            .collect();
        (
            vec![rand_tensor(rng, &[vocab, w])],
            Box::new(move |g, v| g.embedding(v[0], &ids).unwrap()),
        )
    });
}

#[test]
fn fd_cross_entropy() {
    property("cross_entropy", CASES, TOL, |rng| {
        let (r, c) = (rng.random_range(1..5), rng.random_range(2..7));
        let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        let weights: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let masked = rng.random_bool(0.5);
        let mask: Vec<bool> = (0..r * c)
            .map(|i| !masked || i % c == targets[i / c] || rng.random_bool(0.5))
            .collect();
        (
            vec![rand_tensor(rng, &[r, c])],
            Box::new(move |g, v| {
                let m = if masked { Some(mask.as_slice()) } else { None };
                g.cross_entropy(v[0], &targets, &weights, m).unwrap()
            }),
        )
    });
}

#[test]
fn fd_entropy() {
    property("entropy", CASES, TOL, |rng| {
        let (r, c) = (rng.random_range(1..5), rng.random_range(2..7));
        let weights: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask: Vec<bool> = (0..r * c)
            .map(|i| i % c == 0 || rng.random_bool(0.6))
            .collect();
        (
            vec![rand_tensor(rng, &[r, c])],
            Box::new(move |g, v| g.entropy(v[0], &weights, Some(&mask)).unwrap()),
        )
    });
}

#[test]
fn fd_mse() {
    property("mse", CASES, TOL, |rng| {
        let (r, c) = dims(rng);
        (
            vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[r, c])],
            Box::new(|g, v| g.mse(v[0], v[1]).unwrap()),
        )
    });
}

#[test]
fn fd_gather_concat_reshape() {
    property("gather/concat/reshape", CASES, TOL, |rng| {
        let (r, c) = dims(rng);
        let c2 = rng.random_range(1..4);
        let rows: Vec<usize> = (0..rng.random_range(1..8))
            .map(|_| rng.random_range(0..r))
            .collect();
        (
            vec![
                rand_tensor(rng, &[r, c]),
                rand_tensor(rng, &[r, c2]),
                rand_tensor(rng, &[2, c]),
            ],
            Box::new(move |g, v| {
                let wide = g.concat(&[v[0], v[1]], 1).unwrap();
                let picked = g.gather(wide, &rows).unwrap();
                let tall = g.concat(&[v[0], v[2]], 0).unwrap();
                let flat = g.reshape(tall, &[(r + 2) * c]).unwrap();
                let fs = g.sum(flat);
                let ps = g.sum(picked);
                let sq = g.mul(picked, picked).unwrap();
                let qs = g.sum(sq);
                let t = g.add(fs, ps).unwrap();
                g.add(t, qs).unwrap()
            }),
        )
    });
}

#[test]
fn fd_causal_attention() {
    property("attention", CASES, TOL, |rng| {
        let batch = rng.random_range(1..3);
        let seq = rng.random_range(1..5);
        let heads = rng.random_range(1..3);
        let dh = rng.random_range(1..4);
        let width = heads * dh;
        (
            vec![rand_tensor(rng, &[batch * seq, 3 * width])],
            Box::new(move |g, v| g.causal_attention(v[0], batch, seq, heads).unwrap()),
        )
    });
}

#[test]
fn attention_is_causal() {
    // Changing a later position must not change earlier outputs.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[4, 6]);
    let mut y = x.clone();
    for v in &mut y.data_mut()[18..] {
        *v += 1.0;
    }
    let run = |t: Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(t);
        let o = g.causal_attention(v, 1, 4, 1).unwrap();
        g.value(o).data()[..6].to_vec()
    };
    assert_eq!(run(x), run(y));
}

#[test]
fn cross_entropy_with_uniform_logits_is_ln_v() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(&[3, 8]));
    let ce = g
        .cross_entropy(l, &[0, 4, 7], &[1.0 / 3.0; 3], None)
        .unwrap();
    assert!((g.value(ce).item() - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn f32_graph_runs() {
    let mut g = Graph::<f32>::new();
    let a = g.param(Arc::new(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()));
    let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).item(), 11.0);
    let grads = g.backward(c).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
}
