//! Finite-difference checks for every primitive and for the GRU cell,
//! over many random shapes and seeds.

use dst_autodiff::gradcheck::grad_check;
use dst_autodiff::{gru_cell, Graph, GruWeights, NodeId, ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 120;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Registers one parameter per shape, projects the op output onto a fixed
/// random direction so every output entry matters, and returns the worst
/// relative error.
fn check_op<F>(seed: u64, shapes: &[Vec<usize>], op: F) -> f64
where
    F: Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("x{i}"), random_tensor(&mut rng, s)).unwrap())
        .collect();
    let probe_seed = rng.gen::<u64>();
    let report = grad_check(&mut store, &ids, EPS, |g| {
        let inputs = ids.iter().map(|&id| g.param(id)).collect::<Result<Vec<_>>>()?;
        let out = op(g, &inputs)?;
        let shape = g.shape(out).to_vec();
        let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
        let weights = random_tensor(&mut prng, &shape);
        let weighted = g.mul_const(out, weights)?;
        g.sum(weighted)
    })
    .unwrap();
    report.max_relative_error
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

fn sweep(name: &str, tol: f64, case: impl Fn(&mut ChaCha8Rng, u64) -> f64) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 11);
        worst = worst.max(case(&mut rng, seed));
    }
    assert!(worst < tol, "{name}: max relative error {worst:e}");
}

#[test]
fn elementwise_binary_ops() {
    sweep("add", TOL, |rng, seed| {
        let s = vec![dims(rng), dims(rng)];
        check_op(seed, &[s.clone(), s], |g, x| g.add(x[0], x[1]))
    });
    sweep("sub", TOL, |rng, seed| {
        let s = vec![dims(rng)];
        check_op(seed, &[s.clone(), s], |g, x| g.sub(x[0], x[1]))
    });
    sweep("elementwise_mul", TOL, |rng, seed| {
        let s = vec![dims(rng), dims(rng)];
        check_op(seed, &[s.clone(), s], |g, x| g.elementwise_mul(x[0], x[1]))
    });
    sweep("scalar_mul", TOL, |rng, seed| {
        let s = vec![dims(rng)];
        check_op(seed, &[vec![1], s], |g, x| g.scalar_mul(x[0], x[1]))
    });
}

#[test]
fn unary_ops() {
    sweep("sigmoid", TOL, |rng, seed| {
        check_op(seed, &[vec![dims(rng), dims(rng)]], |g, x| g.sigmoid(x[0]))
    });
    sweep("tanh", TOL, |rng, seed| {
        check_op(seed, &[vec![dims(rng)]], |g, x| g.tanh(x[0]))
    });
    sweep("scale", TOL, |rng, seed| {
        check_op(seed, &[vec![dims(rng)]], |g, x| g.scale(x[0], -1.7))
    });
    sweep("one_minus", TOL, |rng, seed| {
        check_op(seed, &[vec![dims(rng)]], |g, x| g.one_minus(x[0]))
    });
    sweep("sum", TOL, |rng, seed| {
        check_op(seed, &[vec![dims(rng), dims(rng)]], |g, x| g.sum(x[0]))
    });
    sweep("mul_const", TOL, |rng, seed| {
        let n = dims(rng);
        let mask = Tensor::vector((0..n).map(|i| if i % 2 == 0 { 1.25 } else { 0.0 }).collect());
        check_op(seed, &[vec![n]], move |g, x| g.mul_const(x[0], mask.clone()))
    });
}

#[test]
fn matmul_variants_are_exact() {
    // Bilinear maps: central differences are exact up to rounding.
    sweep("matmul mm", 1e-6, |rng, seed| {
        let (m, k, n) = (dims(rng), dims(rng), dims(rng));
        check_op(seed, &[vec![m, k], vec![k, n]], |g, x| g.matmul(x[0], x[1]))
    });
    sweep("matmul mv", 1e-6, |rng, seed| {
        let (m, k) = (dims(rng), dims(rng));
        check_op(seed, &[vec![m, k], vec![k]], |g, x| g.matmul(x[0], x[1]))
    });
    sweep("matmul vm", 1e-6, |rng, seed| {
        let (k, n) = (dims(rng), dims(rng));
        check_op(seed, &[vec![k], vec![k, n]], |g, x| g.matmul(x[0], x[1]))
    });
    sweep("matmul dot", 1e-6, |rng, seed| {
        let k = dims(rng);
        check_op(seed, &[vec![k], vec![k]], |g, x| g.matmul(x[0], x[1]))
    });
}

#[test]
fn structural_ops() {
    sweep("concat vectors", TOL, |rng, seed| {
        check_op(seed, &[vec![dims(rng)], vec![dims(rng)], vec![dims(rng)]], |g, x| {
            g.concat(x, 0)
        })
    });
    sweep("concat rows", TOL, |rng, seed| {
        let c = dims(rng);
        check_op(seed, &[vec![dims(rng), c], vec![dims(rng), c]], |g, x| g.concat(x, 0))
    });
    sweep("concat columns", TOL, |rng, seed| {
        let r = dims(rng);
        check_op(seed, &[vec![r, dims(rng)], vec![r, dims(rng)]], |g, x| g.concat(x, 1))
    });
    sweep("stack", TOL, |rng, seed| {
        let d = dims(rng);
        check_op(seed, &[vec![d], vec![d], vec![d]], |g, x| g.stack(x))
    });
    sweep("row", TOL, |rng, seed| {
        let r = dims(rng);
        let pick = rng.gen_range(0..r);
        check_op(seed, &[vec![r, dims(rng)]], move |g, x| g.row(x[0], pick))
    });
}

#[test]
fn softmax_and_losses() {
    sweep("softmax vector", TOL, |rng, seed| {
        check_op(seed, &[vec![dims(rng)]], |g, x| g.softmax(x[0], 0))
    });
    sweep("softmax rows", TOL, |rng, seed| {
        check_op(seed, &[vec![dims(rng), dims(rng)]], |g, x| g.softmax(x[0], 1))
    });
    sweep("softmax columns", TOL, |rng, seed| {
        check_op(seed, &[vec![dims(rng), dims(rng)]], |g, x| g.softmax(x[0], 0))
    });
    sweep("cross_entropy", TOL, |rng, seed| {
        let n = dims(rng);
        let t = rng.gen_range(0..n);
        check_op(seed, &[vec![n]], move |g, x| g.cross_entropy(x[0], t))
    });
    sweep("neg_log", TOL, |rng, seed| {
        let n = dims(rng);
        let t = rng.gen_range(0..n);
        check_op(seed, &[vec![n]], move |g, x| {
            let p = g.softmax(x[0], 0)?;
            g.neg_log(p, t)
        })
    });
}

#[test]
fn gather_and_scatter_ops() {
    sweep("embedding_lookup", TOL, |rng, seed| {
        let (v, d) = (dims(rng) + 1, dims(rng));
        let idx: Vec<usize> = (0..dims(rng) + 2).map(|_| rng.gen_range(0..v)).collect();
        check_op(seed, &[vec![v, d]], move |g, x| g.embedding_lookup(x[0], &idx))
    });
    sweep("embedding_bag_mean", TOL, |rng, seed| {
        let (v, d) = (dims(rng) + 1, dims(rng));
        let bags: Vec<Vec<usize>> = (0..dims(rng))
            .map(|_| (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..v)).collect())
            .collect();
        check_op(seed, &[vec![v, d]], move |g, x| g.embedding_bag_mean(x[0], &bags))
    });
    sweep("scatter_add", TOL, |rng, seed| {
        let (t, size) = (dims(rng), dims(rng) + 1);
        let idx: Vec<usize> = (0..t).map(|_| rng.gen_range(0..size)).collect();
        check_op(seed, &[vec![t]], move |g, x| g.scatter_add(x[0], &idx, size))
    });
}

#[test]
fn gru_cell_gradients() {
    sweep("gru_cell", TOL, |rng, seed| {
        let (d_in, d_h) = (dims(rng), dims(rng));
        let mut store = ParamStore::new();
        let w = GruWeights::register(&mut store, "gru", d_in, d_h, rng).unwrap();
        let x = store.add("x", random_tensor(rng, &[d_in])).unwrap();
        let h = store.add("h", random_tensor(rng, &[d_h])).unwrap();
        let ids: Vec<_> = store.ids().collect();
        let probe = random_tensor(rng, &[d_h]);
        let _ = seed;
        grad_check(&mut store, &ids, EPS, |g| {
            let (xn, hn) = (g.param(x)?, g.param(h)?);
            let h1 = gru_cell(g, xn, hn, &w)?;
            let h2 = gru_cell(g, xn, h1, &w)?;
            let weighted = g.mul_const(h2, probe.clone())?;
            g.sum(weighted)
        })
        .unwrap()
        .max_relative_error
    });
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    (0..w.shape()[0])
        .map(|i| (0..cols).map(|j| w.data()[i * cols + j] * x[j]).sum())
        .collect()
}

#[test]
fn gru_cell_matches_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (d_in, d_h) = (5, 4);
    let mut store = ParamStore::new();
    let w = GruWeights::register(&mut store, "gru", d_in, d_h, &mut rng).unwrap();
    let x: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let h: Vec<f64> = (0..d_h).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::with_params(&store);
    let xn = g.constant(Tensor::vector(x.clone())).unwrap();
    let hn = g.constant(Tensor::vector(h.clone())).unwrap();
    let out = gru_cell(&mut g, xn, hn, &w).unwrap();

    let p = |id| store.get(id);
    let (wz, uz) = (matvec(p(w.w_z), &x), matvec(p(w.u_z), &h));
    let (wr, ur) = (matvec(p(w.w_r), &x), matvec(p(w.u_r), &h));
    let mut expected = Vec::new();
    let r: Vec<f64> = (0..d_h).map(|i| sigmoid(wr[i] + ur[i] + p(w.b_r).data()[i])).collect();
    let rh: Vec<f64> = (0..d_h).map(|i| r[i] * h[i]).collect();
    let (wh, uh) = (matvec(p(w.w_h), &x), matvec(p(w.u_h), &rh));
    for i in 0..d_h {
        let z = sigmoid(wz[i] + uz[i] + p(w.b_z).data()[i]);
        let cand = (wh[i] + uh[i] + p(w.b_h).data()[i]).tanh();
        expected.push((1.0 - z) * h[i] + z * cand);
    }
    for (a, b) in g.value(out).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn forward_passes_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let w = GruWeights::register(&mut store, "gru", 6, 6, &mut rng).unwrap();
    let inputs: Vec<Tensor> = (0..10).map(|_| random_tensor(&mut rng, &[6])).collect();
    let run = || {
        let mut g = Graph::with_params(&store);
        let mut h = g.constant(Tensor::zeros(&[6])).unwrap();
        for x in &inputs {
            let xn = g.constant(x.clone()).unwrap();
            h = gru_cell(&mut g, xn, h, &w).unwrap();
        }
        let s = g.softmax(h, 0).unwrap();
        g.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
