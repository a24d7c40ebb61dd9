//! Measurements shared by the property tests and the acceptance runner.
//! Each returns the observed quantity; callers apply the tolerance.

use std::time::Instant;

use dst_autodiff::gradcheck::grad_check;
use dst_autodiff::{Adam, Graph, GruWeights, ParamId, ParamStore, Tensor};
use dst_core::lm::BiLm;
use dst_core::model::{DstModel, Instance};
use dst_core::trainer::{batch_gradients, total_loss, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{toy_dialogue, toy_model};

fn matrix(store: &ParamStore, id: ParamId) -> Vec<Vec<f64>> {
    let t = store.get(id);
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GRU step written out entry by entry.
fn scalar_gru(store: &ParamStore, w: &GruWeights, x: &[f64], h: &[f64]) -> Vec<f64> {
    let gate = |wi, ui, bi, hh: &[f64]| -> Vec<f64> {
        let a = matvec(&matrix(store, wi), x);
        let b = matvec(&matrix(store, ui), hh);
        let c = store.get(bi).data();
        (0..h.len()).map(|i| a[i] + b[i] + c[i]).collect()
    };
    let z: Vec<f64> = gate(w.w_z, w.u_z, w.b_z, h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = gate(w.w_r, w.u_r, w.b_r, h).into_iter().map(sigmoid).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = gate(w.w_h, w.u_h, w.b_h, &rh).into_iter().map(f64::tanh).collect();
    (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Forward and backward hidden states recomputed without the graph.
fn scalar_states(store: &ParamStore, lm: &BiLm, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = lm.forward.d_h;
    let mut fwd = Vec::new();
    let mut h = vec![0.0; d];
    for x in xs {
        h = scalar_gru(store, &lm.forward, x, &h);
        fwd.push(h.clone());
    }
    let mut bwd = vec![Vec::new(); xs.len()];
    let mut h = vec![0.0; d];
    for t in (0..xs.len()).rev() {
        h = scalar_gru(store, &lm.backward, &xs[t], &h);
        bwd[t] = h.clone();
    }
    (fwd, bwd)
}

fn scalar_lm_loss(store: &ParamStore, lm: &BiLm, xs: &[Vec<f64>], ids: &[usize]) -> f64 {
    let (fwd, bwd) = scalar_states(store, lm, xs);
    let (wf, wb) = (matrix(store, lm.w_f), matrix(store, lm.w_b));
    let mut loss = 0.0;
    for t in 0..ids.len().saturating_sub(1) {
        loss -= log_softmax(&matvec(&wf, &fwd[t]))[ids[t + 1]];
    }
    for t in 1..ids.len() {
        loss -= log_softmax(&matvec(&wb, &bwd[t]))[ids[t - 1]];
    }
    loss
}

pub struct LmFixture {
    pub store: ParamStore,
    pub lm: BiLm,
    pub inputs: Vec<Vec<f64>>,
    pub ids: Vec<usize>,
}

pub fn lm_fixture(seed: u64, t: usize, vocab: usize, d_in: usize, d_h: usize) -> LmFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let lm = BiLm::register(&mut store, d_in, d_h, vocab, &mut rng).unwrap();
    let inputs = (0..t)
        .map(|_| (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let ids = (0..t).map(|_| rng.gen_range(0..vocab)).collect();
    LmFixture { store, lm, inputs, ids }
}

/// Graph loss of the fixture.
pub fn graph_lm_loss(f: &LmFixture) -> f64 {
    let mut g = Graph::with_params(&f.store);
    let xs: Vec<_> = f
        .inputs
        .iter()
        .map(|x| g.input(Tensor::vector(x.clone())).unwrap())
        .collect();
    let out = f.lm.forward(&mut g, &xs).unwrap();
    let loss = f.lm.loss(&mut g, &out, &f.ids).unwrap();
    g.value(loss).item()
}

/// |graph - scalar| for the LM loss on a seeded T=5, |V|=12 fixture.
pub fn lm_oracle_error(seed: u64) -> f64 {
    let f = lm_fixture(seed, 5, 12, 4, 3);
    (graph_lm_loss(&f) - scalar_lm_loss(&f.store, &f.lm, &f.inputs, &f.ids)).abs()
}

pub fn lm_single_token_loss() -> f64 {
    graph_lm_loss(&lm_fixture(3, 1, 12, 4, 3))
}

/// |loss - 4 ln 4| with zero projections, T=3, |V|=4.
pub fn lm_uniform_error() -> f64 {
    let mut f = lm_fixture(5, 3, 4, 4, 3);
    f.store.get_mut(f.lm.w_f).fill(0.0);
    f.store.get_mut(f.lm.w_b).fill(0.0);
    (graph_lm_loss(&f) - 4.0 * 4f64.ln()).abs()
}

/// Largest entry difference between graph and scalar next/previous-token
/// distributions, T=3, |V|=4.
pub fn lm_distribution_error(seed: u64) -> f64 {
    let f = lm_fixture(seed, 3, 4, 3, 2);
    let mut g = Graph::with_params(&f.store);
    let xs: Vec<_> = f
        .inputs
        .iter()
        .map(|x| g.input(Tensor::vector(x.clone())).unwrap())
        .collect();
    let out = f.lm.forward(&mut g, &xs).unwrap();
    let (next, prev) = f.lm.distributions(&mut g, &out).unwrap();
    let (fwd, bwd) = scalar_states(&f.store, &f.lm, &f.inputs);
    let (wf, wb) = (matrix(&f.store, f.lm.w_f), matrix(&f.store, f.lm.w_b));
    let mut worst = 0.0f64;
    for (t, node) in next.iter().enumerate() {
        let p: Vec<f64> = log_softmax(&matvec(&wf, &fwd[t])).iter().map(|l| l.exp()).collect();
        for (a, b) in g.value(*node).data().iter().zip(&p) {
            worst = worst.max((a - b).abs());
        }
    }
    for (k, node) in prev.iter().enumerate() {
        let p: Vec<f64> = log_softmax(&matvec(&wb, &bwd[k + 1])).iter().map(|l| l.exp()).collect();
        for (a, b) in g.value(*node).data().iter().zip(&p) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Finite-difference error of the LM loss with respect to the next-token
/// projection.
pub fn lm_projection_grad_error(seed: u64) -> f64 {
    let mut f = lm_fixture(seed, 5, 12, 4, 3);
    let (lm, inputs, ids) = (f.lm, f.inputs.clone(), f.ids.clone());
    grad_check(&mut f.store, &[lm.w_f], 1e-5, |g| {
        let xs = inputs
            .iter()
            .map(|x| g.input(Tensor::vector(x.clone())))
            .collect::<dst_autodiff::Result<Vec<_>>>()?;
        let out = lm.forward(g, &xs).map_err(to_autodiff)?;
        lm.loss(g, &out, &ids).map_err(to_autodiff)
    })
    .unwrap()
    .max_relative_error
}

fn to_autodiff(e: dst_core::DstError) -> dst_autodiff::AutodiffError {
    match e {
        dst_core::DstError::Autodiff(a) => a,
        other => panic!("{other}"),
    }
}

pub fn toy_instances(model: &DstModel) -> Vec<Instance> {
    model.prepare_corpus(&[toy_dialogue()]).unwrap()
}

/// Worst relative error and runtime of the finite-difference check of the
/// full training loss (both turns, LM weight 0.9) over every parameter.
pub fn composite_grad_check() -> (f64, usize, f64) {
    let start = Instant::now();
    let model = toy_model(true, 11);
    let instances = toy_instances(&model);
    let mut store = model.params.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    let report = grad_check(&mut store, &ids, 1e-5, |g| {
        let mut totals = Vec::new();
        for inst in &instances {
            let l = model.instance_loss(g, inst, None).map_err(to_autodiff)?;
            let lm = l.lm.expect("lm enabled");
            totals.push(total_loss(g, l.dst, lm, 0.9).map_err(to_autodiff)?);
        }
        let sum = g.add_all(&totals)?;
        g.scale(sum, 1.0 / totals.len() as f64)
    })
    .unwrap();
    (report.max_relative_error, report.checked, start.elapsed().as_secs_f64())
}

/// Largest |sum - 1| and smallest entry over `n` random parameterizations of
/// the copy-augmented output distribution.
pub fn simplex_extremes(n: u64) -> (f64, f64) {
    let mut worst_sum = 0.0f64;
    let mut min_entry = f64::INFINITY;
    let words = [
        "want", "cheap", "price", "ok", "north", "area", "zorbly", "quux", "[usr]", "[sys]",
    ];
    for seed in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = toy_model(rng.gen_bool(0.5), seed);
        let spread = rng.gen_range(0.5..6.0);
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            for x in model.params.get_mut(id).data_mut() {
                *x = rng.gen_range(-spread..spread);
            }
        }
        let len = rng.gen_range(1..12);
        let tokens: Vec<String> = (0..len)
            .map(|_| words[rng.gen_range(0..words.len())].to_string())
            .collect();
        let inst = model.prepare_tokens("p", 0, len, tokens, Default::default()).unwrap();
        let ext = inst.extended_size(model.vocab.len());
        let mut g = Graph::with_params(&model.params);
        let enc = model.encode_instance(&mut g, &inst).unwrap();
        let k = rng.gen_range(0..model.ontology.len());
        let mut input = model.slot_query(&mut g, k).unwrap();
        let mut h = enc.final_state;
        for _ in 0..3 {
            let step = model
                .generator_step(&mut g, &enc, &inst.copy_ids, ext, input, h)
                .unwrap();
            let p = g.value(step.final_distribution);
            assert_eq!(p.len(), ext);
            worst_sum = worst_sum.max((p.sum() - 1.0).abs());
            min_entry = p.data().iter().cloned().fold(min_entry, f64::min);
            h = step.hidden;
            input = step.context_vector;
        }
    }
    (worst_sum, min_entry)
}

pub struct DelayedUpdate {
    /// Largest entry difference between the accumulator after four
    /// micro-batches and the sum of four independent gradients.
    pub accumulation_error: f64,
    /// Parameters unchanged, bit for bit, after each non-final micro-batch.
    pub frozen_within_window: bool,
    /// Parameters after the window equal one Adam step on the summed
    /// gradient, bit for bit.
    pub update_matches: bool,
}

pub fn delayed_update() -> DelayedUpdate {
    let model = toy_model(true, 21);
    let inst = toy_instances(&model);
    let batches: Vec<Vec<&Instance>> = vec![
        vec![&inst[0]],
        vec![&inst[1]],
        vec![&inst[0], &inst[1]],
        vec![&inst[1], &inst[0]],
    ];
    let seeds: Vec<Vec<u64>> = (0..4).map(|k| vec![100 + k, 200 + k]).collect();
    let config = |delay| TrainConfig {
        delay_update_steps: delay,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };

    let mut expected = dst_autodiff::Gradients::zeros_like(&model.params);
    for (b, s) in batches.iter().zip(&seeds) {
        let (grads, _) = batch_gradients(&model, b, 0.9, Some(&s[..b.len()])).unwrap();
        expected.add_assign(&grads);
    }

    let mut wide = Trainer::new(model.clone(), config(5)).unwrap();
    for (b, s) in batches.iter().zip(&seeds) {
        wide.train_step(b, Some(&s[..b.len()])).unwrap();
    }
    let accumulation_error = wide.accumulated().max_abs_diff(&expected);

    let mut trainer = Trainer::new(model.clone(), config(4)).unwrap();
    let mut frozen_within_window = true;
    for (i, (b, s)) in batches.iter().zip(&seeds).enumerate() {
        let out = trainer.train_step(b, Some(&s[..b.len()])).unwrap();
        if i < 3 {
            frozen_within_window &= !out.updated && bits(&trainer.model.params) == bits(&model.params);
        } else {
            frozen_within_window &= out.updated;
        }
    }
    let mut reference = model.params.clone();
    Adam::new(&reference, 0.01).apply(&mut reference, &expected);
    DelayedUpdate {
        accumulation_error,
        frozen_within_window,
        update_matches: bits(&trainer.model.params) == bits(&reference),
    }
}

fn bits(store: &ParamStore) -> Vec<u64> {
    store
        .ids()
        .flat_map(|id| store.get(id).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}
