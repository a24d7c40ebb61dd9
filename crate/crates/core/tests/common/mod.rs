#![allow(dead_code)]

use std::path::PathBuf;

use dst_autodiff::gradcheck::grad_check;
use dst_autodiff::{gru_cell, Graph, GruWeights, NodeId, ParamStore, Tensor};
use dst_core::context::{LengthBucket, Vocabulary};
use dst_core::corpus::{BeliefState, Dialogue, DialogueTurn, Ontology, SlotKey};
use dst_core::eval::TurnPrediction;
use dst_core::model::{DstModel, ModelConfig};
use dst_core::synthetic::{generate_synthetic, split_corpus, SyntheticConfig};
use dst_core::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn key(s: &str) -> SlotKey {
    SlotKey::parse(s).unwrap()
}

pub fn state(pairs: &[(&str, &str)]) -> BeliefState {
    let mut s = BeliefState::new();
    for (k, v) in pairs {
        s.set(key(k), v);
    }
    s
}

pub fn turn(index: usize, system: &str, user: &str, gold: BeliefState) -> DialogueTurn {
    DialogueTurn {
        turn_index: index,
        system_utterance: system.into(),
        user_utterance: user.into(),
        gold_state: gold,
    }
}

/// Two turns over six distinct words, so with the reserved block the
/// vocabulary has 12 entries.
pub fn toy_dialogue() -> Dialogue {
    Dialogue {
        id: "toy".into(),
        domains: ["hotel".to_string()].into(),
        turns: vec![
            turn(0, "", "want cheap price", state(&[("hotel-price", "cheap")])),
            turn(
                1,
                "ok cheap price",
                "north area",
                state(&[("hotel-price", "cheap"), ("hotel-area", "north")]),
            ),
        ],
    }
}

pub fn toy_ontology() -> Ontology {
    Ontology::new(vec![key("hotel-area"), key("hotel-price"), key("hotel-stars")]).unwrap()
}

/// Model with vocabulary 12 and hidden size 8.
pub fn toy_model(lm: bool, seed: u64) -> DstModel {
    let vocab = Vocabulary::from_tokens(["want", "cheap", "price", "ok", "north", "area"]);
    assert_eq!(vocab.len(), 12);
    let config = ModelConfig {
        word_dim: 6,
        char_dim: 2,
        hidden_dim: 8,
        lm_enabled: lm,
        tagging_enabled: true,
        max_decode_len: 4,
        dropout: 0.2,
        word_dropout: 0.1,
    };
    DstModel::new(config, vocab, toy_ontology(), seed).unwrap()
}

/// Settings of the end-to-end synthetic runs: the default alpha, delay and
/// batch size with desk-sized dimensions.
pub fn synthetic_train_config() -> TrainConfig {
    TrainConfig {
        hidden_dim: 64,
        embedding_dim: 64,
        char_dim: 16,
        learning_rate: 0.01,
        word_dropout: 0.2,
        max_epochs: 30,
        ..TrainConfig::default()
    }
}

pub struct SyntheticSplits {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub ontology: Ontology,
}

pub fn synthetic_splits(cfg: &SyntheticConfig) -> SyntheticSplits {
    let (dialogues, ontology) = generate_synthetic(cfg).unwrap();
    let (train, dev, test) = split_corpus(dialogues, 0.8, 0.1);
    SyntheticSplits {
        train,
        dev,
        test,
        ontology,
    }
}

/// Letters the synthetic generator never uses, so words built from them are
/// never in a synthetic vocabulary.
const FOREIGN: &[char] = &['c', 'h', 'j', 'q', 'w', 'x', 'y'];

/// Single-turn dialogues requesting a value word absent from `vocab`, with
/// the slot and expected value.
pub fn oov_constructions(
    ontology: &Ontology,
    vocab: &Vocabulary,
    n: usize,
    seed: u64,
) -> Vec<(Dialogue, SlotKey, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let slot = ontology.slots()[rng.gen_range(0..ontology.len())].clone();
        let word: String = (0..4)
            .map(|i| {
                if i % 2 == 1 {
                    ['a', 'e', 'i', 'o', 'u'][rng.gen_range(0..5)]
                } else {
                    FOREIGN[rng.gen_range(0..FOREIGN.len())]
                }
            })
            .collect();
        if vocab.get(&word).is_some() {
            continue;
        }
        let request = if out.len() % 2 == 0 {
            format!("i want {word} {}", slot.slot)
        } else {
            format!("{word} {} please", slot.slot)
        };
        let user = format!("i need a {} . {request}", slot.domain);
        let mut gold = BeliefState::new();
        gold.set(slot.clone(), &word);
        let dialogue = Dialogue {
            id: format!("oov{}", out.len()),
            domains: [slot.domain.clone()].into(),
            turns: vec![turn(0, "", &user, gold)],
        };
        out.push((dialogue, slot, word));
    }
    out
}

pub fn random_state(rng: &mut ChaCha8Rng, ontology: &Ontology, values: &[&str]) -> BeliefState {
    let mut s = BeliefState::new();
    for slot in ontology.slots() {
        if rng.gen_bool(0.4) {
            s.set(slot.clone(), values[rng.gen_range(0..values.len())]);
        }
    }
    s
}

/// Random predictions where the predicted state is a perturbation of gold,
/// so every error class occurs.
pub fn random_predictions(rng: &mut ChaCha8Rng, ontology: &Ontology, n: usize) -> Vec<TurnPrediction> {
    const VALUES: &[&str] = &["east", "west", "cheap", "4", "yes"];
    (0..n)
        .map(|i| {
            let gold = random_state(rng, ontology, VALUES);
            let predicted = match rng.gen_range(0..4) {
                0 => gold.clone(),
                1 => random_state(rng, ontology, VALUES),
                _ => {
                    let mut p = gold.clone();
                    for slot in ontology.slots() {
                        match rng.gen_range(0..6) {
                            0 => {
                                p.remove(slot);
                            }
                            1 => p.set(slot.clone(), VALUES[rng.gen_range(0..VALUES.len())]),
                            _ => {}
                        }
                    }
                    p
                }
            };
            TurnPrediction {
                dialogue_id: format!("d{}", i / 5),
                turn_index: i % 5,
                context_length: rng.gen_range(0..450),
                predicted,
                gold,
            }
        })
        .collect()
}

/// A dump with the given per-bucket totals and correct counts whose wrong
/// turns are, in order, `over` over-, `partial` partial- and the rest
/// false predictions.
pub fn bucket_fixture(totals: [usize; 4], correct: [usize; 4], over: usize, partial: usize) -> Vec<TurnPrediction> {
    let gold = state(&[("hotel-area", "east"), ("hotel-stars", "4")]);
    let over_state = state(&[("hotel-area", "east"), ("hotel-stars", "4"), ("hotel-parking", "yes")]);
    let partial_state = state(&[("hotel-area", "east")]);
    let false_state = state(&[("hotel-area", "west"), ("hotel-stars", "4")]);
    let mut out = Vec::new();
    let mut wrong = 0;
    for (b, bucket) in LengthBucket::ALL.iter().enumerate() {
        for i in 0..totals[b] {
            let predicted = if i < correct[b] {
                gold.clone()
            } else {
                wrong += 1;
                if wrong <= over {
                    over_state.clone()
                } else if wrong <= over + partial {
                    partial_state.clone()
                } else {
                    false_state.clone()
                }
            };
            out.push(TurnPrediction {
                dialogue_id: format!("b{b}-{}", i / 10),
                turn_index: i % 10,
                context_length: bucket.lower_bound() + i % 100,
                predicted,
                gold: gold.clone(),
            });
        }
    }
    out
}

pub const TABLE_TOTALS: [usize; 4] = [2940, 2466, 1494, 468];

/// Baseline row of the length and error-type tables.
pub fn baseline_fixture() -> Vec<TurnPrediction> {
    bucket_fixture(TABLE_TOTALS, [2115, 1028, 356, 57], 791, 1480)
}

/// Proposed-model row of the same tables.
pub fn proposed_fixture() -> Vec<TurnPrediction> {
    bucket_fixture(TABLE_TOTALS, [2190, 1129, 445, 70], 877, 1201)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

type OpFn = Box<dyn Fn(&mut Graph<'_>, &[NodeId]) -> dst_autodiff::Result<NodeId>>;

/// One finite-difference case per primitive: name, parameter shapes, op.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![3, 2], vec![3, 2]], Box::new(|g, x| g.add(x[0], x[1]))),
        ("sub", vec![vec![4], vec![4]], Box::new(|g, x| g.sub(x[0], x[1]))),
        (
            "elementwise_mul",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|g, x| g.elementwise_mul(x[0], x[1])),
        ),
        (
            "add_all",
            vec![vec![3], vec![3], vec![3]],
            Box::new(|g, x| g.add_all(x)),
        ),
        (
            "mul_const",
            vec![vec![4]],
            Box::new(|g, x| g.mul_const(x[0], Tensor::vector(vec![1.25, 0.0, 1.25, 0.0]))),
        ),
        ("scale", vec![vec![3]], Box::new(|g, x| g.scale(x[0], -1.7))),
        ("one_minus", vec![vec![3]], Box::new(|g, x| g.one_minus(x[0]))),
        (
            "scalar_mul",
            vec![vec![1], vec![4]],
            Box::new(|g, x| g.scalar_mul(x[0], x[1])),
        ),
        (
            "matmul mm",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|g, x| g.matmul(x[0], x[1])),
        ),
        (
            "matmul mv",
            vec![vec![3, 4], vec![4]],
            Box::new(|g, x| g.matmul(x[0], x[1])),
        ),
        (
            "matmul vm",
            vec![vec![4], vec![4, 3]],
            Box::new(|g, x| g.matmul(x[0], x[1])),
        ),
        (
            "matmul dot",
            vec![vec![5], vec![5]],
            Box::new(|g, x| g.matmul(x[0], x[1])),
        ),
        ("concat", vec![vec![2, 3], vec![2, 2]], Box::new(|g, x| g.concat(x, 1))),
        ("stack", vec![vec![3], vec![3]], Box::new(|g, x| g.stack(x))),
        ("row", vec![vec![3, 4]], Box::new(|g, x| g.row(x[0], 1))),
        ("sigmoid", vec![vec![4]], Box::new(|g, x| g.sigmoid(x[0]))),
        ("tanh", vec![vec![4]], Box::new(|g, x| g.tanh(x[0]))),
        ("softmax", vec![vec![3, 4]], Box::new(|g, x| g.softmax(x[0], 1))),
        (
            "embedding_lookup",
            vec![vec![5, 3]],
            Box::new(|g, x| g.embedding_lookup(x[0], &[4, 0, 4, 2])),
        ),
        (
            "embedding_bag_mean",
            vec![vec![5, 3]],
            Box::new(|g, x| g.embedding_bag_mean(x[0], &[vec![0, 1, 1], vec![], vec![4]])),
        ),
        (
            "scatter_add",
            vec![vec![4]],
            Box::new(|g, x| g.scatter_add(x[0], &[2, 0, 2, 5], 6)),
        ),
        ("sum", vec![vec![2, 3]], Box::new(|g, x| g.sum(x[0]))),
        (
            "cross_entropy",
            vec![vec![5]],
            Box::new(|g, x| g.cross_entropy(x[0], 3)),
        ),
        (
            "neg_log",
            vec![vec![5]],
            Box::new(|g, x| {
                let p = g.softmax(x[0], 0)?;
                g.neg_log(p, 1)
            }),
        ),
    ]
}

/// Worst relative error of `op` over random inputs, projected onto a fixed
/// random direction.
pub fn primitive_error(seed: u64, shapes: &[Vec<usize>], op: &OpFn) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("x{i}"), random_tensor(&mut rng, s)).unwrap())
        .collect();
    let probe_seed = rng.gen::<u64>();
    grad_check(&mut store, &ids, 1e-5, |g| {
        let inputs = ids
            .iter()
            .map(|&id| g.param(id))
            .collect::<dst_autodiff::Result<Vec<_>>>()?;
        let out = op(g, &inputs)?;
        let shape = g.shape(out).to_vec();
        let weights = random_tensor(&mut ChaCha8Rng::seed_from_u64(probe_seed), &shape);
        let weighted = g.mul_const(out, weights)?;
        g.sum(weighted)
    })
    .unwrap()
    .max_relative_error
}

pub fn gru_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let w = GruWeights::register(&mut store, "gru", 3, 4, &mut rng).unwrap();
    let x = store.add("x", random_tensor(&mut rng, &[3])).unwrap();
    let h = store.add("h", random_tensor(&mut rng, &[4])).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let probe = random_tensor(&mut rng, &[4]);
    grad_check(&mut store, &ids, 1e-5, |g| {
        let (xn, hn) = (g.param(x)?, g.param(h)?);
        let h1 = gru_cell(g, xn, hn, &w)?;
        let weighted = g.mul_const(h1, probe.clone())?;
        g.sum(weighted)
    })
    .unwrap()
    .max_relative_error
}

pub mod checks;
