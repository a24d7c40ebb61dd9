//! Utterance encoder, per-slot gate and copy-augmented value generator.
//!
//! Context tokens that are outside the vocabulary get extended ids
//! `|V| + k` (k-th distinct such token in the context), so the copy path
//! can emit their surface form while the generator only covers `|V|`.

use std::collections::BTreeMap;
use std::path::Path;

use dst_autodiff::checkpoint::{self, Metadata};
use dst_autodiff::{gru_cell, gru_sequence, Graph, GruWeights, Linear, NodeId, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::context::{build_context, tokenize, Vocabulary, EOS, PAD, RESERVED, UNK};
use crate::corpus::{BeliefState, Dialogue, Ontology, SlotKey};
use crate::embedding::EmbeddingLayer;
use crate::error::{DstError, Result};
use crate::eval::TurnPrediction;
use crate::lm::{fuse_with_embedding, rows, BiLm};
use crate::settings::{parse_field, parse_key_values};

pub const DONTCARE: &str = "dontcare";
const FORMAT_KEY: &str = "format";
const FORMAT: &str = "dst-model-1";
/// Embedding tables start uniform in this range, comparable in scale to
/// pretrained word vectors and to the summed LM hidden states.
const EMBEDDING_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Gate {
    Ptr = 0,
    None = 1,
    DontCare = 2,
}

impl Gate {
    pub fn from_index(i: usize) -> Gate {
        match i {
            0 => Gate::Ptr,
            1 => Gate::None,
            _ => Gate::DontCare,
        }
    }

    /// Gold label: absent → none, "dontcare" → dontcare, otherwise ptr.
    pub fn of_value(value: Option<&str>) -> Gate {
        match value {
            None => Gate::None,
            Some(DONTCARE) => Gate::DontCare,
            Some(_) => Gate::Ptr,
        }
    }
}

/// Architecture and regularisation settings stored with a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub hidden_dim: usize,
    pub lm_enabled: bool,
    pub tagging_enabled: bool,
    pub max_decode_len: usize,
    pub dropout: f64,
    /// Probability of replacing a context word by UNK during training.
    pub word_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 300,
            char_dim: 100,
            hidden_dim: 400,
            lm_enabled: true,
            tagging_enabled: true,
            max_decode_len: 10,
            dropout: 0.2,
            word_dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.word_dim + self.char_dim != self.hidden_dim {
            return Err(DstError::InvalidConfig(format!(
                "word_dim + char_dim ({} + {}) must equal hidden_dim ({})",
                self.word_dim, self.char_dim, self.hidden_dim
            )));
        }
        if self.hidden_dim == 0 || self.max_decode_len == 0 {
            return Err(DstError::InvalidConfig(
                "hidden_dim and max_decode_len must be positive".into(),
            ));
        }
        for (name, p) in [("dropout", self.dropout), ("word_dropout", self.word_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(DstError::InvalidConfig(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "word_dim = {}\nchar_dim = {}\nhidden_dim = {}\nlm_enabled = {}\ntagging_enabled = {}\nmax_decode_len = {}\ndropout = {}\nword_dropout = {}\n",
            self.word_dim,
            self.char_dim,
            self.hidden_dim,
            self.lm_enabled,
            self.tagging_enabled,
            self.max_decode_len,
            self.dropout,
            self.word_dropout
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in parse_key_values(text, "model config")? {
            match k.as_str() {
                "word_dim" => cfg.word_dim = parse_field(&k, &v)?,
                "char_dim" => cfg.char_dim = parse_field(&k, &v)?,
                "hidden_dim" => cfg.hidden_dim = parse_field(&k, &v)?,
                "lm_enabled" => cfg.lm_enabled = parse_field(&k, &v)?,
                "tagging_enabled" => cfg.tagging_enabled = parse_field(&k, &v)?,
                "max_decode_len" => cfg.max_decode_len = parse_field(&k, &v)?,
                "dropout" => cfg.dropout = parse_field(&k, &v)?,
                "word_dropout" => cfg.word_dropout = parse_field(&k, &v)?,
                _ => return Err(DstError::InvalidConfig(format!("unknown model config key `{k}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug)]
struct Decoder {
    gru: GruWeights,
    domain_emb: ParamId,
    slot_emb: ParamId,
    w_vocab: ParamId,
    p_gen: Linear,
    gate: Linear,
}

/// Gold decoding targets for one ontology slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotTarget {
    pub gate: Gate,
    /// Extended ids of the value tokens followed by EOS; empty unless ptr.
    pub tokens: Vec<usize>,
}

/// A turn turned into model inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub context_length: usize,
    pub tokens: Vec<String>,
    /// Vocabulary ids (UNK for unknown tokens).
    pub input_ids: Vec<usize>,
    /// Extended ids used by the copy path.
    pub copy_ids: Vec<usize>,
    /// Surface forms of extended ids `|V|..`.
    pub oov_tokens: Vec<String>,
    pub gold: BeliefState,
    pub targets: Vec<SlotTarget>,
}

impl Instance {
    pub fn extended_size(&self, vocab_size: usize) -> usize {
        vocab_size + self.oov_tokens.len()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `hiddens[t] = forward_t + backward_t`.
    pub hiddens: Vec<NodeId>,
    /// The hiddens stacked into a `[T, d_h]` matrix.
    pub matrix: NodeId,
    /// `forward_{T-1} + backward_0`.
    pub final_state: NodeId,
}

/// Node ids produced by one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorStep {
    pub hidden: NodeId,
    pub context_vector: NodeId,
    pub vocab_distribution: NodeId,
    pub context_distribution: NodeId,
    pub p_gen: NodeId,
    pub final_distribution: NodeId,
}

/// Loss nodes of one instance.
#[derive(Clone, Copy, Debug)]
pub struct InstanceLoss {
    pub dst: NodeId,
    /// `None` when the language model is disabled.
    pub lm: Option<NodeId>,
}

/// Source of randomness for training-time noise.
pub struct Noise<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct DstModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub ontology: Ontology,
    pub params: ParamStore,
    embedding: EmbeddingLayer,
    lm: Option<BiLm>,
    enc_fwd: GruWeights,
    enc_bwd: GruWeights,
    decoder: Decoder,
    domain_of: Vec<usize>,
    slot_of: Vec<usize>,
}

fn slot_indices(ontology: &Ontology) -> (Vec<usize>, Vec<usize>) {
    let domains = ontology.domains();
    let names = ontology.slot_names();
    let d = ontology
        .slots()
        .iter()
        .map(|s| domains.iter().position(|x| *x == s.domain).expect("domain listed"))
        .collect();
    let n = ontology
        .slots()
        .iter()
        .map(|s| names.iter().position(|x| *x == s.slot).expect("slot listed"))
        .collect();
    (d, n)
}

/// `p_gen * vocab + (1 - p_gen) * scatter(context, copy_ids)` over
/// `extended_size` entries; vocabulary entries past `|V|` get zero
/// generation mass.
pub fn mix_distributions(
    g: &mut Graph<'_>,
    p_gen: NodeId,
    vocab_distribution: NodeId,
    context_distribution: NodeId,
    copy_ids: &[usize],
    extended_size: usize,
) -> Result<NodeId> {
    let v = g.shape(vocab_distribution)[0];
    let pv = if extended_size > v {
        let pad = g.constant(Tensor::zeros(&[extended_size - v]))?;
        g.concat(&[vocab_distribution, pad], 0)?
    } else {
        vocab_distribution
    };
    let gen = g.scalar_mul(p_gen, pv)?;
    let copy = g.scatter_add(context_distribution, copy_ids, extended_size)?;
    let rest = g.one_minus(p_gen)?;
    let copy = g.scalar_mul(rest, copy)?;
    Ok(g.add(gen, copy)?)
}

fn dropout_mask(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let keep = 1.0 / (1.0 - p);
    for x in t.data_mut() {
        *x = if rng.gen::<f64>() < p { 0.0 } else { keep };
    }
    t
}

/// Lowest index among the maxima.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl DstModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, ontology: Ontology, seed: u64) -> Result<Self> {
        config.validate()?;
        if ontology.is_empty() {
            return Err(DstError::Empty("ontology"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.hidden_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let embedding = EmbeddingLayer::register(
            &mut store,
            &vocab,
            config.word_dim,
            config.char_dim,
            EMBEDDING_INIT,
            &mut rng,
        )?;
        let lm = if config.lm_enabled {
            Some(BiLm::register(&mut store, d, d, vocab.len(), &mut rng)?)
        } else {
            None
        };
        let enc_fwd = GruWeights::register(&mut store, "encoder.forward_gru", d, d, &mut rng)?;
        let enc_bwd = GruWeights::register(&mut store, "encoder.backward_gru", d, d, &mut rng)?;
        let decoder = Decoder {
            gru: GruWeights::register(&mut store, "decoder.gru", d, d, &mut rng)?,
            domain_emb: store.add_uniform("decoder.domain_emb", &[ontology.domains().len(), d], bound, &mut rng)?,
            slot_emb: store.add_uniform("decoder.slot_emb", &[ontology.slot_names().len(), d], bound, &mut rng)?,
            w_vocab: store.add_uniform("decoder.w_vocab", &[vocab.len(), d], bound, &mut rng)?,
            p_gen: Linear::register(&mut store, "decoder.p_gen", 3 * d, 1, true, bound, &mut rng)?,
            gate: Linear::register(&mut store, "decoder.gate", d, 3, true, bound, &mut rng)?,
        };
        let (domain_of, slot_of) = slot_indices(&ontology);
        Ok(DstModel {
            config,
            vocab,
            ontology,
            params: store,
            embedding,
            lm,
            enc_fwd,
            enc_bwd,
            decoder,
            domain_of,
            slot_of,
        })
    }

    /// Rebuilds a model around an existing parameter store.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, ontology: Ontology, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let incompatible = |e: dst_autodiff::AutodiffError| DstError::IncompatibleCheckpoint(e.to_string());
        let embedding = EmbeddingLayer::lookup(&params, &vocab)?;
        let lm = if config.lm_enabled {
            Some(BiLm::lookup(&params)?)
        } else {
            None
        };
        let decoder = Decoder {
            gru: GruWeights::lookup(&params, "decoder.gru").map_err(incompatible)?,
            domain_emb: params.id("decoder.domain_emb").map_err(incompatible)?,
            slot_emb: params.id("decoder.slot_emb").map_err(incompatible)?,
            w_vocab: params.id("decoder.w_vocab").map_err(incompatible)?,
            p_gen: Linear::lookup(&params, "decoder.p_gen").map_err(incompatible)?,
            gate: Linear::lookup(&params, "decoder.gate").map_err(incompatible)?,
        };
        let expect = |id: ParamId, rows: usize, what: &str| {
            let s = params.get(id).shape();
            if s != [rows, config.hidden_dim] {
                return Err(DstError::IncompatibleCheckpoint(format!(
                    "{what} has shape {s:?}, expected [{rows}, {}]",
                    config.hidden_dim
                )));
            }
            Ok(())
        };
        expect(decoder.w_vocab, vocab.len(), "decoder.w_vocab")?;
        expect(decoder.domain_emb, ontology.domains().len(), "decoder.domain_emb")?;
        expect(decoder.slot_emb, ontology.slot_names().len(), "decoder.slot_emb")?;
        if embedding.dim() != config.hidden_dim {
            return Err(DstError::IncompatibleCheckpoint(
                "embedding width differs from hidden_dim".into(),
            ));
        }
        let (domain_of, slot_of) = slot_indices(&ontology);
        Ok(DstModel {
            enc_fwd: GruWeights::lookup(&params, "encoder.forward_gru").map_err(incompatible)?,
            enc_bwd: GruWeights::lookup(&params, "encoder.backward_gru").map_err(incompatible)?,
            config,
            vocab,
            ontology,
            params,
            embedding,
            lm,
            decoder,
            domain_of,
            slot_of,
        })
    }

    pub fn embedding(&self) -> &EmbeddingLayer {
        &self.embedding
    }

    pub fn language_model(&self) -> Option<&BiLm> {
        self.lm.as_ref()
    }

    pub fn metadata(&self) -> Metadata {
        let mut meta = BTreeMap::new();
        meta.insert(FORMAT_KEY.to_string(), FORMAT.to_string());
        meta.insert("model_config".to_string(), self.config.to_text());
        meta.insert("vocab".to_string(), self.vocab.to_text());
        meta.insert("ontology".to_string(), self.ontology.to_text());
        meta
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, &self.metadata())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        Self::from_checkpoint(params, &meta)
    }

    pub fn from_checkpoint(params: ParamStore, meta: &Metadata) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| DstError::IncompatibleCheckpoint(format!("missing metadata `{k}`")))
        };
        if get(FORMAT_KEY)? != FORMAT {
            return Err(DstError::IncompatibleCheckpoint(format!(
                "unsupported format `{}`",
                get(FORMAT_KEY)?
            )));
        }
        let config = ModelConfig::from_text(get("model_config")?)?;
        let vocab = Vocabulary::from_text(get("vocab")?, "checkpoint vocabulary")?;
        let ontology = Ontology::from_text(get("ontology")?, "checkpoint ontology")?;
        Self::from_parts(config, vocab, ontology, params)
    }

    fn slot_index(&self, slot: &SlotKey) -> Result<usize> {
        self.ontology
            .index_of(slot)
            .ok_or_else(|| DstError::UnknownSlot(slot.to_string()))
    }

    /// Builds model inputs for turn `turn` of `dialogue`. An empty context is
    /// represented by a single PAD token.
    pub fn prepare(&self, dialogue: &Dialogue, turn: usize) -> Result<Instance> {
        let ctx = build_context(dialogue, turn, self.config.tagging_enabled)?;
        let context_length = ctx.len() - ctx.tag_positions.len();
        let mut tokens = ctx.tokens;
        if tokens.is_empty() {
            tokens.push(RESERVED[PAD].to_string());
        }
        let gold = dialogue.turns[turn].gold_state.clone();
        self.prepare_tokens(&dialogue.id, turn, context_length, tokens, gold)
    }

    pub fn prepare_tokens(
        &self,
        dialogue_id: &str,
        turn_index: usize,
        context_length: usize,
        tokens: Vec<String>,
        gold: BeliefState,
    ) -> Result<Instance> {
        if tokens.is_empty() {
            return Err(DstError::Empty("context"));
        }
        let v = self.vocab.len();
        let mut oov_tokens: Vec<String> = Vec::new();
        let mut input_ids = Vec::with_capacity(tokens.len());
        let mut copy_ids = Vec::with_capacity(tokens.len());
        for tok in &tokens {
            match self.vocab.get(tok) {
                Some(id) => {
                    input_ids.push(id);
                    copy_ids.push(id);
                }
                None => {
                    input_ids.push(UNK);
                    let k = oov_tokens.iter().position(|t| t == tok).unwrap_or_else(|| {
                        oov_tokens.push(tok.clone());
                        oov_tokens.len() - 1
                    });
                    copy_ids.push(v + k);
                }
            }
        }
        let targets = self
            .ontology
            .slots()
            .iter()
            .map(|slot| {
                let value = gold.get(slot);
                let gate = Gate::of_value(value);
                let tokens = match (gate, value) {
                    (Gate::Ptr, Some(val)) => tokenize(val)
                        .iter()
                        .map(|t| {
                            self.vocab
                                .get(t)
                                .or_else(|| oov_tokens.iter().position(|o| o == t).map(|k| v + k))
                                .unwrap_or(UNK)
                        })
                        .chain(std::iter::once(EOS))
                        .collect(),
                    _ => Vec::new(),
                };
                SlotTarget { gate, tokens }
            })
            .collect();
        Ok(Instance {
            dialogue_id: dialogue_id.to_string(),
            turn_index,
            context_length,
            tokens,
            input_ids,
            copy_ids,
            oov_tokens,
            gold,
            targets,
        })
    }

    /// Embeds (and optionally LM-fuses) the context. Returns the fused rows
    /// and the LM loss node when the LM is enabled.
    fn fused_context(
        &self,
        g: &mut Graph<'_>,
        inst: &Instance,
        noise: Option<&mut Noise<'_>>,
    ) -> Result<(Vec<NodeId>, Option<NodeId>, Option<Tensor>)> {
        let mut ids = inst.input_ids.clone();
        let mut hidden_mask = None;
        let mut emb = match noise {
            Some(n) => {
                if self.config.word_dropout > 0.0 {
                    for id in ids.iter_mut() {
                        if *id >= RESERVED.len() && n.rng.gen::<f64>() < self.config.word_dropout {
                            *id = UNK;
                        }
                    }
                }
                let e = self.embedding.embed_ids(g, &ids)?;
                if self.config.dropout > 0.0 {
                    let shape = [ids.len(), self.config.hidden_dim];
                    let m = dropout_mask(&shape, self.config.dropout, n.rng);
                    hidden_mask = Some(dropout_mask(&shape, self.config.dropout, n.rng));
                    g.mul_const(e, m)?
                } else {
                    e
                }
            }
            None => self.embedding.embed_ids(g, &ids)?,
        };
        if g.shape(emb).len() != 2 {
            emb = g.stack(&[emb])?;
        }
        let embedded = rows(g, emb)?;
        match &self.lm {
            Some(lm) => {
                let out = lm.forward(g, &embedded)?;
                let loss = lm.loss(g, &out, &inst.input_ids)?;
                let fused = fuse_with_embedding(g, Some(&out), &embedded)?;
                Ok((fused, Some(loss), hidden_mask))
            }
            None => Ok((embedded, None, hidden_mask)),
        }
    }

    /// Bi-GRU over fused context rows.
    pub fn encode(&self, g: &mut Graph<'_>, fused: &[NodeId]) -> Result<EncoderOutput> {
        self.encode_masked(g, fused, None)
    }

    fn encode_masked(&self, g: &mut Graph<'_>, fused: &[NodeId], mask: Option<Tensor>) -> Result<EncoderOutput> {
        if fused.is_empty() {
            return Err(DstError::Empty("encoder input"));
        }
        let f = gru_sequence(g, fused, &self.enc_fwd, false)?;
        let b = gru_sequence(g, fused, &self.enc_bwd, true)?;
        let final_state = g.add(f[f.len() - 1], b[0])?;
        let hiddens = f
            .iter()
            .zip(&b)
            .map(|(&x, &y)| g.add(x, y))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut matrix = g.stack(&hiddens)?;
        if let Some(m) = mask {
            matrix = g.mul_const(matrix, m)?;
        }
        Ok(EncoderOutput {
            hiddens,
            matrix,
            final_state,
        })
    }

    /// Domain embedding plus slot-name embedding for ontology slot `k`.
    pub fn slot_query(&self, g: &mut Graph<'_>, k: usize) -> Result<NodeId> {
        let dt = g.param(self.decoder.domain_emb)?;
        let st = g.param(self.decoder.slot_emb)?;
        let d = g.row(dt, self.domain_of[k])?;
        let s = g.row(st, self.slot_of[k])?;
        Ok(g.add(d, s)?)
    }

    pub fn generator_step(
        &self,
        g: &mut Graph<'_>,
        enc: &EncoderOutput,
        copy_ids: &[usize],
        extended_size: usize,
        input: NodeId,
        h_prev: NodeId,
    ) -> Result<GeneratorStep> {
        let hidden = gru_cell(g, input, h_prev, &self.decoder.gru)?;
        let scores = g.matmul(enc.matrix, hidden)?;
        let context_distribution = g.softmax(scores, 0)?;
        let context_vector = g.matmul(context_distribution, enc.matrix)?;
        let w = g.param(self.decoder.w_vocab)?;
        let logits = g.matmul(w, hidden)?;
        let vocab_distribution = g.softmax(logits, 0)?;
        let features = g.concat(&[hidden, context_vector, input], 0)?;
        let pg = self.decoder.p_gen.forward(g, features)?;
        let pg = g.sigmoid(pg)?;
        let p_gen = g.sum(pg)?;
        let final_distribution = mix_distributions(
            g,
            p_gen,
            vocab_distribution,
            context_distribution,
            copy_ids,
            extended_size,
        )?;
        Ok(GeneratorStep {
            hidden,
            context_vector,
            vocab_distribution,
            context_distribution,
            p_gen,
            final_distribution,
        })
    }

    /// Gate logits from a first-step context vector.
    pub fn gate_logits(&self, g: &mut Graph<'_>, context_vector: NodeId) -> Result<NodeId> {
        Ok(self.decoder.gate.forward(g, context_vector)?)
    }

    fn input_embedding(&self, g: &mut Graph<'_>, extended_id: usize) -> Result<NodeId> {
        let id = if extended_id < self.vocab.len() {
            extended_id
        } else {
            UNK
        };
        let m = self.embedding.embed_ids(g, &[id])?;
        Ok(g.row(m, 0)?)
    }

    /// Loss nodes for one instance with teacher forcing. With `noise`,
    /// word dropout and dropout masks are applied.
    pub fn instance_loss(
        &self,
        g: &mut Graph<'_>,
        inst: &Instance,
        mut noise: Option<Noise<'_>>,
    ) -> Result<InstanceLoss> {
        let (fused, lm_loss, mask) = self.fused_context(g, inst, noise.as_mut())?;
        let enc = self.encode_masked(g, &fused, mask)?;
        let ext = inst.extended_size(self.vocab.len());
        let mut gate_terms = Vec::with_capacity(inst.targets.len());
        let mut token_terms = Vec::new();
        for (k, target) in inst.targets.iter().enumerate() {
            let mut input = self.slot_query(g, k)?;
            let mut h = enc.final_state;
            let steps = if target.gate == Gate::Ptr {
                target.tokens.len()
            } else {
                1
            };
            let mut nll = Vec::with_capacity(steps);
            for s in 0..steps {
                let step = self.generator_step(g, &enc, &inst.copy_ids, ext, input, h)?;
                if s == 0 {
                    let logits = self.gate_logits(g, step.context_vector)?;
                    gate_terms.push(g.cross_entropy(logits, target.gate as usize)?);
                }
                if target.gate == Gate::Ptr {
                    let tok = target.tokens[s];
                    nll.push(g.neg_log(step.final_distribution, tok)?);
                    if s + 1 < steps {
                        input = self.input_embedding(g, tok)?;
                    }
                }
                h = step.hidden;
            }
            if !nll.is_empty() {
                token_terms.push(g.add_all(&nll)?);
            }
        }
        let gates = g.add_all(&gate_terms)?;
        let mut dst = g.scale(gates, 1.0 / gate_terms.len() as f64)?;
        if !token_terms.is_empty() {
            let toks = g.add_all(&token_terms)?;
            let toks = g.scale(toks, 1.0 / token_terms.len() as f64)?;
            dst = g.add(dst, toks)?;
        }
        Ok(InstanceLoss { dst, lm: lm_loss })
    }

    /// Encodes an instance without training noise.
    pub fn encode_instance(&self, g: &mut Graph<'_>, inst: &Instance) -> Result<EncoderOutput> {
        let (fused, _, _) = self.fused_context(g, inst, None)?;
        self.encode(g, &fused)
    }

    /// Gate distribution and greedily decoded value tokens for one slot.
    /// Tokens are surface strings; EOS is never included.
    pub fn decode_slot(
        &self,
        g: &mut Graph<'_>,
        slot: &SlotKey,
        enc: &EncoderOutput,
        inst: &Instance,
        max_len: usize,
    ) -> Result<(Vec<f64>, Vec<String>)> {
        let k = self.slot_index(slot)?;
        let max_len = max_len.max(1);
        let ext = inst.extended_size(self.vocab.len());
        let mut input = self.slot_query(g, k)?;
        let mut h = enc.final_state;
        let mut gate = Vec::new();
        let mut out = Vec::new();
        for s in 0..max_len {
            let step = self.generator_step(g, enc, &inst.copy_ids, ext, input, h)?;
            if s == 0 {
                let logits = self.gate_logits(g, step.context_vector)?;
                let p = g.softmax(logits, 0)?;
                gate = g.value(p).data().to_vec();
                if Gate::from_index(argmax(&gate)) != Gate::Ptr {
                    return Ok((gate, out));
                }
            }
            let id = argmax(g.value(step.final_distribution).data());
            if id == EOS {
                break;
            }
            out.push(if id < self.vocab.len() {
                self.vocab.token(id).to_string()
            } else {
                inst.oov_tokens[id - self.vocab.len()].clone()
            });
            input = self.input_embedding(g, id)?;
            h = step.hidden;
        }
        Ok((gate, out))
    }

    /// Predicted state for a prepared instance, decoding slots in ontology
    /// order.
    pub fn predict_instance(&self, inst: &Instance) -> Result<BeliefState> {
        let mut g = Graph::with_params(&self.params);
        let enc = self.encode_instance(&mut g, inst)?;
        let mut state = BeliefState::new();
        for slot in self.ontology.slots() {
            let (gate, tokens) = self.decode_slot(&mut g, slot, &enc, inst, self.config.max_decode_len)?;
            match Gate::from_index(argmax(&gate)) {
                Gate::None => {}
                Gate::DontCare => state.set(slot.clone(), DONTCARE),
                Gate::Ptr => {
                    if !tokens.is_empty() {
                        state.set(slot.clone(), &tokens.join(" "));
                    }
                }
            }
        }
        Ok(state)
    }

    pub fn predict_state(&self, dialogue: &Dialogue, turn: usize) -> Result<BeliefState> {
        self.predict_instance(&self.prepare(dialogue, turn)?)
    }

    /// Predictions for every turn of every dialogue, in corpus order.
    pub fn predict_corpus(&self, dialogues: &[Dialogue]) -> Result<Vec<TurnPrediction>> {
        let instances = self.prepare_corpus(dialogues)?;
        self.predict_instances(&instances)
    }

    pub fn predict_instances(&self, instances: &[Instance]) -> Result<Vec<TurnPrediction>> {
        instances
            .par_iter()
            .map(|inst| {
                Ok(TurnPrediction {
                    dialogue_id: inst.dialogue_id.clone(),
                    turn_index: inst.turn_index,
                    context_length: inst.context_length,
                    predicted: self.predict_instance(inst)?,
                    gold: inst.gold.clone(),
                })
            })
            .collect()
    }

    pub fn prepare_corpus(&self, dialogues: &[Dialogue]) -> Result<Vec<Instance>> {
        let mut out = Vec::new();
        for d in dialogues {
            for t in 0..d.turns.len() {
                out.push(self.prepare(d, t)?);
            }
        }
        Ok(out)
    }
}
