//! Token embeddings: a word vector concatenated with the mean of the token's
//! character n-gram vectors (n = 2, 3, with `^`/`$` boundary markers).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dst_autodiff::{Graph, NodeId, ParamId, ParamStore};
use rand::Rng;

use crate::context::{Vocabulary, PAD, RESERVED};
use crate::error::{DstError, Result};

pub const WORD_PARAM: &str = "embedding.word";
pub const NGRAM_PARAM: &str = "embedding.char_ngram";

/// Character bigrams then trigrams of `^token$`.
pub fn char_ngrams(token: &str) -> Vec<String> {
    let chars: Vec<char> = std::iter::once('^')
        .chain(token.chars())
        .chain(std::iter::once('$'))
        .collect();
    let mut out = Vec::new();
    for n in [2, 3] {
        out.extend(chars.windows(n).map(|w| w.iter().collect::<String>()));
    }
    out
}

#[derive(Clone, Debug)]
pub struct EmbeddingLayer {
    pub word: ParamId,
    pub ngram: ParamId,
    pub word_dim: usize,
    pub char_dim: usize,
    /// N-gram table rows for every vocabulary id; empty for PAD.
    bags: Vec<Vec<usize>>,
    ngram_index: BTreeMap<String, usize>,
}

fn index_ngrams(vocab: &Vocabulary) -> (BTreeMap<String, usize>, Vec<Vec<usize>>) {
    let mut index = BTreeMap::new();
    for (id, tok) in vocab.tokens().iter().enumerate() {
        if id != PAD {
            for g in char_ngrams(tok) {
                index.entry(g).or_insert(0);
            }
        }
    }
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }
    let bags = vocab
        .tokens()
        .iter()
        .enumerate()
        .map(|(id, tok)| {
            if id == PAD {
                Vec::new()
            } else {
                char_ngrams(tok).iter().map(|g| index[g]).collect()
            }
        })
        .collect();
    (index, bags)
}

impl EmbeddingLayer {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab: &Vocabulary,
        word_dim: usize,
        char_dim: usize,
        init_bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (ngram_index, bags) = index_ngrams(vocab);
        let word = store.add_uniform(WORD_PARAM, &[vocab.len(), word_dim], init_bound, rng)?;
        let ngram = store.add_uniform(NGRAM_PARAM, &[ngram_index.len().max(1), char_dim], init_bound, rng)?;
        Ok(EmbeddingLayer {
            word,
            ngram,
            word_dim,
            char_dim,
            bags,
            ngram_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.word_dim + self.char_dim
    }

    pub fn ngram_count(&self) -> usize {
        self.ngram_index.len()
    }

    pub fn ngram_row(&self, ngram: &str) -> Option<usize> {
        self.ngram_index.get(ngram).copied()
    }

    /// `[ids.len(), dim]` matrix of composed embeddings.
    pub fn embed_ids(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<NodeId> {
        let word_table = g.param(self.word)?;
        let ngram_table = g.param(self.ngram)?;
        let words = g.embedding_lookup(word_table, ids)?;
        let bags: Vec<Vec<usize>> = ids.iter().map(|&id| self.bags[id].clone()).collect();
        let chars = g.embedding_bag_mean(ngram_table, &bags)?;
        Ok(g.concat(&[words, chars], 1)?)
    }

    /// Composed embedding of one token; unknown tokens use the UNK row.
    pub fn embed(&self, g: &mut Graph<'_>, vocab: &Vocabulary, token: &str) -> Result<NodeId> {
        let m = self.embed_ids(g, &[vocab.id(token)])?;
        Ok(g.row(m, 0)?)
    }

    /// Overwrites word rows of in-vocabulary tokens from GloVe-format text
    /// (`token v1 ... vD` per line) and returns the covered fraction of
    /// non-reserved vocabulary tokens.
    pub fn load_pretrained_text(&self, store: &mut ParamStore, vocab: &Vocabulary, text: &str) -> Result<f64> {
        let mut covered = vec![false; vocab.len()];
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<&str> = parts.collect();
            if values.len() != self.word_dim {
                return Err(DstError::VectorDimension {
                    line: i + 1,
                    expected: self.word_dim,
                    found: values.len(),
                });
            }
            let Some(id) = vocab.get(token) else { continue };
            let parsed = values
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| DstError::Parse {
                    path: "vectors".into(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            store.get_mut(self.word).row_mut(id).copy_from_slice(&parsed);
            covered[id] = true;
        }
        let candidates = vocab.len() - RESERVED.len();
        if candidates == 0 {
            return Ok(0.0);
        }
        Ok(covered[RESERVED.len()..].iter().filter(|&&c| c).count() as f64 / candidates as f64)
    }

    pub fn load_pretrained_vectors(&self, store: &mut ParamStore, vocab: &Vocabulary, path: &Path) -> Result<f64> {
        let text = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        self.load_pretrained_text(store, vocab, &text)
    }

    /// Rebuilds the layer around parameters already present in `store`.
    pub fn lookup(store: &ParamStore, vocab: &Vocabulary) -> Result<Self> {
        let word = store.id(WORD_PARAM)?;
        let ngram = store.id(NGRAM_PARAM)?;
        let (ngram_index, bags) = index_ngrams(vocab);
        let (ws, ns) = (store.get(word).shape(), store.get(ngram).shape());
        if ws[0] != vocab.len() || ns[0] != ngram_index.len().max(1) {
            return Err(DstError::IncompatibleCheckpoint(format!(
                "embedding tables {ws:?}/{ns:?} do not match a vocabulary of {} tokens",
                vocab.len()
            )));
        }
        Ok(EmbeddingLayer {
            word,
            ngram,
            word_dim: ws[1],
            char_dim: ns[1],
            bags,
            ngram_index,
        })
    }
}
