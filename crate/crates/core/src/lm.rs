//! Bi-directional GRU language model over the embedded context.
//!
//! The forward direction predicts the next token from each position, the
//! backward direction the previous one. Its hidden states, summed over the
//! two directions, are added to the token embeddings before the utterance
//! encoder sees them.

use dst_autodiff::{gru_sequence, Graph, GruWeights, NodeId, ParamId, ParamStore, Tensor};
use rand::Rng;

use crate::error::{DstError, Result};

#[derive(Clone, Copy, Debug)]
pub struct BiLm {
    pub forward: GruWeights,
    pub backward: GruWeights,
    /// Next-token projection, stored `[|V|, d_h]`.
    pub w_f: ParamId,
    /// Previous-token projection, stored `[|V|, d_h]`.
    pub w_b: ParamId,
    pub vocab_size: usize,
}

/// Per-position hidden states of both directions and their sum.
#[derive(Clone, Debug)]
pub struct LmOutput {
    pub forward_hiddens: Vec<NodeId>,
    pub backward_hiddens: Vec<NodeId>,
    pub fused: Vec<NodeId>,
}

impl LmOutput {
    pub fn len(&self) -> usize {
        self.fused.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fused.is_empty()
    }
}

impl BiLm {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_in: usize,
        d_h: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_h as f64).sqrt();
        Ok(BiLm {
            forward: GruWeights::register(store, "lm.forward_gru", d_in, d_h, rng)?,
            backward: GruWeights::register(store, "lm.backward_gru", d_in, d_h, rng)?,
            w_f: store.add_uniform("lm.w_f", &[vocab_size, d_h], bound, rng)?,
            w_b: store.add_uniform("lm.w_b", &[vocab_size, d_h], bound, rng)?,
            vocab_size,
        })
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        let w_f = store.id("lm.w_f")?;
        Ok(BiLm {
            forward: GruWeights::lookup(store, "lm.forward_gru")?,
            backward: GruWeights::lookup(store, "lm.backward_gru")?,
            w_f,
            w_b: store.id("lm.w_b")?,
            vocab_size: store.get(w_f).shape()[0],
        })
    }

    /// Runs both directions over the embedded rows.
    pub fn forward(&self, g: &mut Graph<'_>, embedded: &[NodeId]) -> Result<LmOutput> {
        if embedded.is_empty() {
            return Err(DstError::Empty("language model input"));
        }
        let forward_hiddens = gru_sequence(g, embedded, &self.forward, false)?;
        let backward_hiddens = gru_sequence(g, embedded, &self.backward, true)?;
        let fused = forward_hiddens
            .iter()
            .zip(&backward_hiddens)
            .map(|(&f, &b)| g.add(f, b))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(LmOutput {
            forward_hiddens,
            backward_hiddens,
            fused,
        })
    }

    /// Logits for the token after position `t` (valid for `t < T-1`).
    pub fn next_logits(&self, g: &mut Graph<'_>, out: &LmOutput, t: usize) -> Result<NodeId> {
        let w = g.param(self.w_f)?;
        Ok(g.matmul(w, out.forward_hiddens[t])?)
    }

    /// Logits for the token before position `t` (valid for `t >= 1`).
    pub fn prev_logits(&self, g: &mut Graph<'_>, out: &LmOutput, t: usize) -> Result<NodeId> {
        let w = g.param(self.w_b)?;
        Ok(g.matmul(w, out.backward_hiddens[t])?)
    }

    /// Next-token distributions for positions `0..T-1` and previous-token
    /// distributions for positions `1..T`.
    pub fn distributions(&self, g: &mut Graph<'_>, out: &LmOutput) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        let t_len = out.len();
        let mut next = Vec::with_capacity(t_len.saturating_sub(1));
        let mut prev = Vec::with_capacity(t_len.saturating_sub(1));
        for t in 0..t_len.saturating_sub(1) {
            let l = self.next_logits(g, out, t)?;
            next.push(g.softmax(l, 0)?);
        }
        for t in 1..t_len {
            let l = self.prev_logits(g, out, t)?;
            prev.push(g.softmax(l, 0)?);
        }
        Ok((next, prev))
    }

    /// Summed negative log-likelihood of every next token (from forward
    /// states) and every previous token (from backward states).
    pub fn loss(&self, g: &mut Graph<'_>, out: &LmOutput, token_ids: &[usize]) -> Result<NodeId> {
        if token_ids.len() != out.len() {
            return Err(DstError::Autodiff(dst_autodiff::AutodiffError::ShapeMismatch {
                op: "lm_loss",
                lhs: vec![out.len()],
                rhs: vec![token_ids.len()],
            }));
        }
        let t_len = out.len();
        let mut terms = Vec::with_capacity(2 * t_len);
        for t in 0..t_len.saturating_sub(1) {
            let l = self.next_logits(g, out, t)?;
            terms.push(g.cross_entropy(l, token_ids[t + 1])?);
        }
        for t in 1..t_len {
            let l = self.prev_logits(g, out, t)?;
            terms.push(g.cross_entropy(l, token_ids[t - 1])?);
        }
        if terms.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0))?);
        }
        Ok(g.add_all(&terms)?)
    }
}

/// `embedded_t + fused_t` for every position; without an LM output the
/// embeddings pass through unchanged.
pub fn fuse_with_embedding(g: &mut Graph<'_>, lm: Option<&LmOutput>, embedded: &[NodeId]) -> Result<Vec<NodeId>> {
    let Some(out) = lm else {
        return Ok(embedded.to_vec());
    };
    if out.len() != embedded.len() {
        return Err(DstError::Autodiff(dst_autodiff::AutodiffError::ShapeMismatch {
            op: "fuse_with_embedding",
            lhs: vec![out.len()],
            rhs: vec![embedded.len()],
        }));
    }
    let mut fused = Vec::with_capacity(embedded.len());
    for (&e, &h) in embedded.iter().zip(&out.fused) {
        if g.shape(e) != g.shape(h) {
            return Err(DstError::InvalidConfig(format!(
                "language-model hidden size {:?} differs from embedding size {:?}",
                g.shape(h),
                g.shape(e)
            )));
        }
        fused.push(g.add(e, h)?);
    }
    Ok(fused)
}

/// Splits an `[T, d]` matrix node into its rows.
pub fn rows(g: &mut Graph<'_>, matrix: NodeId) -> Result<Vec<NodeId>> {
    let n = g.shape(matrix)[0];
    (0..n).map(|t| g.row(matrix, t).map_err(DstError::from)).collect()
}
