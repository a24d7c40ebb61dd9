//! Recurrent and linear building blocks expressed with graph primitives.

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Weights of one GRU cell. Input matrices are `[d_h, d_in]`, recurrent
/// matrices `[d_h, d_h]`, biases `[d_h]`.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl GruWeights {
    /// Registers `<prefix>.w_z`, `<prefix>.u_z`, ... initialised uniformly in
    /// `[-1/sqrt(d_h), 1/sqrt(d_h)]`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_h as f64).sqrt();
        let mut add = |name: &str, shape: &[usize]| store.add_uniform(format!("{prefix}.{name}"), shape, bound, rng);
        Ok(GruWeights {
            w_z: add("w_z", &[d_h, d_in])?,
            u_z: add("u_z", &[d_h, d_h])?,
            b_z: add("b_z", &[d_h])?,
            w_r: add("w_r", &[d_h, d_in])?,
            u_r: add("u_r", &[d_h, d_h])?,
            b_r: add("b_r", &[d_h])?,
            w_h: add("w_h", &[d_h, d_in])?,
            u_h: add("u_h", &[d_h, d_h])?,
            b_h: add("b_h", &[d_h])?,
            d_in,
            d_h,
        })
    }

    /// Resolves the nine tensors of an already registered cell by name.
    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        let id = |name: &str| store.id(&format!("{prefix}.{name}"));
        let w_z = id("w_z")?;
        let shape = store.get(w_z).shape().to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::InvalidAxis {
                op: "gru_cell",
                axis: 0,
                shape,
            });
        }
        Ok(GruWeights {
            w_z,
            u_z: id("u_z")?,
            b_z: id("b_z")?,
            w_r: id("w_r")?,
            u_r: id("u_r")?,
            b_r: id("b_r")?,
            w_h: id("w_h")?,
            u_h: id("u_h")?,
            b_h: id("b_h")?,
            d_in: shape[1],
            d_h: shape[0],
        })
    }
}

/// One GRU step:
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
pub fn gru_cell(g: &mut Graph<'_>, x: NodeId, h_prev: NodeId, w: &GruWeights) -> Result<NodeId> {
    if g.shape(x) != [w.d_in] {
        return Err(AutodiffError::ShapeMismatch {
            op: "gru_cell",
            lhs: g.shape(x).to_vec(),
            rhs: vec![w.d_in],
        });
    }
    if g.shape(h_prev) != [w.d_h] {
        return Err(AutodiffError::ShapeMismatch {
            op: "gru_cell",
            lhs: g.shape(h_prev).to_vec(),
            rhs: vec![w.d_h],
        });
    }
    let gate = |g: &mut Graph<'_>, wi: ParamId, ui: ParamId, bi: ParamId, h: NodeId| -> Result<NodeId> {
        let (wn, un, bn) = (g.param(wi)?, g.param(ui)?, g.param(bi)?);
        let wx = g.matmul(wn, x)?;
        let uh = g.matmul(un, h)?;
        let s = g.add(wx, uh)?;
        g.add(s, bn)
    };
    let z_pre = gate(g, w.w_z, w.u_z, w.b_z, h_prev)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = gate(g, w.w_r, w.u_r, w.b_r, h_prev)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.elementwise_mul(r, h_prev)?;
    let cand_pre = gate(g, w.w_h, w.u_h, w.b_h, rh)?;
    let cand = g.tanh(cand_pre)?;
    let keep = g.one_minus(z)?;
    let old = g.elementwise_mul(keep, h_prev)?;
    let new = g.elementwise_mul(z, cand)?;
    g.add(old, new)
}

/// Runs a GRU over `inputs` from a zero state, returning every hidden state
/// in input order. With `reverse` the sweep starts from the last input.
pub fn gru_sequence(g: &mut Graph<'_>, inputs: &[NodeId], w: &GruWeights, reverse: bool) -> Result<Vec<NodeId>> {
    let mut h = g.constant(Tensor::zeros(&[w.d_h]))?;
    let mut out = vec![h; inputs.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..inputs.len()).rev())
    } else {
        Box::new(0..inputs.len())
    };
    for t in order {
        h = gru_cell(g, inputs[t], h, w)?;
        out[t] = h;
    }
    Ok(out)
}

/// Affine map `W x + b` with `W: [d_out, d_in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{prefix}.weight"), &[d_out, d_in], bound, rng)?;
        let bias = if bias {
            Some(store.add_uniform(format!("{prefix}.bias"), &[d_out], bound, rng)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Linear {
            weight: store.id(&format!("{prefix}.weight"))?,
            bias: store.id(&format!("{prefix}.bias")).ok(),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight)?;
        let y = g.matmul(w, x)?;
        match self.bias {
            Some(b) => {
                let bn = g.param(b)?;
                g.add(y, bn)
            }
            None => Ok(y),
        }
    }
}
