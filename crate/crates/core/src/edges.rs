//! Multi-dimensional edge learning: node↔context cross-attention (NCM)
//! produces scene-aware node tokens, node↔node cross-attention (NNM) followed
//! by token averaging produces one directed edge vector per ordered pair.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, Forward, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::Real;

/// Single-head projections `W_q`, `W_k`, `W_v`, all `d×d`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AttentionParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        let mut w = |suffix: &str| store.add(format!("{name}.{suffix}"), ParamGroup::Mel, kaiming_uniform(rng, &[d, d], d));
        AttentionParams { wq: w("wq"), wk: w("wk"), wv: w("wv") }
    }

    pub fn bind<T: Real>(&self, f: &mut Forward<'_, T>) -> [Var; 3] {
        [f.p(self.wq), f.p(self.wk), f.p(self.wv)]
    }
}

/// `softmax(Q·W_q (K·W_k)ᵀ / √d_k) · K·W_v` over matching leading axes.
///
/// `queries` is `[.., Tq, d]`, `keys` is `[.., Tk, d]`; returns the output
/// `[.., Tq, d]` and the attention weights `[.., Tq, Tk]`.
pub fn cross_attention<T: Real>(tape: &mut Tape<T>, queries: Var, keys: Var, [wq, wk, wv]: [Var; 3]) -> Result<(Var, Var)> {
    let (qs, ks) = (tape.shape(queries).to_vec(), tape.shape(keys).to_vec());
    let d = *qs.last().unwrap_or(&0);
    if ks.last() != Some(&d) || qs.len() != ks.len() || qs[..qs.len() - 2] != ks[..ks.len() - 2] {
        return Err(Error::dim("cross_attention", format!("queries {qs:?} and keys {ks:?} are incompatible")));
    }
    let wshape = tape.shape(wq).to_vec();
    if wshape != [d, d] {
        return Err(Error::dim("cross_attention", format!("projection {wshape:?} does not match width {d}")));
    }
    let q = tape.linear(queries, wq, None)?;
    let k = tape.linear(keys, wk, None)?;
    let v = tape.linear(keys, wv, None)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, T::one() / T::from_usize(d).unwrap().sqrt());
    let axis = tape.shape(scores).len() - 1;
    let attn = tape.softmax(scores, axis)?;
    let out = tape.bmm(attn, v, false)?;
    Ok((out, attn))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MelFlags {
    pub use_ncm: bool,
    pub use_nnm: bool,
}

impl Default for MelFlags {
    fn default() -> Self {
        MelFlags { use_ncm: true, use_nnm: true }
    }
}

#[derive(Clone, Debug)]
pub struct RelationalEdges {
    pub flags: MelFlags,
    pub ncm: AttentionParams,
    pub nnm: AttentionParams,
    /// Relation-free edge source used when NNM is switched off.
    pub fallback: Linear,
}

/// Tape handles for an assembled graph.
#[derive(Clone, Debug)]
pub struct GraphVars {
    /// `[batch, n, d]`, temporal means of the node token matrices.
    pub nodes: Var,
    /// `[batch, n, n, d]`, entry `[b, i, j]` is the edge `i → j`.
    pub edges: Var,
    /// `[batch, n, tokens, d]`
    pub scene_aware: Var,
    /// `[batch, n, tokens, tokens]` when NCM is on.
    pub ncm_attention: Option<Var>,
    /// `[batch, n, n, tokens, tokens]` when NNM is on.
    pub nnm_attention: Option<Var>,
}

impl RelationalEdges {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, d: usize, flags: MelFlags) -> Self {
        RelationalEdges {
            flags,
            ncm: AttentionParams::new(store, rng, "mel.ncm", d),
            nnm: AttentionParams::new(store, rng, "mel.nnm", d),
            fallback: Linear::new(store, rng, "mel.fallback", ParamGroup::Fallback, d, d, false),
        }
    }

    /// Scene-aware tokens for every node: each node's tokens attend to the
    /// node-averaged context. `tokens` is `[batch, n, T, d]`.
    pub fn ncm<T: Real>(&self, f: &mut Forward<'_, T>, tokens: Var) -> Result<(Var, Var)> {
        let n = f.tape.shape(tokens)[1];
        let context = f.tape.mean(tokens, 1)?;
        let context = f.tape.broadcast(context, 1, n)?;
        let w = self.ncm.bind(f);
        cross_attention(&mut f.tape, tokens, context, w)
    }

    /// Edge vectors for all ordered pairs: `e[b, i, j]` averages over tokens
    /// the attention of `S_i` (queries) onto `S_j` (keys and values).
    pub fn nnm<T: Real>(&self, f: &mut Forward<'_, T>, scene_aware: Var) -> Result<(Var, Var)> {
        let n = f.tape.shape(scene_aware)[1];
        let queries = f.tape.broadcast(scene_aware, 2, n)?;
        let keys = f.tape.broadcast(scene_aware, 1, n)?;
        let w = self.nnm.bind(f);
        let (relations, attn) = cross_attention(&mut f.tape, queries, keys, w)?;
        Ok((f.tape.mean(relations, 3)?, attn))
    }

    pub fn build_graph<T: Real>(&self, f: &mut Forward<'_, T>, tokens: Var) -> Result<GraphVars> {
        let shape = f.tape.shape(tokens).to_vec();
        if shape.len() != 4 || shape[1] == 0 {
            return Err(Error::dim("build_graph", format!("expected [batch, n >= 1, tokens, d], got {shape:?}")));
        }
        let n = shape[1];
        let nodes = f.tape.mean(tokens, 2)?;
        let (scene_aware, ncm_attention) = if self.flags.use_ncm {
            let (s, a) = self.ncm(f, tokens)?;
            (s, Some(a))
        } else {
            (tokens, None)
        };
        let (edges, nnm_attention) = if self.flags.use_nnm {
            let (e, a) = self.nnm(f, scene_aware)?;
            (e, Some(a))
        } else {
            let pooled = f.tape.mean(scene_aware, 2)?;
            let projected = self.fallback.forward(f, pooled)?;
            (f.tape.broadcast(projected, 1, n)?, None)
        };
        Ok(GraphVars { nodes, edges, scene_aware, ncm_attention, nnm_attention })
    }
}
