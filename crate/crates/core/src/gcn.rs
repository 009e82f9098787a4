//! Residual gated graph convolution over the dense event-relational graph,
//! concatenation readout and the scene classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Forward, Linear, ParamGroup, ParamStore};
use crate::tensor::Real;

/// Added to the gate denominator.
pub const GATE_EPS: f64 = 1e-6;

/// One gated GCN layer: five bias-free `d×d` maps and two batch norms.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub a: Linear,
    pub b: Linear,
    pub c: Linear,
    pub u: Linear,
    pub v: Linear,
    pub edge_norm: BatchNorm,
    pub node_norm: BatchNorm,
}

/// Node and edge features of one batch of graphs at a given layer.
#[derive(Clone, Copy, Debug)]
pub struct GraphState {
    /// `[batch, n, d]`
    pub nodes: Var,
    /// `[batch, n, n, d]`, entry `[b, i, j]` is the edge `i → j`.
    pub edges: Var,
    pub layer: usize,
}

impl GcnLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        let g = ParamGroup::Gcn;
        let mut lin = |s: &str| Linear::new(store, rng, &format!("{name}.{s}"), g, d, d, false);
        let (a, b, c, u, v) = (lin("a"), lin("b"), lin("c"), lin("u"), lin("v"));
        GcnLayer {
            a,
            b,
            c,
            u,
            v,
            edge_norm: BatchNorm::new(store, &format!("{name}.edge_norm"), g, d),
            node_norm: BatchNorm::new(store, &format!("{name}.node_norm"), g, d),
        }
    }

    /// ```text
    /// ê_ij = e_ij + ReLU(BN(A e_ij + B h_i + C h_j))
    /// η_ij = σ(ê_ij) / (Σ_j' σ(ê_ij') + ε)
    /// ĥ_i  = h_i + ReLU(BN(U h_i + Σ_j η_ij ⊙ V h_j))
    /// ```
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, g: GraphState) -> Result<GraphState> {
        let hs = f.tape.shape(g.nodes).to_vec();
        let es = f.tape.shape(g.edges).to_vec();
        if hs.len() != 3 || es != [hs[0], hs[1], hs[1], hs[2]] {
            return Err(Error::dim("gcn_layer", format!("nodes {hs:?} and edges {es:?} are inconsistent")));
        }
        let n = hs[1];
        let ae = self.a.forward(f, g.edges)?;
        let bh = self.b.forward(f, g.nodes)?;
        let bh = f.tape.broadcast(bh, 2, n)?;
        let ch = self.c.forward(f, g.nodes)?;
        let ch = f.tape.broadcast(ch, 1, n)?;
        let pre = f.tape.add(ae, bh)?;
        let pre = f.tape.add(pre, ch)?;
        let pre = self.edge_norm.forward(f, pre, 3)?;
        let pre = f.tape.relu(pre);
        let edges = f.tape.add(g.edges, pre)?;

        let sig = f.tape.sigmoid(edges);
        let denom = f.tape.sum(sig, 2)?;
        let denom = f.tape.add_scalar(denom, T::lit(GATE_EPS));
        let denom = f.tape.broadcast(denom, 2, n)?;
        let gate = f.tape.div(sig, denom)?;
        let vh = self.v.forward(f, g.nodes)?;
        let vh = f.tape.broadcast(vh, 1, n)?;
        let msg = f.tape.mul(gate, vh)?;
        let msg = f.tape.sum(msg, 2)?;
        let uh = self.u.forward(f, g.nodes)?;
        let pre = f.tape.add(uh, msg)?;
        let pre = self.node_norm.forward(f, pre, 2)?;
        let pre = f.tape.relu(pre);
        let nodes = f.tape.add(g.nodes, pre)?;
        Ok(GraphState { nodes, edges, layer: g.layer + 1 })
    }
}

/// `U` gated layers followed by concatenation and a linear scene classifier.
#[derive(Clone, Debug)]
pub struct GatedGcn {
    pub layers: Vec<GcnLayer>,
    pub classifier: Linear,
}

impl GatedGcn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        n: usize,
        d: usize,
        depth: usize,
        n_scenes: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("gcn depth must be at least 1".into()));
        }
        let layers = (0..depth).map(|l| GcnLayer::new(store, rng, &format!("gcn.layer{l}"), d)).collect();
        let classifier = Linear::new(store, rng, "gcn.scene_classifier", ParamGroup::Gcn, n * d, n_scenes, true);
        Ok(GatedGcn { layers, classifier })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Every intermediate graph, `G⁰` first.
    pub fn propagate<T: Real>(&self, f: &mut Forward<'_, T>, g0: GraphState) -> Result<Vec<GraphState>> {
        let mut states = vec![g0];
        for layer in &self.layers {
            let next = layer.forward(f, *states.last().unwrap())?;
            states.push(next);
        }
        Ok(states)
    }

    /// Node features concatenated in vocabulary order, `[batch, n·d]`.
    pub fn readout<T: Real>(&self, f: &mut Forward<'_, T>, g: GraphState) -> Result<Var> {
        if g.layer != self.depth() {
            return Err(Error::Contract(format!("readout at layer {} of {}", g.layer, self.depth())));
        }
        let s = f.tape.shape(g.nodes).to_vec();
        f.tape.reshape(g.nodes, [s[0], s[1] * s[2]])
    }

    /// Scene logits `[batch, scenes]`.
    pub fn classify<T: Real>(&self, f: &mut Forward<'_, T>, readout: Var) -> Result<Var> {
        self.classifier.forward(f, readout)
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, g0: GraphState) -> Result<(Var, Vec<GraphState>)> {
        let states = self.propagate(f, g0)?;
        let r = self.readout(f, *states.last().unwrap())?;
        Ok((self.classify(f, r)?, states))
    }
}

/// A materialized graph for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRelationalGraph {
    pub n: usize,
    pub d: usize,
    /// `n×d`, row-major.
    pub node_feats: Vec<f32>,
    /// `n×n×d`, entry `(i, j)` is the edge `i → j`.
    pub edge_feats: Vec<f32>,
    pub event_probs: Vec<f32>,
    /// Indices into the 527-event space, in node order.
    pub vocab: Vec<usize>,
    pub layer_index: usize,
}

impl EventRelationalGraph {
    pub fn node(&self, i: usize) -> &[f32] {
        &self.node_feats[i * self.d..(i + 1) * self.d]
    }

    pub fn edge(&self, i: usize, j: usize) -> &[f32] {
        let k = (i * self.n + j) * self.d;
        &self.edge_feats[k..k + self.d]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted_scene: usize,
}

impl ScenePrediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let probabilities = exp.iter().map(|e| e / total).collect();
        // first maximum wins ties
        let predicted_scene = logits.iter().enumerate().fold(0, |best, (i, &z)| if z > logits[best] { i } else { best });
        ScenePrediction { logits: logits.to_vec(), probabilities, predicted_scene }
    }
}
