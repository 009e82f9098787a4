//! The assembled network: backbone, relational edges and gated GCN sharing
//! one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::LogMelFeature;
use crate::autodiff::Var;
use crate::backbone::{batch_features, BackboneConfig, BackboneOutput, EventBackbone};
use crate::edges::{GraphVars, MelFlags, RelationalEdges};
use crate::error::{Error, Result};
use crate::gcn::{EventRelationalGraph, GatedGcn, GraphState, ScenePrediction};
use crate::nn::{Forward, Mode, ParamStore};
use crate::tensor::Real;

pub const N_SCENES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mel: MelFlags,
    pub gcn_layers: usize,
    pub n_scenes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone: BackboneConfig::default(), mel: MelFlags::default(), gcn_layers: 2, n_scenes: N_SCENES }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.gcn_layers == 0 {
            return Err(Error::Config("gcn_layers must be at least 1".into()));
        }
        if self.n_scenes < 2 {
            return Err(Error::Config("need at least two scenes".into()));
        }
        Ok(())
    }

    pub fn n_events(&self) -> usize {
        self.backbone.n_events
    }
}

#[derive(Clone, Debug)]
pub struct ErglModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: EventBackbone,
    pub mel: RelationalEdges,
    pub gcn: GatedGcn,
}

/// Tape handles for one batch.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub backbone: BackboneOutput,
    pub graph: GraphVars,
    /// `G⁰ … G^U`
    pub states: Vec<GraphState>,
    /// `[batch, scenes]`
    pub logits: Var,
}

/// Everything inference produces for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipInference {
    pub scene: ScenePrediction,
    /// Input graph to the GCN, with node embeddings and edge vectors.
    pub graph: EventRelationalGraph,
}

impl<T: Real> ErglModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = EventBackbone::new(&config.backbone, &mut store, &mut rng)?;
        let d = config.backbone.node_dim;
        let mel = RelationalEdges::new(&mut store, &mut rng, d, config.mel);
        let gcn = GatedGcn::new(&mut store, &mut rng, config.n_events(), d, config.gcn_layers, config.n_scenes)?;
        Ok(ErglModel { config: config.clone(), store, backbone, mel, gcn })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> ErglModel<U> {
        ErglModel {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            mel: self.mel.clone(),
            gcn: self.gcn.clone(),
        }
    }

    /// `input` is `[batch, 1, frames, mels]`.
    pub fn forward(&self, f: &mut Forward<'_, T>, input: Var) -> Result<ModelOutput> {
        let backbone = self.backbone.forward(f, input)?;
        let graph = self.mel.build_graph(f, backbone.tokens)?;
        let g0 = GraphState { nodes: graph.nodes, edges: graph.edges, layer: 0 };
        let (logits, states) = self.gcn.forward(f, g0)?;
        Ok(ModelOutput { backbone, graph, states, logits })
    }

    /// Eval-mode inference, one result per feature. Features in one call
    /// must share a frame count.
    pub fn infer(&self, features: &[&LogMelFeature], vocab: &[usize]) -> Result<Vec<ClipInference>> {
        let (n, d) = (self.config.n_events(), self.config.backbone.node_dim);
        if vocab.len() != n {
            return Err(Error::Compatibility(format!("vocabulary has {} events, model has {n}", vocab.len())));
        }
        let input = batch_features::<T>(features)?;
        let mut f = Forward::new(&self.store, Mode::Eval);
        let x = f.tape.constant(input);
        let out = self.forward(&mut f, x)?;
        let to_f32 = |v: Var| f.tape.value(v).data().iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
        let (nodes, edges, probs) = (to_f32(out.graph.nodes), to_f32(out.graph.edges), to_f32(out.backbone.event_probs));
        let logits: Vec<f64> = f.tape.value(out.logits).data().iter().map(|x| x.as_f64()).collect();
        let k = self.config.n_scenes;
        Ok((0..features.len())
            .map(|b| ClipInference {
                scene: ScenePrediction::from_logits(&logits[b * k..(b + 1) * k]),
                graph: EventRelationalGraph {
                    n,
                    d,
                    node_feats: nodes[b * n * d..(b + 1) * n * d].to_vec(),
                    edge_feats: edges[b * n * n * d..(b + 1) * n * n * d].to_vec(),
                    event_probs: probs[b * n..(b + 1) * n].to_vec(),
                    vocab: vocab.to_vec(),
                    layer_index: 0,
                },
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    fn tiny(flags: MelFlags) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig { channels: vec![2, 2], n_events: 3, ..Default::default() },
            mel: flags,
            gcn_layers: 2,
            n_scenes: N_SCENES,
        }
    }

    fn feature(seed: u32, frames: usize) -> LogMelFeature {
        let values = (0..frames * 64).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 100.0 - 5.0).collect();
        LogMelFeature { frames, mel_bins: 64, values }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ErglModel::<f32>::new(&tiny(MelFlags::default()), 5).unwrap();
        let b = ErglModel::<f32>::new(&tiny(MelFlags::default()), 5).unwrap();
        let c = ErglModel::<f32>::new(&tiny(MelFlags::default()), 6).unwrap();
        assert_eq!(a.store.entries(), b.store.entries());
        assert_ne!(a.store.entries(), c.store.entries());
    }

    #[test]
    fn parameter_groups_cover_the_model() {
        let m = ErglModel::<f32>::new(&tiny(MelFlags::default()), 0).unwrap();
        let count = |g| m.store.entries().iter().filter(|e| e.group == g).count();
        assert_eq!(count(ParamGroup::Mel), 6);
        assert_eq!(count(ParamGroup::Fallback), 1);
        assert!(count(ParamGroup::Gcn) > 0 && count(ParamGroup::Backbone) > 0);
        let mut names: Vec<_> = m.store.entries().iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), m.store.len());
    }

    #[test]
    fn inference_shapes_and_probabilities() {
        let m = ErglModel::<f32>::new(&tiny(MelFlags::default()), 1).unwrap();
        let (a, b) = (feature(1, 16), feature(2, 16));
        let out = m.infer(&[&a, &b], &[5, 6, 7]).unwrap();
        assert_eq!(out.len(), 2);
        for clip in &out {
            assert_eq!(clip.graph.edge_feats.len(), 3 * 3 * 64);
            let total: f64 = clip.scene.probabilities.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(clip.graph.event_probs.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert_eq!(m.infer(&[&a, &b], &[5, 6, 7]).unwrap(), out);
        assert!(matches!(m.infer(&[&a], &[1, 2]), Err(Error::Compatibility(_))));
    }

    #[test]
    fn initial_scene_loss_near_uniform() {
        let m = ErglModel::<f32>::new(&tiny(MelFlags::default()), 2).unwrap();
        let feats: Vec<LogMelFeature> = (0..8).map(|s| feature(s, 16)).collect();
        let refs: Vec<&LogMelFeature> = feats.iter().collect();
        let out = m.infer(&refs, &[0, 1, 2]).unwrap();
        for clip in out {
            let ce = -clip.scene.probabilities[0].ln();
            assert!((ce - 10f64.ln()).abs() < 0.5, "{ce}");
        }
    }
}
