//! Convolutional event encoder: log-mel in, one temporal token matrix and one
//! event probability per vocabulary event out.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{LogMelFeature, N_MELS};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, BatchNorm, Forward, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const JOINT_DIM: usize = 2048;
pub const NODE_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of each convolutional block.
    pub channels: Vec<usize>,
    pub joint_dim: usize,
    pub node_dim: usize,
    pub n_events: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { channels: vec![64, 128, 256, 512], joint_dim: JOINT_DIM, node_dim: NODE_DIM, n_events: 25 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.node_dim != NODE_DIM {
            return Err(Error::Config(format!("node_dim must be {NODE_DIM}, got {}", self.node_dim)));
        }
        if self.joint_dim != JOINT_DIM {
            return Err(Error::Config(format!("joint_dim must be {JOINT_DIM}, got {}", self.joint_dim)));
        }
        if self.n_events == 0 {
            return Err(Error::Config("n_events must be at least 1".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("need at least one conv block with nonzero width".into()));
        }
        if N_MELS >> self.channels.len() == 0 {
            return Err(Error::Config(format!("{} pooling stages exhaust the {N_MELS} mel bins", self.channels.len())));
        }
        Ok(())
    }

    /// Token count after the pooling stages for `frames` input frames.
    pub fn tokens_for(&self, frames: usize) -> Result<usize> {
        let t = frames >> self.channels.len();
        if t == 0 {
            return Err(Error::Config(format!(
                "{frames} frames do not survive {} 2x2 pooling stages; need at least {}",
                self.channels.len(),
                1usize << self.channels.len()
            )));
        }
        Ok(t)
    }
}

/// Two 3×3 convolutions, each followed by batch norm and ReLU, then 2×2
/// average pooling.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: ParamId,
    pub bn1: BatchNorm,
    pub conv2: ParamId,
    pub bn2: BatchNorm,
}

impl ConvBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        let g = ParamGroup::Backbone;
        ConvBlock {
            conv1: store.add(format!("{name}.conv1.weight"), g, kaiming_uniform(rng, &[cout, cin, 3, 3], cin * 9)),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), g, cout),
            conv2: store.add(format!("{name}.conv2.weight"), g, kaiming_uniform(rng, &[cout, cout, 3, 3], cout * 9)),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), g, cout),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w1 = f.p(self.conv1);
        let y = f.tape.conv2d(x, w1)?;
        let y = self.bn1.forward(f, y, 1)?;
        let y = f.tape.relu(y);
        let w2 = f.p(self.conv2);
        let y = f.tape.conv2d(y, w2)?;
        let y = self.bn2.forward(f, y, 1)?;
        let y = f.tape.relu(y);
        f.tape.avg_pool2d(y)
    }
}

#[derive(Clone, Debug)]
pub struct EventBackbone {
    pub config: BackboneConfig,
    pub blocks: Vec<ConvBlock>,
    pub joint: Linear,
    pub heads: Vec<Linear>,
    /// Per-event classifier weights `[n, d]` and biases `[n]`.
    pub classifier_weight: ParamId,
    pub classifier_bias: ParamId,
}

/// Outputs of the backbone for a batch.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// `[batch, n, tokens, d]`
    pub tokens: Var,
    /// `[batch, n, d]`, temporal means of the token matrices.
    pub embeddings: Var,
    /// `[batch, n]`
    pub event_probs: Var,
}

impl EventBackbone {
    pub fn new<T: Real>(config: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut cin = 1;
        for (i, &cout) in config.channels.iter().enumerate() {
            blocks.push(ConvBlock::new(store, rng, &format!("backbone.block{i}"), cin, cout));
            cin = cout;
        }
        let g = ParamGroup::Backbone;
        let joint = Linear::new(store, rng, "backbone.joint", g, cin, config.joint_dim, true);
        let heads = (0..config.n_events)
            .map(|i| Linear::new(store, rng, &format!("backbone.head{i}"), g, config.joint_dim, config.node_dim, true))
            .collect();
        let n = config.n_events;
        let classifier_weight =
            store.add("backbone.event_classifier.weight", g, kaiming_uniform(rng, &[n, config.node_dim], config.node_dim));
        let classifier_bias = store.add("backbone.event_classifier.bias", g, Tensor::zeros([n]).with_grad());
        Ok(EventBackbone { config: config.clone(), blocks, joint, heads, classifier_weight, classifier_bias })
    }

    /// Conv blocks over `[batch, 1, frames, mels]`, then the frequency axis is
    /// averaged away. Returns `[batch, tokens, channels]`.
    pub fn conv_stack<T: Real>(&self, f: &mut Forward<'_, T>, input: Var) -> Result<Var> {
        let shape = f.tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[3] != N_MELS {
            return Err(Error::dim("conv_stack", format!("expected [batch, 1, frames, {N_MELS}], got {shape:?}")));
        }
        self.config.tokens_for(shape[2])?;
        let mut x = input;
        for block in &self.blocks {
            x = block.forward(f, x)?;
        }
        let x = f.tape.mean(x, 3)?; // [b, c, t]
        f.tape.permute(x, &[0, 2, 1])
    }

    /// Shared fully connected layer plus ReLU at every time step.
    pub fn joint_representation<T: Real>(&self, f: &mut Forward<'_, T>, tokens: Var) -> Result<Var> {
        let y = self.joint.forward(f, tokens)?;
        Ok(f.tape.relu(y))
    }

    /// `n` independent projections to the node width; each result is
    /// `[batch, tokens, d]`.
    pub fn event_heads<T: Real>(&self, f: &mut Forward<'_, T>, joint: Var) -> Result<Vec<Var>> {
        self.heads.iter().map(|h| h.forward(f, joint)).collect()
    }

    /// Temporal mean of `[batch, n, tokens, d]` token matrices and the
    /// sigmoid event probabilities `[batch, n]`.
    pub fn pool_and_predict<T: Real>(&self, f: &mut Forward<'_, T>, tokens: Var) -> Result<(Var, Var)> {
        let v = f.tape.mean(tokens, 2)?;
        let batch = f.tape.shape(v)[0];
        let w = f.p(self.classifier_weight);
        let b = f.p(self.classifier_bias);
        let wb = f.tape.broadcast(w, 0, batch)?;
        let prod = f.tape.mul(v, wb)?;
        let logits = f.tape.sum(prod, 2)?;
        let logits = f.tape.add_bias(logits, b)?;
        Ok((v, f.tape.sigmoid(logits)))
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, input: Var) -> Result<BackboneOutput> {
        let tokens = self.conv_stack(f, input)?;
        let joint = self.joint_representation(f, tokens)?;
        let heads = self.event_heads(f, joint)?;
        let tokens = f.tape.stack(&heads, 1)?;
        let (embeddings, event_probs) = self.pool_and_predict(f, tokens)?;
        Ok(BackboneOutput { tokens, embeddings, event_probs })
    }
}

/// Packs equally long features into a `[batch, 1, frames, mels]` tensor.
pub fn batch_features<T: Real>(features: &[&LogMelFeature]) -> Result<Tensor<T>> {
    let first = features.first().ok_or_else(|| Error::Contract("empty feature batch".into()))?;
    let (frames, bins) = (first.frames, first.mel_bins);
    let mut data = Vec::with_capacity(features.len() * frames * bins);
    for feat in features {
        if feat.frames != frames || feat.mel_bins != bins {
            return Err(Error::dim(
                "batch_features",
                format!("feature {}x{} differs from {frames}x{bins}", feat.frames, feat.mel_bins),
            ));
        }
        data.extend(feat.values.iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(vec![features.len(), 1, frames, bins], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(n: usize) -> (BackboneConfig, ParamStore<f64>, EventBackbone) {
        let cfg = BackboneConfig { channels: vec![2, 3], n_events: n, ..Default::default() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = EventBackbone::new(&cfg, &mut store, &mut rng).unwrap();
        (cfg, store, bb)
    }

    #[test]
    fn pooling_arithmetic_for_full_config() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.tokens_for(998).unwrap(), 62);
        assert!(matches!(cfg.tokens_for(15), Err(Error::Config(_))));
        assert!(BackboneConfig { node_dim: 32, ..Default::default() }.validate().is_err());
        assert!(BackboneConfig { joint_dim: 1024, ..Default::default() }.validate().is_err());
        assert!(BackboneConfig { n_events: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn token_shapes_through_four_blocks() {
        let cfg = BackboneConfig { channels: vec![2, 2, 2, 2], n_events: 3, ..Default::default() };
        let mut store = ParamStore::<f32>::new();
        let bb = EventBackbone::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut f = Forward::new(&store, Mode::Eval);
        let x = f.tape.constant(Tensor::zeros([1, 1, 998, 64]));
        let tokens = bb.conv_stack(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(tokens), &[1, 62, 2]);
        let out = bb.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(out.tokens), &[1, 3, 62, 64]);
        assert_eq!(f.tape.shape(out.embeddings), &[1, 3, 64]);
        assert_eq!(f.tape.shape(out.event_probs), &[1, 3]);
    }

    #[test]
    fn zero_input_eval_gives_zero_tokens() {
        let (_, store, bb) = small(2);
        let mut f = Forward::new(&store, Mode::Eval);
        let x = f.tape.constant(Tensor::zeros([2, 1, 16, 64]));
        let y = bb.conv_stack(&mut f, x).unwrap();
        assert!(f.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn joint_with_zero_weights_is_zero() {
        let (_, mut store, bb) = small(1);
        store.get_mut(bb.joint.weight).data_mut().fill(0.0);
        let mut f = Forward::new(&store, Mode::Eval);
        let x = f.tape.constant(Tensor::ones([1, 5, 3]));
        let y = bb.joint_representation(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(y), &[1, 5, 2048]);
        assert!(f.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_heads_agree_and_heads_are_independent() {
        let (_, mut store, bb) = small(3);
        let w0 = store.get(bb.heads[0].weight).clone();
        *store.get_mut(bb.heads[1].weight) = w0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let joint = kaiming_uniform::<f64>(&mut rng, &[1, 4, 2048], 1);
        let run = |store: &ParamStore<f64>| {
            let mut f = Forward::new(store, Mode::Eval);
            let j = f.tape.constant(joint.clone());
            let hs = bb.event_heads(&mut f, j).unwrap();
            hs.iter().map(|h| f.tape.value(*h).data().to_vec()).collect::<Vec<_>>()
        };
        let before = run(&store);
        assert_eq!(before[0], before[1]);
        store.get_mut(bb.heads[2].weight).data_mut()[7] += 1.0;
        let after = run(&store);
        assert_eq!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        assert_ne!(before[2], after[2]);
    }

    #[test]
    fn per_head_loss_only_reaches_its_head() {
        let (_, store, bb) = small(3);
        let mut f = Forward::new(&store, Mode::Train);
        let x = f.tape.constant(kaiming_uniform(&mut ChaCha8Rng::seed_from_u64(9), &[2, 1, 8, 64], 1));
        let tokens = bb.conv_stack(&mut f, x).unwrap();
        let joint = bb.joint_representation(&mut f, tokens).unwrap();
        let heads = bb.event_heads(&mut f, joint).unwrap();
        let loss = f.tape.sum_all(heads[1]);
        let (grads, bound, _) = f.finish(loss).unwrap();
        for (i, head) in bb.heads.iter().enumerate() {
            let g = bound[head.weight.0].and_then(|v| grads.get(v));
            if i == 1 {
                assert!(g.unwrap().iter().any(|&v| v != 0.0));
            } else {
                assert!(g.is_none_or(|g| g.iter().all(|&v| v == 0.0)));
            }
        }
    }

    #[test]
    fn pool_constant_tokens_and_half_probability() {
        let (_, mut store, bb) = small(2);
        store.get_mut(bb.classifier_weight).data_mut().fill(0.0);
        let mut f = Forward::new(&store, Mode::Eval);
        let tokens = f.tape.constant(Tensor::full([1, 2, 5, 64], 0.75));
        let (v, p) = bb.pool_and_predict(&mut f, tokens).unwrap();
        assert!(f.tape.value(v).data().iter().all(|&x| (x - 0.75).abs() < 1e-15));
        assert_eq!(f.tape.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn event_mse_gradient_wrt_classifier() {
        let (_, store, bb) = small(3);
        let w = store.get(bb.classifier_weight).clone();
        let b = Tensor::from_f64([3], &[0.1, -0.2, 0.3]).unwrap();
        let tokens = kaiming_uniform::<f64>(&mut ChaCha8Rng::seed_from_u64(2), &[2, 3, 4, 64], 1);
        let target = Tensor::from_f64([2, 3], &[0.9, 0.1, 0.5, 0.0, 1.0, 0.3]).unwrap();
        let report = grad_check(
            |t, v| {
                let tk = t.constant(tokens.clone());
                let m = t.mean(tk, 2)?;
                let wb = t.broadcast(v[0], 0, 2)?;
                let prod = t.mul(m, wb)?;
                let lg = t.sum(prod, 2)?;
                let lg = t.add_bias(lg, v[1])?;
                let p = t.sigmoid(lg);
                t.mse(p, &target)
            },
            &[w, b],
            1e-5,
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let (_, store, bb) = small(2);
        let x = kaiming_uniform::<f64>(&mut ChaCha8Rng::seed_from_u64(4), &[2, 1, 8, 64], 1);
        let run = || {
            let mut f = Forward::new(&store, Mode::Eval);
            let xv = f.tape.constant(x.clone());
            let out = bb.forward(&mut f, xv).unwrap();
            f.tape.value(out.embeddings).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
