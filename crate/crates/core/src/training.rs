//! Joint event/scene objective, AdamW, the training loop and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{batch_features, BackboneConfig};
use crate::dataset::{Example, Split};
use crate::edges::MelFlags;
use crate::error::{Error, Result};
use crate::model::{ErglModel, ModelConfig, N_SCENES};
use crate::nn::{Forward, Mode, ParamGroup, ParamStore};
use crate::ranking::{project_labels, EventVocabulary};
use crate::tensor::{Real, Tensor};

/// Mean squared error between event probabilities and soft targets.
pub fn event_loss<T: Real>(tape: &mut Tape<T>, probs: Var, targets: &Tensor<T>) -> Result<Var> {
    tape.mse(probs, targets)
}

/// Mean cross-entropy of scene logits against class indices.
pub fn scene_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

pub fn combined_loss<T: Real>(tape: &mut Tape<T>, l_event: Var, l_scene: Var, lambda1: f64, lambda2: f64) -> Result<Var> {
    let a = tape.scale(l_event, T::lit(lambda1));
    let b = tape.scale(l_scene, T::lit(lambda2));
    tape.add(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments per parameter, empty for untrained entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |e: &crate::nn::ParamEntry<T>| if e.tensor.requires_grad { vec![T::zero(); e.tensor.numel()] } else { Vec::new() };
        AdamState { step: 0, m: store.entries().iter().map(zeros).collect(), v: store.entries().iter().map(zeros).collect() }
    }
}

/// One decoupled-weight-decay Adam update from the gradients held in
/// `store`. Parameters in `frozen` groups are left untouched.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamWConfig, frozen: &[ParamGroup]) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = T::lit(1.0 - cfg.lr * cfg.weight_decay);
    let (b1t, b2t, lr, eps) = (T::lit(b1), T::lit(b2), T::lit(cfg.lr), T::lit(cfg.eps));
    let (c1, c2) = (T::lit(c1), T::lit(c2));
    for (k, entry) in store.entries_mut().iter_mut().enumerate() {
        if !entry.tensor.requires_grad || frozen.contains(&entry.group) {
            continue;
        }
        let grad = entry.tensor.grad.clone().unwrap_or_else(|| vec![T::zero(); entry.tensor.numel()]);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, p) in entry.tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1t * m[i] + (T::one() - b1t) * g;
            v[i] = b2t * v[i] + (T::one() - b2t) * g * g;
            let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            *p = *p * decay - step;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Vocabulary size.
    pub n: usize,
    /// Gated GCN depth.
    pub u: usize,
    pub use_ncm: bool,
    pub use_nnm: bool,
    pub seed: u64,
    pub channels: Vec<usize>,
    pub optimizer: AdamWConfig,
    /// Parameter groups excluded from updates.
    pub frozen: Vec<ParamGroup>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            batch_size: 16,
            epochs: 50,
            n: 25,
            u: 2,
            use_ncm: true,
            use_nnm: true,
            seed: 0,
            channels: BackboneConfig::default().channels,
            optimizer: AdamWConfig::default(),
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("lr, batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return Err(Error::Config("optimizer betas must be in [0, 1), eps positive, weight decay non-negative".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig { channels: self.channels.clone(), n_events: self.n, ..Default::default() },
            mel: MelFlags { use_ncm: self.use_ncm, use_nnm: self.use_nnm },
            gcn_layers: self.u,
            n_scenes: N_SCENES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub l_event: f64,
    pub l_scene: f64,
    pub l_total: f64,
    /// Running train-mode accuracy over the epoch's batches.
    pub scene_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub wall_time: f64,
}

impl EpochReport {
    /// The report without its timing, for run-to-run comparison.
    pub fn timeless(&self) -> EpochReport {
        EpochReport { wall_time: 0.0, ..self.clone() }
    }
}

pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the best validation accuracy (the
    /// last epoch when there is no validation split).
    pub model: ErglModel<T>,
    pub best_epoch: usize,
    pub optimizer: AdamState<T>,
    pub reports: Vec<EpochReport>,
}

/// Shuffled batches; a trailing single example joins the previous batch so
/// train-mode normalization always sees at least two clips.
pub fn batch_order(len: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

fn targets<T: Real>(examples: &[&Example], vocab: &EventVocabulary) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(examples.len() * vocab.n());
    for ex in examples {
        let labels = ex.labels.as_ref().ok_or_else(|| Error::Contract(format!("training clip {} has no pseudo labels", ex.clip_id)))?;
        data.extend(project_labels(labels, vocab).into_iter().map(|p| T::lit(p as f64)));
    }
    Tensor::new(vec![examples.len(), vocab.n()], data)
}

fn argmax<T: Real>(row: &[T]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &z)| if z > row[best] { i } else { best })
}

/// Trains a fresh model from `config.seed`. `on_epoch` sees each report as
/// soon as the epoch finishes.
pub fn train<T: Real>(
    config: &TrainConfig,
    examples: &[Example],
    vocab: &EventVocabulary,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if vocab.n() != config.n {
        return Err(Error::Compatibility(format!("vocabulary has {} events, config asks for {}", vocab.n(), config.n)));
    }
    let train_set: Vec<&Example> = examples.iter().filter(|e| e.split == Split::Train).collect();
    let val_set: Vec<&Example> = examples.iter().filter(|e| e.split == Split::Val).collect();
    if train_set.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let mut model = ErglModel::<T>::new(&config.model_config(), config.seed)?;
    let mut opt = AdamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_ba7c);
    let mut reports = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let (mut sum_event, mut sum_scene, mut correct) = (0.0, 0.0, 0usize);
        for (b, batch) in batch_order(train_set.len(), config.batch_size, &mut rng).iter().enumerate() {
            let clips: Vec<&Example> = batch.iter().map(|&i| train_set[i]).collect();
            let feats: Vec<_> = clips.iter().map(|e| &e.features).collect();
            let input = batch_features::<T>(&feats)?;
            let target = targets::<T>(&clips, vocab)?;
            let labels: Vec<usize> = clips.iter().map(|e| e.scene).collect();

            let mut f = Forward::new(&model.store, Mode::Train);
            let x = f.tape.constant(input);
            let out = model.forward(&mut f, x)?;
            let le = event_loss(&mut f.tape, out.backbone.event_probs, &target)?;
            let ls = scene_loss(&mut f.tape, out.logits, &labels)?;
            let loss = combined_loss(&mut f.tape, le, ls, config.lambda1, config.lambda2)?;
            let (le_v, ls_v) = (f.tape.value(le).item().as_f64(), f.tape.value(ls).item().as_f64());
            if !(le_v.is_finite() && ls_v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {b} (event {le_v}, scene {ls_v})")));
            }
            let k = model.config.n_scenes;
            let logits = f.tape.value(out.logits).data().to_vec();
            correct += labels.iter().enumerate().filter(|&(i, &l)| argmax(&logits[i * k..(i + 1) * k]) == l).count();
            sum_event += le_v * clips.len() as f64;
            sum_scene += ls_v * clips.len() as f64;

            let (grads, bound, stats) = f.finish(loss)?;
            model.store.zero_grad();
            model.store.accumulate(&bound, &grads);
            adamw_step(&mut model.store, &mut opt, &config.optimizer, &config.frozen);
            model.store.apply_stat_updates(&stats);
        }
        let count = train_set.len() as f64;
        let (l_event, l_scene) = (sum_event / count, sum_scene / count);
        let val_accuracy = if val_set.is_empty() { None } else { Some(evaluate(&model, &val_set, vocab)?.accuracy) };
        let report = EpochReport {
            epoch,
            l_event,
            l_scene,
            l_total: config.lambda1 * l_event + config.lambda2 * l_scene,
            scene_accuracy: correct as f64 / count,
            val_accuracy,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        reports.push(report);
        let score = val_accuracy.unwrap_or(f64::NEG_INFINITY);
        if val_accuracy.is_none() || best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.store.clone()));
        }
    }
    model.store.zero_grad();
    let (_, best_epoch, mut store) = best.expect("at least one epoch");
    store.zero_grad();
    model.store = store;
    Ok(TrainOutcome { model, best_epoch, optimizer: opt, reports })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Rows are true scenes, columns predicted scenes.
    pub confusion: Vec<Vec<u64>>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn from_predictions(predictions: Vec<usize>, labels: &[usize], n_scenes: usize) -> Result<Self> {
        if predictions.len() != labels.len() || predictions.is_empty() {
            return Err(Error::Contract("need one prediction per label and at least one clip".into()));
        }
        let mut confusion = vec![vec![0u64; n_scenes]; n_scenes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= n_scenes || l >= n_scenes {
                return Err(Error::Contract(format!("scene index outside 0..{n_scenes}")));
            }
            confusion[l][p] += 1;
        }
        let trace: u64 = (0..n_scenes).map(|i| confusion[i][i]).sum();
        Ok(Evaluation { accuracy: trace as f64 / labels.len() as f64, confusion, predictions })
    }
}

/// Clips evaluated per forward pass.
const EVAL_BATCH: usize = 32;

/// Eval-mode accuracy and confusion over `examples`.
pub fn evaluate<T: Real>(model: &ErglModel<T>, examples: &[&Example], vocab: &EventVocabulary) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let mut predictions = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let feats: Vec<_> = chunk.iter().map(|e| &e.features).collect();
        predictions.extend(model.infer(&feats, &vocab.event_ids)?.into_iter().map(|c| c.scene.predicted_scene));
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.scene).collect();
    Evaluation::from_predictions(predictions, &labels, model.config.n_scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::nn::ParamGroup;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn event_loss_values() {
        let mut t = Tape::<f64>::new();
        let p = t.constant(t64(&[1, 2], &[1.0, 0.0]));
        let l = event_loss(&mut t, p, &t64(&[1, 2], &[0.0, 1.0])).unwrap();
        assert_eq!(t.value(l).item(), 1.0);
        let same = event_loss(&mut t, p, &t64(&[1, 2], &[1.0, 0.0])).unwrap();
        assert_eq!(t.value(same).item(), 0.0);
        assert!(matches!(event_loss(&mut t, p, &t64(&[1, 3], &[0.0; 3])), Err(Error::Contract(_))));
    }

    #[test]
    fn scene_loss_values() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::zeros([1, 10]));
        let l = scene_loss(&mut t, z, &[3]).unwrap();
        assert!((t.value(l).item() - 10f64.ln()).abs() < 1e-12);
        let mut big = vec![0.0; 10];
        big[2] = 100.0;
        let z = t.constant(t64(&[1, 10], &big));
        let l = scene_loss(&mut t, z, &[2]).unwrap();
        assert!(t.value(l).item() < 1e-30);
        assert!(matches!(scene_loss(&mut t, z, &[10]), Err(Error::Contract(_))));
    }

    #[test]
    fn combined_loss_weights() {
        let mut t = Tape::<f64>::new();
        let (a, b) = (t.constant(Tensor::scalar(1.0)), t.constant(Tensor::scalar(1.0)));
        let l = combined_loss(&mut t, a, b, 0.5, 2.0).unwrap();
        assert_eq!(t.value(l).item(), 2.5);
        for (l1, l2) in [(0.0, 1.0), (3.0, 0.25), (1.5, 4.0)] {
            let (a, b) = (t.constant(Tensor::scalar(0.7)), t.constant(Tensor::scalar(1.9)));
            let l = combined_loss(&mut t, a, b, l1, l2).unwrap();
            assert!((t.value(l).item() - (l1 * 0.7 + l2 * 1.9)).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients() {
        let target = t64(&[2, 3], &[0.1, 0.9, 0.5, 0.0, 1.0, 0.3]);
        let params = vec![t64(&[2, 3], &[0.2, 0.4, 0.6, 0.1, 0.7, 0.9]), t64(&[2, 4], &[0.3, -1.0, 2.0, 0.5, 0.0, 0.1, -0.2, 1.4])];
        let report = grad_check(
            |t, v| {
                let le = event_loss(t, v[0], &target)?;
                let ls = scene_loss(t, v[1], &[2, 0])?;
                combined_loss(t, le, ls, 0.7, 1.3)
            },
            &params,
            1e-5,
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    fn store_with(values: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Gcn, Tensor::from_f64([values.len()], &values.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap().with_grad());
        s
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let mut s = store_with(&[0.5, -1.5]);
        let mut st = AdamState::new(&s);
        s.entries_mut()[0].tensor.grad = Some(vec![0.0, 0.0]);
        adamw_step(&mut s, &mut st, &AdamWConfig { weight_decay: 0.0, ..Default::default() }, &[]);
        assert_eq!(s.entries()[0].tensor.data(), &[0.5, -1.5]);
    }

    #[test]
    fn adamw_decay_only_scales() {
        let mut s = store_with(&[0.5, -1.5]);
        let mut st = AdamState::new(&s);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.2, ..Default::default() };
        adamw_step(&mut s, &mut st, &cfg, &[]);
        assert_eq!(s.entries()[0].tensor.data(), &[0.5 * 0.98f32, -1.5 * 0.98f32]);
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let mut s = store_with(&[1.0, 1.0, 1.0]);
        let g = [0.3f32, -2.0, 1e-9];
        s.entries_mut()[0].tensor.grad = Some(g.to_vec());
        let mut st = AdamState::new(&s);
        let cfg = AdamWConfig { lr: 1e-3, weight_decay: 0.01, ..Default::default() };
        adamw_step(&mut s, &mut st, &cfg, &[]);
        // bias-corrected first moment is g and second is g², so the step is
        // lr·g/(|g|+eps) after scaling by (1 − lr·wd)
        for (p, g) in s.entries()[0].tensor.data().iter().zip(g) {
            let g = g as f64;
            let expected = 1.0 * (1.0 - 1e-5) - 1e-3 * g / (g.abs() + 1e-8);
            assert!((*p as f64 - expected).abs() < 1e-6, "{p} vs {expected}");
        }
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let mut s = store_with(&[1.0]);
        s.add("b", ParamGroup::Backbone, Tensor::from_f64([1], &[1.0]).unwrap().with_grad());
        for e in s.entries_mut() {
            e.tensor.grad = Some(vec![1.0]);
        }
        let mut st = AdamState::new(&s);
        adamw_step(&mut s, &mut st, &AdamWConfig::default(), &[ParamGroup::Gcn]);
        assert_eq!(s.entries()[0].tensor.data(), &[1.0]);
        assert_ne!(s.entries()[1].tensor.data(), &[1.0]);
    }

    #[test]
    fn batches_cover_everything_without_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for len in 1..40 {
            for bs in 1..10 {
                let batches = batch_order(len, bs, &mut rng);
                let mut all: Vec<usize> = batches.concat();
                all.sort_unstable();
                assert_eq!(all, (0..len).collect::<Vec<_>>());
                if len > 1 && bs > 1 {
                    assert!(batches.iter().all(|b| b.len() >= 2), "len {len} bs {bs}");
                }
            }
        }
    }

    #[test]
    fn confusion_identities() {
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let perfect = Evaluation::from_predictions(labels.clone(), &labels, 10).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert!((0..10).all(|i| perfect.confusion[i][i] == 2));
        let skewed: Vec<usize> = (0..20).map(|i| if i < 14 { 3 } else { i % 10 }).collect();
        let constant = Evaluation::from_predictions(vec![3; 20], &skewed, 10).unwrap();
        assert_eq!(constant.accuracy, 14.0 / 20.0);
        for (i, row) in constant.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<u64>(), skewed.iter().filter(|&&l| l == i).count() as u64);
        }
        assert!(Evaluation::from_predictions(vec![], &[], 10).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { u: 0, ..Default::default() }.validate().is_err());
        let mut c = TrainConfig::default();
        c.optimizer.lr = 0.0;
        assert!(c.validate().is_err());
    }
}
