//! Parameter storage, forward contexts and the small layers shared by the
//! backbone, the edge learner and the graph network.

use rand::Rng;

use crate::autodiff::{grad_check, BatchNormMode, GradCheckReport, Gradients, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Momentum kept on the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Backbone,
    Mel,
    /// Relation-free edge projection used when node-to-node attention is off.
    Fallback,
    Gcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    /// Learnable tensors have `requires_grad` set; running statistics do not.
    pub tensor: Tensor<T>,
}

/// Ordered, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, group, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Parameters that receive gradients, in registration order.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).requires_grad).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Folds the leaf gradients of a finished forward pass into the store.
    pub fn accumulate(&mut self, bound: &[Option<Var>], grads: &Gradients<T>) {
        for (entry, var) in self.entries.iter_mut().zip(bound) {
            if let Some(g) = var.and_then(|v| grads.get(v)) {
                entry.tensor.accumulate_grad(g);
            }
        }
    }

    /// Blends batch statistics into the running averages.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        let m = T::lit(BN_MOMENTUM);
        for u in updates {
            for (dst, src) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let t = self.get_mut(dst);
                t.data_mut().iter_mut().zip(src).for_each(|(r, &b)| *r = m * *r + (T::one() - m) * b);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), group: e.group, tensor: e.tensor.cast() })
                .collect(),
        }
    }
}

/// Running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Forward<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    stats: Vec<StatUpdate<T>>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Forward { tape: Tape::new(), store, bound: vec![None; store.len()], mode, stats: Vec::new() }
    }

    /// The tape leaf for parameter `id`, recorded on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn bound(&self) -> &[Option<Var>] {
        &self.bound
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stats
    }

    /// Runs backward from `loss`; returns the gradients plus the binding and
    /// statistics needed to update the store once this borrow ends.
    pub fn finish(mut self, loss: Var) -> Result<(Gradients<T>, Vec<Option<Var>>, Vec<StatUpdate<T>>)> {
        let grads = self.tape.backward(loss)?;
        Ok((grads, self.bound, self.stats))
    }

    pub fn into_stats(self) -> Vec<StatUpdate<T>> {
        self.stats
    }
}

/// Finite-difference check of every trainable parameter in `store` for the
/// scalar built by `f`. Report entries index into [`ParamStore::trainable`].
pub fn grad_check_store<T, F>(
    store: &ParamStore<T>,
    mode: Mode,
    f: F,
    eps: f64,
    tol: f64,
    sample: Option<usize>,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Forward<'_, T>) -> Result<Var>,
{
    let ids = store.trainable();
    let params: Vec<Tensor<T>> = ids.iter().map(|&id| store.get(id).clone()).collect();
    grad_check(
        |tape, vars| {
            let mut fw = Forward::new(store, mode);
            std::mem::swap(&mut fw.tape, tape);
            for (id, &v) in ids.iter().zip(vars) {
                fw.bound[id.0] = Some(v);
            }
            let out = f(&mut fw);
            std::mem::swap(&mut fw.tape, tape);
            out
        },
        &params,
        eps,
        tol,
        sample,
    )
}

/// Kaiming-uniform initialization with the `a = √5` convention, giving the
/// bound `1 / √fan_in`.
pub fn kaiming_uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches").with_grad()
}

/// Fully connected layer over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, kaiming_uniform(rng, &[fan_in, fan_out], fan_in));
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros([fan_out]).with_grad()));
        Linear { weight, bias }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.p(self.weight);
        let b = self.bias.map(|b| f.p(b));
        f.tape.linear(x, w, b)
    }
}

/// Batch normalization with learned affine and running statistics.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::ones([channels]).with_grad()),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros([channels]).with_grad()),
            running_mean: store.add(format!("{name}.running_mean"), group, Tensor::zeros([channels])),
            running_var: store.add(format!("{name}.running_var"), group, Tensor::ones([channels])),
        }
    }

    /// Normalizes `x` over channel axis `axis`.
    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var, axis: usize) -> Result<Var> {
        let (g, b) = (f.p(self.gamma), f.p(self.beta));
        let mode = match f.mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval,
        };
        let store = f.store;
        let running = (store.get(self.running_mean).data(), store.get(self.running_var).data());
        let (y, stats) = f.tape.batch_norm(x, g, b, axis, mode, running, T::lit(BN_EPS))?;
        if let Some((batch_mean, batch_var)) = stats {
            f.stats.push(StatUpdate { mean: self.running_mean, var: self.running_var, batch_mean, batch_var });
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", ParamGroup::Backbone, 1);
        let x = Tensor::from_f64([4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut f = Forward::new(&store, Mode::Train);
        let xv = f.tape.constant(x);
        bn.forward(&mut f, xv, 1).unwrap();
        let stats = f.into_stats();
        store.apply_stat_updates(&stats);
        // batch mean 2.5, unbiased var 5/3
        assert!((store.get(bn.running_mean).data()[0] - 0.25).abs() < 1e-12);
        assert!((store.get(bn.running_var).data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn kaiming_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = kaiming_uniform(&mut rng, &[100, 4], 100);
        assert!(t.data().iter().all(|v| v.abs() <= 0.1));
        assert!(t.requires_grad);
    }

    #[test]
    fn accumulate_skips_unbound() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let used = Linear::new(&mut store, &mut rng, "used", ParamGroup::Gcn, 3, 2, true);
        let _unused = Linear::new(&mut store, &mut rng, "unused", ParamGroup::Gcn, 3, 2, false);
        let mut f = Forward::new(&store, Mode::Eval);
        let x = f.tape.constant(Tensor::ones([1, 3]));
        let y = used.forward(&mut f, x).unwrap();
        let l = f.tape.sum_all(y);
        let (grads, bound, _) = f.finish(l).unwrap();
        store.accumulate(&bound, &grads);
        assert!(store.get(used.weight).grad.is_some());
        assert!(store.get(used.bias.unwrap()).grad.is_some());
        assert!(store.get(store.find("unused.weight").unwrap()).grad.is_none());
    }
}
