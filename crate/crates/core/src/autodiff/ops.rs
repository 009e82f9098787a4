use crate::error::{Error, Result};
use crate::tensor::{split_axis, Real, Tensor};

use super::kernels::{
    avg_pool2d_backward, avg_pool2d_forward, conv2d_backward, conv2d_forward, max_pool2d_forward,
    permute_data, softmax_forward,
};
use super::tape::{accumulate, Node, Tape, Var};

/// Batch normalization mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, tb: bool },
    AddBias { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, dims: (usize, usize, usize, usize), out_ch: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, outer: usize, ch: usize, inner: usize, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    AvgPool2 { x: Var, planes: usize, h: usize, w: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Sum { x: Var, outer: usize, len: usize, inner: usize, scale: T },
    SumAll { x: Var, scale: T },
    Concat { xs: Vec<Var>, outer: usize, widths: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Broadcast { x: Var, outer: usize, count: usize, inner: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(
            op,
            format!("operands {:?} and {:?} differ", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, data, op, &[a, b])
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, data, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "div", a, b)?;
        Ok(self.zip_with(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", self.shape(x), axis)?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let data = softmax_forward(self.value(x).data(), outer, len, inner);
        let shape = self.shape(x).to_vec();
        Ok(self.record(shape, data, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// 2-D matrix product `a·b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// 2-D matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", format!("expected matrices, got {sa:?} and {sb:?}")));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::dim("matmul", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, ka, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        Ok(self.record(vec![m, n], out, Op::MatMul { a, b, m, k: ka, n, ta, tb }, &[a, b]))
    }

    /// Batched product over matching leading axes: `[.., m, k] x [.., k, n]`,
    /// or `[.., m, k] x [.., n, k]ᵀ` when `tb`.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dim("bmm", format!("incompatible batches {sa:?} and {sb:?}")));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::dim("bmm", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &da[bi * m * k..],
                    false,
                    &db[bi * k * n..],
                    tb,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.record(shape, out, Op::BatchMatMul { a, b, batch, m, k, n, tb }, &[a, b]))
    }

    /// Adds `bias` (`[f]`) to every row of `x` (`[.., f]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let f = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [f] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not match rows of {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .chunks(f)
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.record(shape, data, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Same-padded 3×3 cross-correlation, `[b, c, h, w] * [o, c, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::dim("conv2d", format!("input {sx:?}, kernel {sw:?}: need 4-D input and [o, c, 3, 3] kernel")));
        }
        if sx[1] != sw[1] {
            return Err(Error::dim("conv2d", format!("input has {} channels, kernel expects {}", sx[1], sw[1])));
        }
        let dims = (sx[0], sx[1], sx[2], sx[3]);
        let out_ch = sw[0];
        let out = conv2d_forward(self.value(x).data(), dims, self.value(w).data(), out_ch);
        Ok(self.record(vec![sx[0], out_ch, sx[2], sx[3]], out, Op::Conv2d { x, w, dims, out_ch }, &[x, w]))
    }

    /// Batch normalization over channel axis `axis`. In train mode the batch
    /// statistics `(mean, unbiased variance)` are returned so the caller can
    /// fold them into its running averages; eval mode normalizes with
    /// `running = (mean, variance)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        mode: BatchNormMode,
        running: (&[T], &[T]),
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        check_axis("batch_norm", self.shape(x), axis)?;
        let (outer, ch, inner) = split_axis(self.shape(x), axis);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] || running.0.len() != ch || running.1.len() != ch {
            return Err(Error::dim("batch_norm", format!("affine/statistics size does not match {ch} channels")));
        }
        let count = outer * inner;
        let xs = self.value(x).data();
        let at = |o: usize, c: usize, i: usize| o * ch * inner + c * inner + i;
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateVariance);
                }
                let n = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut s = T::zero();
                    for o in 0..outer {
                        for i in 0..inner {
                            s = s + xs[at(o, c, i)];
                        }
                    }
                    mean[c] = s / n;
                    let mut q = T::zero();
                    for o in 0..outer {
                        for i in 0..inner {
                            let d = xs[at(o, c, i)] - mean[c];
                            q = q + d * d;
                        }
                    }
                    var[c] = q / n;
                }
                let unbiased = var.iter().map(|&v| v * n / (n - T::one())).collect();
                let stats = Some((mean.clone(), unbiased));
                (mean, var, stats)
            }
            BatchNormMode::Eval => (running.0.to_vec(), running.1.to_vec(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for c in 0..ch {
                for i in 0..inner {
                    let j = at(o, c, i);
                    xhat[j] = (xs[j] - mean[c]) * inv_std[c];
                    out[j] = g[c] * xhat[j] + b[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let train = mode == BatchNormMode::Train;
        let op = Op::BatchNorm { x, gamma, beta, outer, ch, inner, xhat, inv_std, train };
        Ok((self.record(shape, out, op, &[x, gamma, beta]), stats))
    }

    fn pool_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 || s[s.len() - 2] < 2 || s[s.len() - 1] < 2 {
            return Err(Error::dim(op, format!("need at least 2×2 trailing extents, got {s:?}")));
        }
        let r = s.len();
        Ok((s[..r - 2].iter().product(), s[r - 2], s[r - 1]))
    }

    fn pooled_shape(&self, x: Var) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        let r = s.len();
        s[r - 2] /= 2;
        s[r - 1] /= 2;
        s
    }

    /// 2×2 average pooling, stride 2, over the last two axes.
    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.pool_dims("avg_pool2d", x)?;
        let out = avg_pool2d_forward(self.value(x).data(), planes, h, w);
        let shape = self.pooled_shape(x);
        Ok(self.record(shape, out, Op::AvgPool2 { x, planes, h, w }, &[x]))
    }

    /// 2×2 max pooling, stride 2, over the last two axes.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.pool_dims("max_pool2d", x)?;
        let (out, argmax) = max_pool2d_forward(self.value(x).data(), planes, h, w);
        let shape = self.pooled_shape(x);
        Ok(self.record(shape, out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        check_axis(if mean { "mean" } else { "sum" }, self.shape(x), axis)?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let scale = if mean { T::one() / T::from_usize(len.max(1)).unwrap() } else { T::one() };
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &xs[(o * len + k) * inner..][..inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        out.iter_mut().for_each(|v| *v = *v * scale);
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        Ok(self.record(shape, out, Op::Sum { x, outer, len, inner, scale }, &[x]))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Sum of all entries as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.record(vec![], vec![s], Op::SumAll { x, scale: T::one() }, &[x])
    }

    /// Mean of all entries as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel().max(1)).unwrap();
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b) / n;
        self.record(vec![], vec![s], Op::SumAll { x, scale: T::one() / n }, &[x])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        for v in xs {
            let s = self.shape(*v);
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d]) {
                return Err(Error::dim("concat", format!("{s:?} incompatible with {base:?} along axis {axis}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = xs.iter().map(|v| self.shape(*v)[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &wd) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*v).data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = base;
        shape[axis] = total / inner.max(1);
        Ok(self.record(shape, out, Op::Concat { xs: xs.to_vec(), outer, widths }, xs))
    }

    /// Stacks equally shaped operands along a new axis.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let mut views = Vec::with_capacity(xs.len());
        for &v in xs {
            let mut s = self.shape(v).to_vec();
            if axis > s.len() {
                return Err(Error::dim("stack", format!("axis {axis} out of range for {s:?}")));
            }
            s.insert(axis, 1);
            views.push(self.reshape(v, s)?);
        }
        self.concat(&views, axis)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::dim("reshape", format!("cannot view {:?} as {:?}", self.shape(x), shape)));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.record(shape, data, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of the axes of {s:?}")));
        }
        let (shape, data) = permute_data(self.value(x).data(), &s, perm);
        Ok(self.record(shape, data, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Inserts a new axis of extent `count` at `axis`, repeating `x` along it.
    pub fn broadcast(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis > s.len() {
            return Err(Error::dim("broadcast", format!("axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            for _ in 0..count {
                out.extend_from_slice(&xs[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape.insert(axis, count);
        Ok(self.record(shape, out, Op::Broadcast { x, outer, count, inner }, &[x]))
    }

    /// Mean cross-entropy of `logits` (`[batch, classes]`) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", format!("logits {s:?} vs {} labels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::Contract(format!("label {bad} outside [0, {})", s[1])));
        }
        let probs = softmax_forward(self.value(logits).data(), s[0], s[1], 1);
        let mut loss = T::zero();
        let lg = self.value(logits).data();
        for (b, &l) in labels.iter().enumerate() {
            let row = &lg[b * s[1]..(b + 1) * s[1]];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, e| a + e).ln() + max;
            loss = loss + lse - row[l];
        }
        let loss = loss / T::from_usize(labels.len().max(1)).unwrap();
        Ok(self.record(vec![], vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::Contract(format!(
                "mse operands differ in shape: {:?} vs {:?}",
                self.shape(x),
                target.shape()
            )));
        }
        let t = self.constant(target.clone());
        let d = self.sub(x, t)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// `x·w + b` over the last axis of `x` (`[.., in]`), `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let fin = *s.last().ok_or_else(|| Error::dim("linear", "scalar input"))?;
        let rows = self.value(x).numel() / fin.max(1);
        let flat = self.reshape(x, [rows, fin])?;
        let y = self.matmul(flat, w)?;
        let y = match b {
            Some(b) => self.add_bias(y, b)?,
            None => y,
        };
        let mut out_shape = s;
        *out_shape.last_mut().unwrap() = self.shape(w)[1];
        self.reshape(y, out_shape)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + s);
}

impl<T: Real> Op<T> {
    pub(crate) fn backward(&self, nodes: &[Node<T>], out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: &Var| nodes[v.0].value.data();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(nodes, grads, *a, |d| add_into(d, g.iter().copied()));
                accumulate(nodes, grads, *b, |d| add_into(d, g.iter().copied()));
            }
            Op::Sub(a, b) => {
                accumulate(nodes, grads, *a, |d| add_into(d, g.iter().copied()));
                accumulate(nodes, grads, *b, |d| add_into(d, g.iter().map(|&v| -v)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                accumulate(nodes, grads, *a, |d| add_into(d, g.iter().zip(bv).map(|(&g, &y)| g * y)));
                accumulate(nodes, grads, *b, |d| add_into(d, g.iter().zip(av).map(|(&g, &x)| g * x)));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                accumulate(nodes, grads, *a, |d| add_into(d, g.iter().zip(bv).map(|(&g, &y)| g / y)));
                accumulate(nodes, grads, *b, |d| {
                    add_into(d, g.iter().zip(av).zip(bv).map(|((&g, &x), &y)| -g * x / (y * y)))
                });
            }
            Op::Scale(x, c) => accumulate(nodes, grads, *x, |d| add_into(d, g.iter().map(|&v| v * *c))),
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, |d| add_into(d, g.iter().copied())),
            Op::Relu(x) => {
                let xv = val(x);
                accumulate(nodes, grads, *x, |d| {
                    add_into(d, g.iter().zip(xv).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }))
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                accumulate(nodes, grads, *x, |d| {
                    add_into(d, g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)))
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = out.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                accumulate(nodes, grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dot = (0..len).fold(T::zero(), |s, k| s + g[at(k)] * y[at(k)]);
                            for k in 0..len {
                                d[at(k)] = d[at(k)] + y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n, ta, tb } => {
                let (m, k, n, ta, tb) = (*m, *k, *n, *ta, *tb);
                let (av, bv) = (val(a), val(b));
                accumulate(nodes, grads, *a, |d| {
                    if ta {
                        T::gemm(k, n, m, bv, tb, g, true, d, true);
                    } else {
                        T::gemm(m, n, k, g, false, bv, !tb, d, true);
                    }
                });
                accumulate(nodes, grads, *b, |d| {
                    if tb {
                        T::gemm(n, m, k, g, true, av, ta, d, true);
                    } else {
                        T::gemm(k, m, n, av, !ta, g, false, d, true);
                    }
                });
            }
            Op::BatchMatMul { a, b, batch, m, k, n, tb } => {
                let (batch, m, k, n, tb) = (*batch, *m, *k, *n, *tb);
                let (av, bv) = (val(a), val(b));
                accumulate(nodes, grads, *a, |d| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..];
                        T::gemm(m, n, k, gb, false, &bv[bi * k * n..], !tb, &mut d[bi * m * k..(bi + 1) * m * k], true);
                    }
                });
                accumulate(nodes, grads, *b, |d| {
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..];
                        let db = &mut d[bi * k * n..(bi + 1) * k * n];
                        if tb {
                            T::gemm(n, m, k, gb, true, &av[bi * m * k..], false, db, true);
                        } else {
                            T::gemm(k, m, n, &av[bi * m * k..], true, gb, false, db, true);
                        }
                    }
                });
            }
            Op::AddBias { x, bias } => {
                accumulate(nodes, grads, *x, |d| add_into(d, g.iter().copied()));
                accumulate(nodes, grads, *bias, |d| {
                    let f = d.len();
                    for row in g.chunks(f) {
                        add_into(d, row.iter().copied());
                    }
                });
            }
            Op::Conv2d { x, w, dims, out_ch } => {
                let need_dx = nodes[x.0].value.requires_grad;
                let need_dw = nodes[w.0].value.requires_grad;
                let (dx, dw) = conv2d_backward(val(x), *dims, val(w), *out_ch, g, need_dx, need_dw);
                if let Some(dx) = dx {
                    accumulate(nodes, grads, *x, |d| add_into(d, dx));
                }
                if let Some(dw) = dw {
                    accumulate(nodes, grads, *w, |d| add_into(d, dw));
                }
            }
            Op::BatchNorm { x, gamma, beta, outer, ch, inner, xhat, inv_std, train } => {
                let (outer, ch, inner) = (*outer, *ch, *inner);
                let at = |o: usize, c: usize, i: usize| o * ch * inner + c * inner + i;
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gx = vec![T::zero(); ch];
                for o in 0..outer {
                    for c in 0..ch {
                        for i in 0..inner {
                            let j = at(o, c, i);
                            sum_g[c] = sum_g[c] + g[j];
                            sum_gx[c] = sum_gx[c] + g[j] * xhat[j];
                        }
                    }
                }
                accumulate(nodes, grads, *gamma, |d| add_into(d, sum_gx.iter().copied()));
                accumulate(nodes, grads, *beta, |d| add_into(d, sum_g.iter().copied()));
                let gv = val(gamma);
                let n = T::from_usize(outer * inner).unwrap();
                accumulate(nodes, grads, *x, |d| {
                    for o in 0..outer {
                        for c in 0..ch {
                            let k = gv[c] * inv_std[c];
                            for i in 0..inner {
                                let j = at(o, c, i);
                                let v = if *train {
                                    k * (g[j] - sum_g[c] / n - xhat[j] * sum_gx[c] / n)
                                } else {
                                    k * g[j]
                                };
                                d[j] = d[j] + v;
                            }
                        }
                    }
                });
            }
            Op::AvgPool2 { x, planes, h, w } => {
                accumulate(nodes, grads, *x, |d| avg_pool2d_backward(g, *planes, *h, *w, d));
            }
            Op::MaxPool2 { x, argmax } => {
                accumulate(nodes, grads, *x, |d| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        d[src] = d[src] + gv;
                    }
                });
            }
            Op::Sum { x, outer, len, inner, scale } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                accumulate(nodes, grads, *x, |d| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..len {
                            add_into(&mut d[(o * len + k) * inner..][..inner], src.iter().map(|&v| v * *scale));
                        }
                    }
                });
            }
            Op::SumAll { x, scale } => {
                let gv = g[0] * *scale;
                accumulate(nodes, grads, *x, |d| d.iter_mut().for_each(|v| *v = *v + gv));
            }
            Op::Concat { xs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (v, &wd) in xs.iter().zip(widths) {
                    accumulate(nodes, grads, *v, |d| {
                        for o in 0..*outer {
                            add_into(&mut d[o * wd..(o + 1) * wd], g[o * total + offset..][..wd].iter().copied());
                        }
                    });
                    offset += wd;
                }
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inverse[p] = k;
                }
                let (_, back) = permute_data(g, out.shape(), &inverse);
                accumulate(nodes, grads, *x, |d| add_into(d, back));
            }
            Op::Broadcast { x, outer, count, inner } => {
                let (outer, count, inner) = (*outer, *count, *inner);
                accumulate(nodes, grads, *x, |d| {
                    for o in 0..outer {
                        for c in 0..count {
                            add_into(&mut d[o * inner..(o + 1) * inner], g[(o * count + c) * inner..][..inner].iter().copied());
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len().max(1);
                let scale = g[0] / T::from_usize(labels.len().max(1)).unwrap();
                accumulate(nodes, grads, *logits, |d| {
                    for (b, &l) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let j = b * classes + c;
                            let onehot = if c == l { T::one() } else { T::zero() };
                            d[j] = d[j] + (probs[j] - onehot) * scale;
                        }
                    }
                });
            }
        }
    }
}
