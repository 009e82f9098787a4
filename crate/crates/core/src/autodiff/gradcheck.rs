//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tensor::{Real, Tensor};

use super::tape::{Tape, Var};

/// Comparison result for a single parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| !(e.max_rel_error < self.tol))
    }
}

/// Magnitude below which errors are measured absolutely rather than
/// relative to the gradient size.
const REL_FLOOR: f64 = 1e-7;

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the tape gradients of the scalar `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// build the same deterministic computation every call. `sample` limits the
/// number of entries checked per parameter (evenly strided) for large
/// tensors; `None` checks every entry.
pub fn grad_check<T, F>(
    f: F,
    params: &[Tensor<T>],
    eps: f64,
    tol: f64,
    sample: Option<usize>,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item().as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.requires_grad = true;
            tape.param(&p)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.numel()]))
        .collect();

    compare_gradients(eval, params, &analytic, eps, tol, sample)
}

/// Compares supplied `analytic` gradients against central differences of
/// `eval`. Exposed separately so a corrupted adjoint can be fed in directly.
pub(crate) fn compare_gradients<T: Real>(
    eval: impl Fn(&[Tensor<T>]) -> Result<f64>,
    params: &[Tensor<T>],
    analytic: &[Vec<T>],
    eps: f64,
    tol: f64,
    sample: Option<usize>,
) -> Result<GradCheckReport> {
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let numel = p.numel();
        let step = match sample {
            Some(s) if s > 0 && numel > s => numel.div_ceil(s),
            _ => 1,
        };
        let mut entry = GradCheckEntry { param: pi, checked: 0, max_rel_error: 0.0, worst_index: 0 };
        for idx in (0..numel).step_by(step) {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = T::lit(orig.as_f64() + eps);
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = T::lit(orig.as_f64() - eps);
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[pi][idx].as_f64(), numeric);
            entry.checked += 1;
            if !(err <= entry.max_rel_error) {
                entry.max_rel_error = err;
                entry.worst_index = idx;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { entries, tol })
}
