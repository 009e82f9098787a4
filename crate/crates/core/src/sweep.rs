//! Repeated training over one hyperparameter axis.

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, Split};
use crate::error::{Error, Result};
use crate::ranking::select_top_n;
use crate::training::{evaluate, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Vocabulary size.
    N,
    /// Gated GCN depth.
    U,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(SweepAxis::N),
            "U" | "u" => Ok(SweepAxis::U),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}; expected n or U"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    /// Accuracy per seed, in seed order.
    pub runs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub split: Split,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains once per value and seed, scoring on the validation split (or the
/// test split when there is none). `scores` are accumulated pseudo-label
/// masses used to pick the vocabulary for each `n`.
pub fn sweep(
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[usize],
    seeds: &[u64],
    examples: &[Example],
    scores: &[f64],
    mut progress: impl FnMut(usize, u64, f64),
) -> Result<SweepTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    let split = if examples.iter().any(|e| e.split == Split::Val) { Split::Val } else { Split::Test };
    let held_out: Vec<&Example> = examples.iter().filter(|e| e.split == split).collect();
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::N => cfg.n = value,
            SweepAxis::U => cfg.u = value,
        }
        cfg.validate()?;
        let vocab = select_top_n(scores, cfg.n)?;
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            cfg.seed = seed;
            let out = train::<f32>(&cfg, examples, &vocab, |_| {})?;
            let acc = evaluate(&out.model, &held_out, &vocab)?.accuracy;
            progress(value, seed, acc);
            runs.push(acc);
        }
        let (mean, std) = mean_std(&runs);
        rows.push(SweepRow { value, runs, mean, std });
    }
    Ok(SweepTable { axis, split, seeds: seeds.to_vec(), rows })
}

impl SweepTable {
    /// Two columns, the swept value and `mean ± std` accuracy in percent.
    pub fn to_text(&self) -> String {
        let name = match self.axis {
            SweepAxis::N => "Top n",
            SweepAxis::U => "U layers",
        };
        let mut s = format!("{name:<10} Acc (%) on {} over {} seeds\n", self.split, self.seeds.len());
        for r in &self.rows {
            s.push_str(&format!("{:<10} {:.2} ± {:.2}\n", r.value, 100.0 * r.mean, 100.0 * r.std));
        }
        s
    }
}
