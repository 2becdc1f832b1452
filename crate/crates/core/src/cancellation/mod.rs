//! Per-group cancellation effect: how much of the per-sample gradient mass in
//! a parameter group survives as actual movement of its weights.
//!
//! `C(w) = sum_t |w(t+1) - w(t)| / sum_{x in B(t)} |dl(x)/dw|`

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mixture_batch, stream, Batch, DomainCorpus};
use crate::doge::DomainWeights;
use crate::error::{DogeError, Result};
use crate::model::{LrSchedule, Model, UpdateRule};
use crate::tensor::FlatGradient;

/// Smallest denominator used when a group saw no gradient in a step.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// A model that can report gradients for single samples and take plain SGD
/// steps on named parameter groups.
pub trait PerSampleModel: Clone {
    type Sample: Sync;

    fn group_names(&self) -> Vec<String>;
    fn group_values(&self) -> Vec<&[f64]>;
    /// Gradient of the loss on one sample, one vector per group.
    fn sample_gradient(&self, sample: &Self::Sample) -> Result<Vec<Vec<f64>>>;
    /// `w -= eta * direction` on every group.
    fn sgd_step(&mut self, direction: &[Vec<f64>], eta: f64) -> Result<()>;
}

impl PerSampleModel for Model {
    type Sample = Batch;

    fn group_names(&self) -> Vec<String> {
        self.groups().iter().map(|g| g.name.clone()).collect()
    }

    fn group_values(&self) -> Vec<&[f64]> {
        self.groups().iter().map(|g| g.values.as_slice()).collect()
    }

    fn sample_gradient(&self, sample: &Batch) -> Result<Vec<Vec<f64>>> {
        Ok(self.gradients(sample)?.1)
    }

    fn sgd_step(&mut self, direction: &[Vec<f64>], eta: f64) -> Result<()> {
        let d = FlatGradient::from_groups(direction, None)?;
        self.apply_update(&d, eta)?;
        Ok(())
    }
}

/// How per-sample gradients are aggregated in the denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Sum over samples of each sample's gradient norm.
    #[default]
    SumOfNorms,
    /// Norm of the summed gradient.
    NormOfSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CancellationScores {
    pub names: Vec<String>,
    pub sizes: Vec<usize>,
    pub scores: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs `steps` plain-SGD steps on a private copy of `model`, stepping along
/// the sum of per-sample gradients of `samples(t)`, and accumulates each
/// group's ratio of realized movement to gradient mass.
pub fn cancellation_scores<M: PerSampleModel + Sync>(
    model: &M,
    steps: usize,
    mut samples: impl FnMut(usize) -> Result<Vec<M::Sample>>,
    lr: impl Fn(usize) -> f64,
    denominator: Denominator,
) -> Result<CancellationScores> {
    if steps == 0 {
        return Err(DogeError::config("cancellation measurement needs at least one step"));
    }
    let mut work = model.clone();
    let names = work.group_names();
    let sizes: Vec<usize> = work.group_values().iter().map(|v| v.len()).collect();
    let n = names.len();
    let mut scores = vec![0.0; n];
    let mut mass = vec![0.0; n];
    let mut batch_size = 0;
    for t in 0..steps {
        let batch = samples(t)?;
        if batch.is_empty() {
            return Err(DogeError::contract(format!("empty sample set at step {}", t + 1)));
        }
        batch_size = batch.len();
        let grads: Vec<Vec<Vec<f64>>> = batch
            .par_iter()
            .map(|s| work.sample_gradient(s))
            .collect::<Result<_>>()?;
        let mut total: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let mut denom = vec![0.0; n];
        for sample in &grads {
            for (g, part) in sample.iter().enumerate() {
                if part.len() != sizes[g] {
                    return Err(DogeError::contract(format!("sample gradient for group {g} has the wrong length")));
                }
                for (acc, x) in total[g].iter_mut().zip(part) {
                    *acc += x;
                }
                if denominator == Denominator::SumOfNorms {
                    denom[g] += norm(part);
                }
            }
        }
        if denominator == Denominator::NormOfSum {
            for (d, tg) in denom.iter_mut().zip(&total) {
                *d = norm(tg);
            }
        }
        let before: Vec<Vec<f64>> = work.group_values().iter().map(|v| v.to_vec()).collect();
        work.sgd_step(&total, lr(t))?;
        for (g, after) in work.group_values().iter().enumerate() {
            let moved = before[g]
                .iter()
                .zip(after.iter())
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt();
            scores[g] += moved / denom[g].max(DENOMINATOR_FLOOR);
            mass[g] += denom[g];
        }
    }
    for (g, m) in mass.iter().enumerate() {
        if *m == 0.0 {
            log::warn!("group '{}' received no gradient during cancellation measurement", names[g]);
            scores[g] = 0.0;
        }
    }
    Ok(CancellationScores {
        names,
        sizes,
        scores,
        steps,
        batch_size,
    })
}

/// Measures cancellation on a copy of `model` trained with plain unclipped
/// SGD on uniform-mixture batches of `b` sequences. The caller's model is not
/// touched.
pub fn measure_cancellation(
    model: &Model,
    corpus: &DomainCorpus,
    steps: usize,
    b: usize,
    lr: &LrSchedule,
    seed: u64,
) -> Result<CancellationScores> {
    let work = model.clone().with_update_rule(UpdateRule::sgd().unclipped());
    let uniform = DomainWeights::uniform(corpus.k());
    cancellation_scores(
        &work,
        steps,
        |t| {
            let batch = mixture_batch(corpus, uniform.as_slice(), b, &mut stream(seed, "cancellation", t as u64))?;
            Ok((0..batch.rows()).map(|r| batch.select(r)).collect())
        },
        |t| lr.at(t, steps),
        Denominator::SumOfNorms,
    )
}

impl CancellationScores {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["group", "score", "size"])?;
        for ((name, score), size) in self.names.iter().zip(&self.scores).zip(&self.sizes) {
            w.write_record([name.clone(), score.to_string(), size.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `group,score,size` rows. Step count and batch size are not stored
    /// and come back as zero.
    pub fn read_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            group: String,
            score: f64,
            size: usize,
        }
        let mut out = CancellationScores {
            names: Vec::new(),
            sizes: Vec::new(),
            scores: Vec::new(),
            steps: 0,
            batch_size: 0,
        };
        for row in csv::Reader::from_path(path)?.deserialize() {
            let row: Row = row?;
            if !(row.score >= 0.0 && row.score.is_finite()) {
                return Err(DogeError::format(path, format!("bad score for '{}'", row.group)));
            }
            out.names.push(row.group);
            out.scores.push(row.score);
            out.sizes.push(row.size);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Low,
    High,
}

/// A selection rule such as `low30` or `high10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Strategy {
    pub mode: SelectionMode,
    pub k: usize,
}

impl std::str::FromStr for Strategy {
    type Err = DogeError;

    fn from_str(s: &str) -> Result<Self> {
        let (mode, rest) = if let Some(r) = s.strip_prefix("low") {
            (SelectionMode::Low, r)
        } else if let Some(r) = s.strip_prefix("high") {
            (SelectionMode::High, r)
        } else {
            return Err(DogeError::config(format!("mask strategy '{s}' must look like low30 or high10")));
        };
        let k: usize = rest
            .parse()
            .map_err(|_| DogeError::config(format!("mask strategy '{s}' has no group count")))?;
        if k == 0 {
            return Err(DogeError::config("mask strategy must select at least one group"));
        }
        Ok(Strategy { mode, k })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mode = match self.mode {
            SelectionMode::Low => "low",
            SelectionMode::High => "high",
        };
        write!(f, "{mode}{}", self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    /// Selected group ids in ascending order.
    pub groups: Vec<usize>,
    pub strategy: Strategy,
}

impl SelectionMask {
    /// Share of parameters covered by the mask.
    pub fn parameter_fraction(&self, sizes: &[usize]) -> f64 {
        let total: usize = sizes.iter().sum();
        let kept: usize = self.groups.iter().map(|&g| sizes[g]).sum();
        kept as f64 / total as f64
    }

    /// Share of the score inner products avoided by the mask.
    pub fn compute_saved(&self, sizes: &[usize]) -> f64 {
        1.0 - self.parameter_fraction(sizes)
    }
}

/// Picks the `k` groups with the lowest (or highest) scores; ties go to the
/// alphabetically first name.
pub fn select_groups(scores: &CancellationScores, k: usize, mode: SelectionMode) -> SelectionMask {
    let mut order: Vec<usize> = (0..scores.scores.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = match mode {
            SelectionMode::Low => scores.scores[a].total_cmp(&scores.scores[b]),
            SelectionMode::High => scores.scores[b].total_cmp(&scores.scores[a]),
        };
        by_score.then_with(|| scores.names[a].cmp(&scores.names[b]))
    });
    let mut groups: Vec<usize> = order.into_iter().take(k).collect();
    groups.sort_unstable();
    SelectionMask {
        groups,
        strategy: Strategy { mode, k },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(pairs: &[(&str, f64)]) -> CancellationScores {
        CancellationScores {
            names: pairs.iter().map(|p| p.0.to_string()).collect(),
            sizes: vec![1; pairs.len()],
            scores: pairs.iter().map(|p| p.1).collect(),
            steps: 1,
            batch_size: 1,
        }
    }

    #[test]
    fn sort_semantics() {
        let s = scores(&[("a", 1.0), ("b", 2.0), ("c", 3.0)]);
        assert_eq!(select_groups(&s, 2, SelectionMode::Low).groups, vec![0, 1]);
        assert_eq!(select_groups(&s, 2, SelectionMode::High).groups, vec![1, 2]);
        assert_eq!(select_groups(&s, 9, SelectionMode::Low).groups, vec![0, 1, 2]);
    }

    #[test]
    fn ties_break_by_name() {
        let s = scores(&[("zeta", 1.0), ("alpha", 1.0), ("mid", 1.0)]);
        assert_eq!(select_groups(&s, 2, SelectionMode::Low).groups, vec![1, 2]);
        assert_eq!(select_groups(&s, 2, SelectionMode::High).groups, vec![1, 2]);
    }

    #[test]
    fn strategy_names() {
        let s: Strategy = "low30".parse().unwrap();
        assert_eq!(s, Strategy { mode: SelectionMode::Low, k: 30 });
        assert_eq!(s.to_string(), "low30");
        assert_eq!("high10".parse::<Strategy>().unwrap().mode, SelectionMode::High);
        assert!("mid5".parse::<Strategy>().is_err());
        assert!("low".parse::<Strategy>().is_err());
        assert!("low0".parse::<Strategy>().is_err());
    }

    #[test]
    fn compute_fraction_follows_sizes() {
        let mask = SelectionMask {
            groups: vec![1],
            strategy: Strategy { mode: SelectionMode::Low, k: 1 },
        };
        assert_eq!(mask.parameter_fraction(&[30, 10]), 0.25);
        assert_eq!(mask.compute_saved(&[30, 10]), 0.75);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let s = scores(&[("a", 0.125), ("b", 1.0 / 3.0)]);
        s.write_csv(&p).unwrap();
        let back = CancellationScores::read_csv(&p).unwrap();
        assert_eq!(back.names, s.names);
        assert_eq!(back.scores, s.scores);
        assert_eq!(back.sizes, s.sizes);
    }
}
