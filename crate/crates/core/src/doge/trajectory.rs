use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::scores::ScoreTarget;
use super::weights::DomainWeights;
use crate::error::{DogeError, Result};

/// State after one proxy step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    /// 1-based proxy step.
    pub step: usize,
    pub alpha: DomainWeights,
    pub scores: Vec<f64>,
    /// Per-domain proxy loss on the batches used for this step.
    pub losses: Vec<f64>,
}

/// The sequence of domain weights `alpha^1..alpha^T` produced by a proxy run.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTrajectory {
    pub domains: Vec<String>,
    pub target: ScoreTarget,
    pub normalized_scores: bool,
    pub steps: Vec<TrajectoryStep>,
}

/// One curriculum stage covering proxy steps `start_step..=end_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub start_step: usize,
    pub end_step: usize,
    pub weights: DomainWeights,
}

impl WeightTrajectory {
    pub fn new(domains: Vec<String>, target: ScoreTarget, normalized_scores: bool) -> Self {
        WeightTrajectory {
            domains,
            target,
            normalized_scores,
            steps: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.domains.len()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, step: TrajectoryStep) -> Result<()> {
        let k = self.k();
        if step.alpha.k() != k || step.scores.len() != k || step.losses.len() != k {
            return Err(DogeError::contract(format!("trajectory step with the wrong number of domains (want {k})")));
        }
        self.steps.push(step);
        Ok(())
    }

    /// Mean of `alpha^t` over all recorded steps.
    pub fn average(&self) -> Result<DomainWeights> {
        average_weights(self.steps.iter().map(|s| &s.alpha))
    }

    /// Running mean after each step.
    pub fn cumulative_averages(&self) -> Vec<Vec<f64>> {
        let mut acc = vec![0.0; self.k()];
        self.steps
            .iter()
            .enumerate()
            .map(|(n, s)| {
                for (a, w) in acc.iter_mut().zip(s.alpha.as_slice()) {
                    *a += w;
                }
                acc.iter().map(|a| a / (n + 1) as f64).collect()
            })
            .collect()
    }

    /// Splits the trajectory into `stages` consecutive runs of
    /// `floor(T / stages)` steps (the last one takes the remainder) and
    /// averages each.
    pub fn stage_average(&self, stages: usize) -> Result<Vec<Stage>> {
        let t = self.len();
        if stages == 0 {
            return Err(DogeError::config("curriculum needs at least one stage"));
        }
        if stages > t {
            return Err(DogeError::config(format!("{stages} stages requested for {t} recorded steps")));
        }
        let per = t / stages;
        (0..stages)
            .map(|s| {
                let lo = s * per;
                let hi = if s + 1 == stages { t } else { lo + per };
                let slice = &self.steps[lo..hi];
                Ok(Stage {
                    start_step: slice[0].step,
                    end_step: slice[slice.len() - 1].step,
                    weights: average_weights(slice.iter().map(|x| &x.alpha))?,
                })
            })
            .collect()
    }

    /// Writes `step,domain,alpha,score,loss` rows for the first step, every
    /// `stride`-th step and the last step.
    pub fn write_csv(&self, path: &Path, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "domain", "alpha", "score", "loss"])?;
        let last = self.steps.len().saturating_sub(1);
        for (n, s) in self.steps.iter().enumerate() {
            if n % stride != 0 && n != last {
                continue;
            }
            for (i, name) in self.domains.iter().enumerate() {
                w.write_record([
                    s.step.to_string(),
                    name.clone(),
                    s.alpha[i].to_string(),
                    s.scores[i].to_string(),
                    s.losses[i].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a file written by [`WeightTrajectory::write_csv`]. Domain order
    /// follows first appearance.
    pub fn read_csv(path: &Path, target: ScoreTarget, normalized_scores: bool) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            step: usize,
            domain: String,
            alpha: f64,
            score: f64,
            loss: f64,
        }
        let mut rdr = csv::Reader::from_path(path)?;
        let mut by_step: IndexMap<usize, Vec<Row>> = IndexMap::new();
        let mut domains: Vec<String> = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            if !domains.contains(&row.domain) {
                domains.push(row.domain.clone());
            }
            by_step.entry(row.step).or_default().push(row);
        }
        let mut traj = WeightTrajectory::new(domains, target, normalized_scores);
        for (step, rows) in by_step {
            let k = traj.k();
            let (mut alpha, mut scores, mut losses) = (vec![f64::NAN; k], vec![f64::NAN; k], vec![f64::NAN; k]);
            for r in rows {
                let i = traj.domains.iter().position(|d| *d == r.domain).expect("domain registered");
                alpha[i] = r.alpha;
                scores[i] = r.score;
                losses[i] = r.loss;
            }
            let alpha = DomainWeights::new(alpha)
                .map_err(|e| DogeError::format(path, format!("step {step}: {e}")))?;
            traj.push(TrajectoryStep {
                step,
                alpha,
                scores,
                losses,
            })?;
        }
        Ok(traj)
    }
}

/// Arithmetic mean of a non-empty sequence of simplex points.
pub fn average_weights<'a>(weights: impl IntoIterator<Item = &'a DomainWeights>) -> Result<DomainWeights> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for w in weights {
        if n == 0 {
            acc = vec![0.0; w.k()];
        } else if w.k() != acc.len() {
            return Err(DogeError::contract("averaging weights of different lengths"));
        }
        for (a, x) in acc.iter_mut().zip(w.as_slice()) {
            *a += x;
        }
        n += 1;
    }
    if n == 0 {
        return Err(DogeError::contract("cannot average an empty trajectory"));
    }
    DomainWeights::normalized(acc.into_iter().map(|a| a / n as f64).collect())
}

/// Stage-wise sampling weights for base training. Proxy step `s` of `T`
/// corresponds to base steps `[s * S / T, (s + 1) * S / T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Curriculum {
    pub proxy_steps: usize,
    pub stages: Vec<Stage>,
}

impl Curriculum {
    pub fn new(proxy_steps: usize, stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() || proxy_steps == 0 {
            return Err(DogeError::config("empty curriculum"));
        }
        if stages[0].start_step != 1 || stages.last().map(|s| s.end_step) != Some(proxy_steps) {
            return Err(DogeError::config(format!("curriculum stages must cover proxy steps 1..={proxy_steps}")));
        }
        if stages.windows(2).any(|w| w[1].start_step != w[0].end_step + 1) {
            return Err(DogeError::config("curriculum stages must be contiguous"));
        }
        Ok(Curriculum { proxy_steps, stages })
    }

    pub fn from_trajectory(traj: &WeightTrajectory, stages: usize) -> Result<Self> {
        Curriculum::new(traj.len(), traj.stage_average(stages)?)
    }

    /// Weights for 0-based base step `step` of `total`.
    pub fn weights_at(&self, step: usize, total: usize) -> &DomainWeights {
        let proxy = (step as u128 * self.proxy_steps as u128 / total.max(1) as u128) as usize + 1;
        let i = self.stages.partition_point(|s| s.end_step < proxy).min(self.stages.len() - 1);
        &self.stages[i].weights
    }

    /// Expected number of sequences per domain over `total` base steps of
    /// `batch` sequences.
    pub fn expected_sequences(&self, total: usize, batch: usize) -> Vec<f64> {
        let k = self.stages[0].weights.k();
        let mut out = vec![0.0; k];
        for step in 0..total {
            for (o, w) in out.iter_mut().zip(self.weights_at(step, total).as_slice()) {
                *o += batch as f64 * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageEntry {
    start_step: usize,
    end_step: usize,
    weights: IndexMap<String, f64>,
}

/// On-disk form: `{"weights": {name: w}, "schedule": [{start_step, end_step, weights}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub weights: IndexMap<String, f64>,
    #[serde(default)]
    schedule: Vec<StageEntry>,
}

fn named(names: &[String], w: &DomainWeights) -> IndexMap<String, f64> {
    names.iter().cloned().zip(w.as_slice().iter().copied()).collect()
}

impl WeightsFile {
    pub fn new(names: &[String], weights: &DomainWeights, schedule: &[Stage]) -> Result<Self> {
        if names.len() != weights.k() || schedule.iter().any(|s| s.weights.k() != names.len()) {
            return Err(DogeError::contract("domain names and weights differ in length"));
        }
        Ok(WeightsFile {
            weights: named(names, weights),
            schedule: schedule
                .iter()
                .map(|s| StageEntry {
                    start_step: s.start_step,
                    end_step: s.end_step,
                    weights: named(names, &s.weights),
                })
                .collect(),
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.weights.keys().cloned().collect()
    }

    /// Weights in the order of `names`; every name must be present.
    pub fn weights_for(&self, names: &[String]) -> Result<DomainWeights> {
        pick(&self.weights, names)
    }

    pub fn stages_for(&self, names: &[String]) -> Result<Vec<Stage>> {
        self.schedule
            .iter()
            .map(|e| {
                Ok(Stage {
                    start_step: e.start_step,
                    end_step: e.end_step,
                    weights: pick(&e.weights, names)?,
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: WeightsFile =
            serde_json::from_str(&text).map_err(|e| DogeError::format(path, e.to_string()))?;
        let names = file.names();
        file.weights_for(&names)
            .and_then(|_| file.stages_for(&names))
            .map_err(|e| DogeError::format(path, e.to_string()))?;
        Ok(file)
    }
}

fn pick(map: &IndexMap<String, f64>, names: &[String]) -> Result<DomainWeights> {
    if map.len() != names.len() {
        return Err(DogeError::config(format!("{} weights for {} domains", map.len(), names.len())));
    }
    let values = names
        .iter()
        .map(|n| map.get(n).copied().ok_or_else(|| DogeError::config(format!("no weight for domain '{n}'"))))
        .collect::<Result<Vec<_>>>()?;
    DomainWeights::new(values)
}
