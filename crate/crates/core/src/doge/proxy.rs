use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scores::{generalization_scores, sum_gradients, ScoreTarget};
use super::trajectory::{TrajectoryStep, WeightTrajectory};
use super::weights::{update_domain_weights, DomainWeights};
use crate::data::{mixture_batch, stream, uniform_domain_batch, Batch, DomainCorpus, DomainId};
use crate::error::{DogeError, Result};
use crate::model::{LrSchedule, Model, TransformerConfig, UpdateRule};
use crate::tensor::FlatGradient;

/// How the universal target gradient `sum_i grad l_i` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetEstimate {
    /// k times the gradient on one extra batch from the uniform mixture.
    #[default]
    FreshBatch,
    /// Sum of the per-domain gradients already computed for the step.
    DomainSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DogeHyperparams {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Sequences per domain batch.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    /// Bregman coefficient.
    #[serde(default = "one")]
    pub mu: f64,
    /// Weight step size is `weight_lr_scale` times the model step size.
    #[serde(default = "one")]
    pub weight_lr_scale: f64,
    #[serde(default)]
    pub normalize_scores: bool,
    #[serde(default)]
    pub target_estimate: TargetEstimate,
    #[serde(default)]
    pub update: UpdateRule,
    /// Parameter groups that enter the scores; all when absent.
    #[serde(default)]
    pub mask: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for the per-domain passes (1 = current thread).
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    8
}
fn one() -> f64 {
    1.0
}
fn default_threads() -> usize {
    1
}

impl Default for DogeHyperparams {
    fn default() -> Self {
        DogeHyperparams {
            steps: default_steps(),
            batch_size: default_batch(),
            lr: LrSchedule::default(),
            mu: 1.0,
            weight_lr_scale: 1.0,
            normalize_scores: false,
            target_estimate: TargetEstimate::default(),
            update: UpdateRule::default(),
            mask: None,
            seed: 0,
            threads: 1,
        }
    }
}

impl DogeHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(DogeError::config("proxy steps and batch size must be at least 1"));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(DogeError::config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.weight_lr_scale > 0.0 && self.weight_lr_scale.is_finite()) {
            return Err(DogeError::config("weight_lr_scale must be positive"));
        }
        if self.threads == 0 {
            return Err(DogeError::config("threads must be at least 1"));
        }
        self.lr.validate()
    }
}

/// Result of a proxy run.
#[derive(Debug, Clone)]
pub struct ProxyOutcome {
    /// Mean of `alpha^1..alpha^T`.
    pub weights: DomainWeights,
    pub trajectory: WeightTrajectory,
    pub model: Model,
}

/// Gradient of each batch's mean loss, in batch order, flattened under
/// `mask`. Runs on the ambient rayon pool when `parallel`.
pub fn per_domain_gradients(
    model: &Model,
    batches: &[Batch],
    mask: Option<&[usize]>,
    parallel: bool,
) -> Result<Vec<(f64, FlatGradient)>> {
    if parallel {
        batches.par_iter().map(|b| model.flat_gradient(b, mask)).collect()
    } else {
        batches.iter().map(|b| model.flat_gradient(b, mask)).collect()
    }
}

/// `k` times the gradient on a fresh uniform-mixture batch.
pub fn target_gradient_universal(
    model: &Model,
    corpus: &DomainCorpus,
    b: usize,
    rng: &mut impl rand::Rng,
    mask: Option<&[usize]>,
) -> Result<FlatGradient> {
    let k = corpus.k();
    let batch = mixture_batch(corpus, DomainWeights::uniform(k).as_slice(), b, rng)?;
    let (_, mut g) = model.flat_gradient(&batch, mask)?;
    g.scale(k as f64);
    Ok(g)
}

/// `sum_i alpha_i g_i`.
pub fn combine_gradients(domain_grads: &[FlatGradient], alpha: &DomainWeights) -> Result<FlatGradient> {
    if domain_grads.len() != alpha.k() || domain_grads.is_empty() {
        return Err(DogeError::contract(format!(
            "{} gradients for {} weights",
            domain_grads.len(),
            alpha.k()
        )));
    }
    let mut d = domain_grads[0].zeros_like();
    for (g, &a) in domain_grads.iter().zip(alpha.as_slice()) {
        d.add_scaled(g, a)?;
    }
    Ok(d)
}

/// Moves the model along the alpha-weighted sum of domain gradients.
pub fn reweighted_step(model: &mut Model, domain_grads: &[FlatGradient], alpha: &DomainWeights, eta: f64) -> Result<()> {
    let d = combine_gradients(domain_grads, alpha)?;
    model.apply_update(&d, eta)?;
    Ok(())
}

/// Proxy training with the universal target (average loss over all domains).
pub fn run_proxy_universal(corpus: &DomainCorpus, config: &TransformerConfig, hp: &DogeHyperparams) -> Result<ProxyOutcome> {
    run_proxy(corpus, config, hp, ScoreTarget::Universal)
}

/// Proxy training whose scores align with the held-out domain's gradient.
/// Only the training domains are ever stepped on.
pub fn run_proxy_ood(corpus: &DomainCorpus, config: &TransformerConfig, hp: &DogeHyperparams) -> Result<ProxyOutcome> {
    if corpus.ood().is_none() {
        return Err(DogeError::config("out-of-domain proxy run needs a target domain"));
    }
    run_proxy(corpus, config, hp, ScoreTarget::Ood)
}

fn run_proxy(corpus: &DomainCorpus, config: &TransformerConfig, hp: &DogeHyperparams, target: ScoreTarget) -> Result<ProxyOutcome> {
    hp.validate()?;
    if config.context + 1 < corpus.context() {
        return Err(DogeError::config(format!(
            "proxy context {} is shorter than corpus sequences of {} tokens",
            config.context,
            corpus.context()
        )));
    }
    let mut model = Model::new(config, hp.seed)?.with_update_rule(hp.update);
    if let Some(mask) = &hp.mask {
        if let Some(bad) = mask.iter().find(|&&g| g >= model.group_count()) {
            return Err(DogeError::config(format!("mask names group {bad}; the proxy has {}", model.group_count())));
        }
    }
    let pool = if hp.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(hp.threads)
                .build()
                .map_err(|e| DogeError::config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let k = corpus.k();
    let mut alpha = DomainWeights::uniform(k);
    let mut traj = WeightTrajectory::new(corpus.names(), target, hp.normalize_scores);
    let report_every = (hp.steps / 10).max(1);
    for t in 0..hp.steps {
        let step = |model: &mut Model, alpha: &DomainWeights| -> Result<(DomainWeights, TrajectoryStep)> {
            let eta = hp.lr.at(t, hp.steps);
            let batches = (0..k)
                .map(|i| {
                    let mut rng = stream(hp.seed, "proxy.domain", (t * k + i) as u64);
                    uniform_domain_batch(corpus, DomainId::Train(i), hp.batch_size, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let results = match &pool {
                Some(p) => p.install(|| per_domain_gradients(model, &batches, None, true))?,
                None => per_domain_gradients(model, &batches, None, false)?,
            };
            let (losses, grads): (Vec<f64>, Vec<FlatGradient>) = results.into_iter().unzip();
            let mask = hp.mask.as_deref();
            let scored: Vec<FlatGradient> = match mask {
                Some(m) => grads.iter().map(|g| g.restrict(m)).collect::<Result<_>>()?,
                None => grads.clone(),
            };
            let mut rng = stream(hp.seed, "proxy.target", t as u64);
            let target_grad = match target {
                ScoreTarget::Ood => {
                    let b = uniform_domain_batch(corpus, DomainId::Ood, hp.batch_size, &mut rng)?;
                    model.flat_gradient(&b, mask)?.1
                }
                ScoreTarget::Universal => match hp.target_estimate {
                    TargetEstimate::FreshBatch => target_gradient_universal(model, corpus, hp.batch_size, &mut rng, mask)?,
                    TargetEstimate::DomainSum => sum_gradients(&scored)?,
                },
            };
            let scores = generalization_scores(&scored, &target_grad, target, hp.normalize_scores)?;
            let next = update_domain_weights(alpha, &scores.values, eta * hp.weight_lr_scale, hp.mu)?;
            reweighted_step(model, &grads, &next, eta)?;
            let record = TrajectoryStep {
                step: t + 1,
                alpha: next.clone(),
                scores: scores.values,
                losses,
            };
            Ok((next, record))
        };
        let (next, record) = step(&mut model, &alpha).map_err(|e| e.at_step(t + 1))?;
        if (t + 1) % report_every == 0 || t + 1 == hp.steps {
            log::info!(
                "proxy step {}/{}: alpha {:?} mean loss {:.4}",
                t + 1,
                hp.steps,
                next.as_slice(),
                record.losses.iter().sum::<f64>() / k as f64
            );
        }
        alpha = next;
        traj.push(record)?;
    }
    let weights = traj.average()?;
    Ok(ProxyOutcome {
        weights,
        trajectory: traj,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: &[f64]) -> FlatGradient {
        FlatGradient::from_groups(&[v.to_vec()], None).unwrap()
    }

    #[test]
    fn combined_direction_example() {
        let g = [flat(&[4.0, 0.0]), flat(&[0.0, 4.0])];
        let a = DomainWeights::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(combine_gradients(&g, &a).unwrap().values(), &[1.0, 3.0]);
        let one_hot = DomainWeights::one_hot(2, 1);
        assert_eq!(combine_gradients(&g, &one_hot).unwrap().values(), &[0.0, 4.0]);
        assert!(combine_gradients(&g[..1], &a).is_err());
    }

    #[test]
    fn hyperparams_parse_with_defaults() {
        let hp: DogeHyperparams = toml::from_str("steps = 10\nnormalize_scores = true").unwrap();
        assert_eq!(hp.steps, 10);
        assert_eq!(hp.batch_size, 8);
        assert!(hp.normalize_scores);
        assert_eq!(hp.target_estimate, TargetEstimate::FreshBatch);
        assert!(toml::from_str::<DogeHyperparams>("stepz = 1").is_err());
        let bad = DogeHyperparams {
            mu: 0.0,
            ..DogeHyperparams::default()
        };
        assert!(bad.validate().is_err());
    }
}
