use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Domain, DomainCorpus, DomainId, Token};
use crate::error::{DogeError, Result};
use crate::model::Model;

const REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    pub name: String,
    /// Mean next-token loss over the domain's held-out tokens.
    pub loss: f64,
    pub perplexity: f64,
    pub tokens: u64,
}

impl DomainEval {
    pub fn new(name: &str, loss: f64, tokens: u64) -> Self {
        DomainEval {
            name: name.to_string(),
            loss,
            perplexity: loss.exp(),
            tokens,
        }
    }
}

/// Held-out perplexities. The average is `exp` of the mean per-domain loss
/// (a geometric mean of perplexities); the worst case is the largest one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domains: Vec<DomainEval>,
    pub average_perplexity: f64,
    pub worst_perplexity: f64,
    /// Training tokens consumed per domain, when known.
    #[serde(default)]
    pub tokens_consumed: IndexMap<String, u64>,
    /// Out-of-domain target, reported separately from the average.
    #[serde(default)]
    pub ood: Option<DomainEval>,
}

impl EvalReport {
    pub fn from_domains(domains: Vec<DomainEval>, ood: Option<DomainEval>) -> Result<Self> {
        if domains.is_empty() {
            return Err(DogeError::contract("evaluation report needs at least one domain"));
        }
        let mean = domains.iter().map(|d| d.loss).sum::<f64>() / domains.len() as f64;
        let worst = domains.iter().map(|d| d.perplexity).fold(f64::NEG_INFINITY, f64::max);
        Ok(EvalReport {
            domains,
            average_perplexity: mean.exp(),
            worst_perplexity: worst,
            tokens_consumed: IndexMap::new(),
            ood,
        })
    }

    /// Mean of the per-domain losses.
    pub fn average_loss(&self) -> f64 {
        self.domains.iter().map(|d| d.loss).sum::<f64>() / self.domains.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= REL_TOL * b.abs().max(1.0);
        if self.domains.is_empty() {
            return Err(DogeError::data("evaluation report lists no domains"));
        }
        for d in self.domains.iter().chain(&self.ood) {
            if !d.loss.is_finite() || !close(d.perplexity, d.loss.exp()) {
                return Err(DogeError::data(format!(
                    "domain '{}': perplexity {} is not exp(loss {})",
                    d.name, d.perplexity, d.loss
                )));
            }
        }
        if !close(self.average_perplexity, self.average_loss().exp()) {
            return Err(DogeError::data("average perplexity is not exp(mean domain loss)"));
        }
        let worst = self.domains.iter().map(|d| d.perplexity).fold(f64::NEG_INFINITY, f64::max);
        if self.worst_perplexity != worst {
            return Err(DogeError::data("worst-case perplexity is not the largest domain perplexity"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let report: EvalReport = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| DogeError::format(path, e.to_string()))?;
        report.validate().map_err(|e| DogeError::format(path, e.to_string()))?;
        Ok(report)
    }
}

fn evaluate_domain(model: &Model, domain: &Domain, id: DomainId, len: usize, batch: usize) -> Result<DomainEval> {
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in domain.sequences.chunks(batch.max(1)) {
        let seqs: Vec<&[Token]> = chunk.iter().map(Vec::as_slice).collect();
        let b = Batch::from_sequences(&seqs, vec![id; seqs.len()], len)?;
        let (sum, n) = model.loss_sum(&b)?;
        total += sum;
        count += n;
    }
    if count == 0 {
        return Err(DogeError::data(format!("domain '{}' has no tokens to evaluate", domain.name)));
    }
    Ok(DomainEval::new(&domain.name, total / count as f64, count as u64))
}

/// Token-weighted mean loss of `model` on every domain of `corpus`.
pub fn evaluate(model: &Model, corpus: &DomainCorpus, batch: usize) -> Result<EvalReport> {
    let len = corpus.context();
    let domains = corpus
        .domains()
        .iter()
        .enumerate()
        .map(|(i, d)| evaluate_domain(model, d, DomainId::Train(i), len, batch))
        .collect::<Result<Vec<_>>>()?;
    let ood = corpus
        .ood()
        .map(|d| evaluate_domain(model, d, DomainId::Ood, len, batch))
        .transpose()?;
    EvalReport::from_domains(domains, ood)
}
