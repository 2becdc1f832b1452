use serde::{Deserialize, Serialize};

use crate::error::{DogeError, Result};

/// Tolerance on `sum(alpha) == 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex over the training domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DomainWeights(Vec<f64>);

impl DomainWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DogeError::contract("domain weights need at least one entry"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DogeError::contract(format!("domain weights {values:?} have negative or non-finite entries")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(DogeError::contract(format!("domain weights sum to {sum}, not 1")));
        }
        Ok(DomainWeights(values))
    }

    /// Rescales non-negative values onto the simplex.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(DogeError::contract("cannot normalize weights with zero or non-finite mass"));
        }
        DomainWeights::new(values.into_iter().map(|v| v / sum).collect())
    }

    pub fn uniform(k: usize) -> Self {
        DomainWeights(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, i: usize) -> Self {
        let mut v = vec![0.0; k];
        v[i] = 1.0;
        DomainWeights(v)
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v < self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for DomainWeights {
    type Error = DogeError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        DomainWeights::new(v)
    }
}

impl From<DomainWeights> for Vec<f64> {
    fn from(w: DomainWeights) -> Self {
        w.0
    }
}

impl std::ops::Index<usize> for DomainWeights {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Entropic mirror-descent step on the simplex:
/// `alpha_i ∝ alpha_prev_i * exp(eta * W_i / mu)`.
///
/// Evaluated in log space with a max shift. Entries that were positive stay
/// positive (floored at the smallest normal float); zero entries stay zero.
pub fn update_domain_weights(alpha_prev: &DomainWeights, scores: &[f64], eta: f64, mu: f64) -> Result<DomainWeights> {
    if scores.len() != alpha_prev.k() {
        return Err(DogeError::contract(format!(
            "{} scores for {} domains",
            scores.len(),
            alpha_prev.k()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(DogeError::contract(format!("non-finite generalization score {bad}")));
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(DogeError::contract(format!("Bregman coefficient {mu} must be positive")));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(DogeError::contract(format!("weight step size {eta} must be positive")));
    }
    if alpha_prev.as_slice().iter().all(|&a| a == 0.0) {
        return Err(DogeError::contract("previous domain weights are all zero"));
    }
    let logits: Vec<f64> = alpha_prev
        .as_slice()
        .iter()
        .zip(scores)
        .map(|(&a, &w)| if a > 0.0 { a.ln() + eta * w / mu } else { f64::NEG_INFINITY })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() })
        .collect();
    let sum: f64 = out.iter().sum();
    for (o, &a) in out.iter_mut().zip(alpha_prev.as_slice()) {
        *o /= sum;
        if a > 0.0 && *o < f64::MIN_POSITIVE {
            *o = f64::MIN_POSITIVE;
        }
    }
    let sum: f64 = out.iter().sum();
    if (sum - 1.0).abs() > 0.0 {
        for o in &mut out {
            *o /= sum;
        }
    }
    DomainWeights::new(out)
}
