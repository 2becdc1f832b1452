use serde::{Deserialize, Serialize};

use crate::error::{DogeError, Result};
use crate::tensor::FlatGradient;

/// Which objective the alignment scores were computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreTarget {
    /// Average loss over all training domains.
    Universal,
    /// Loss on a held-out domain that is never trained on.
    Ood,
}

/// `W_j = <grad l_j, target>` for each training domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizationScores {
    pub values: Vec<f64>,
    pub target: ScoreTarget,
    /// Divided by `max_j |W_j|` before use.
    pub normalized: bool,
}

/// Alignment of every domain gradient with the target gradient, in domain
/// order. With `normalize` the scores are rescaled by their largest magnitude
/// (left alone when all are zero).
pub fn generalization_scores(
    domain_grads: &[FlatGradient],
    target_grad: &FlatGradient,
    target: ScoreTarget,
    normalize: bool,
) -> Result<GeneralizationScores> {
    if domain_grads.is_empty() {
        return Err(DogeError::contract("no domain gradients"));
    }
    let mut values = domain_grads
        .iter()
        .map(|g| g.dot(target_grad))
        .collect::<Result<Vec<_>>>()?;
    if normalize {
        let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v /= max);
        }
    }
    Ok(GeneralizationScores {
        values,
        target,
        normalized: normalize,
    })
}

/// Sum of the domain gradients in domain order: the universal target when no
/// fresh batch is drawn.
pub fn sum_gradients(domain_grads: &[FlatGradient]) -> Result<FlatGradient> {
    let (first, rest) = domain_grads
        .split_first()
        .ok_or_else(|| DogeError::contract("no domain gradients"))?;
    let mut acc = first.clone();
    for g in rest {
        acc.add_scaled(g, 1.0)?;
    }
    Ok(acc)
}

/// Splits the universal score of domain `j` into its transfer and
/// self-learning parts: `(<g_j, sum_{i != j} g_i>, |g_j|^2)`.
pub fn influence_decomposition(domain_grads: &[FlatGradient], j: usize) -> Result<(f64, f64)> {
    let gj = domain_grads
        .get(j)
        .ok_or_else(|| DogeError::contract(format!("domain {j} out of range for {} gradients", domain_grads.len())))?;
    let mut others = gj.zeros_like();
    for (i, g) in domain_grads.iter().enumerate() {
        if i != j {
            others.add_scaled(g, 1.0)?;
        }
    }
    Ok((gj.dot(&others)?, gj.norm_sq()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: &[f64]) -> FlatGradient {
        FlatGradient::from_groups(&[v.to_vec()], None).unwrap()
    }

    #[test]
    fn two_domain_example() {
        let g = [flat(&[1.0, 0.0]), flat(&[1.0, 1.0])];
        let t = sum_gradients(&g).unwrap();
        assert_eq!(t.values(), &[2.0, 1.0]);
        let s = generalization_scores(&g, &t, ScoreTarget::Universal, false).unwrap();
        assert_eq!(s.values, vec![2.0, 3.0]);
        assert_eq!(influence_decomposition(&g, 1).unwrap(), (1.0, 2.0));
        assert_eq!(influence_decomposition(&g, 0).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn normalization_scales_by_max_magnitude() {
        let g = [flat(&[1.0, 0.0]), flat(&[-4.0, 0.0])];
        let t = flat(&[1.0, 0.0]);
        let s = generalization_scores(&g, &t, ScoreTarget::Ood, true).unwrap();
        assert_eq!(s.values, vec![0.25, -1.0]);
        let z = generalization_scores(&g, &flat(&[0.0, 0.0]), ScoreTarget::Ood, true).unwrap();
        assert_eq!(z.values, vec![0.0, 0.0]);
    }

    #[test]
    fn mismatched_layouts_error() {
        let g = [flat(&[1.0, 0.0])];
        assert!(generalization_scores(&g, &flat(&[1.0]), ScoreTarget::Universal, false).is_err());
        assert!(influence_decomposition(&g, 1).is_err());
        assert!(sum_gradients(&[]).is_err());
    }
}
