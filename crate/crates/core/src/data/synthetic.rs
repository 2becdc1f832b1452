//! Synthetic multi-domain corpora with controlled relatedness.
//!
//! The alphabet is split into disjoint blocks, one per *component*. A
//! component is an order-2 Markov kernel whose next symbol always lies in its
//! own block. A domain is an order-2 chain whose transition matrix is a
//! mixture of component kernels, so two domains share transitions in
//! proportion to the overlap of their mixture weights:
//! `overlap(a, b) = sum_c min(w_ac, w_bc)`. Overlap 1 means identical
//! transition matrices; overlap 0 means disjoint symbol supports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::corpus::{Domain, DomainCorpus};
use super::sampler::{derive_seed, sample_categorical};
use super::tokenizer::{Token, BOS};
use crate::error::{DogeError, Result};

/// First byte used for synthetic symbols ('!').
pub const SYMBOL_BASE: Token = 33;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub symbols: usize,
    /// Scale of the random logits; larger means lower-entropy transitions.
    #[serde(default = "default_sharpness")]
    pub sharpness: f64,
    /// Weight of the second-to-last symbol in the transition logits relative
    /// to the last one; 0 gives a first-order chain.
    #[serde(default = "default_memory")]
    pub memory: f64,
}

fn default_sharpness() -> f64 {
    2.0
}

fn default_memory() -> f64 {
    1.0
}

impl ComponentSpec {
    pub fn new(symbols: usize, sharpness: f64) -> Self {
        ComponentSpec {
            symbols,
            sharpness,
            memory: default_memory(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    pub name: String,
    /// Weight of each component in this domain's transition matrix.
    pub mixture: Vec<f64>,
}

/// Out-of-domain target: a stated mixture of the training domains'
/// generators (one-hot picks a single source generator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOod {
    pub name: String,
    pub sources: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub components: Vec<ComponentSpec>,
    pub domains: Vec<SyntheticDomain>,
    #[serde(default)]
    pub ood: Option<SyntheticOod>,
    /// Tokens per sequence including the leading BOS.
    pub sequence_length: usize,
    pub sequences_per_domain: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let nc = self.components.len();
        if nc == 0 || self.domains.is_empty() {
            return Err(DogeError::config("synthetic: need at least one component and one domain"));
        }
        if self
            .components
            .iter()
            .any(|c| c.symbols == 0 || !(c.sharpness >= 0.0) || !(c.memory >= 0.0))
        {
            return Err(DogeError::config(
                "synthetic: components need symbols >= 1 and finite sharpness, memory >= 0",
            ));
        }
        if self.alphabet_size() + SYMBOL_BASE as usize > 256 {
            return Err(DogeError::config("synthetic: alphabet does not fit in bytes"));
        }
        if self.sequence_length < 2 || self.sequences_per_domain == 0 {
            return Err(DogeError::config("synthetic: sequence_length >= 2 and sequences_per_domain >= 1"));
        }
        for d in &self.domains {
            check_weights(&d.mixture, nc, &d.name)?;
        }
        if let Some(o) = &self.ood {
            check_weights(&o.sources, self.domains.len(), &o.name)?;
        }
        Ok(())
    }

    pub fn alphabet_size(&self) -> usize {
        self.components.iter().map(|c| c.symbols).sum()
    }

    /// Normalized component weights of domain `d`.
    pub fn domain_mixture(&self, d: usize) -> Vec<f64> {
        normalized(&self.domains[d].mixture)
    }

    pub fn ood_mixture(&self) -> Option<Vec<f64>> {
        let o = self.ood.as_ref()?;
        let src = normalized(&o.sources);
        let mut mix = vec![0.0; self.components.len()];
        for (d, w) in src.iter().enumerate() {
            for (m, x) in mix.iter_mut().zip(self.domain_mixture(d)) {
                *m += w * x;
            }
        }
        Some(mix)
    }

    /// Pairwise transition overlap coefficient in [0, 1].
    pub fn overlap(&self, a: usize, b: usize) -> f64 {
        self.domain_mixture(a)
            .iter()
            .zip(self.domain_mixture(b))
            .map(|(x, y)| x.min(y))
            .sum()
    }

    pub fn overlap_matrix(&self) -> Vec<Vec<f64>> {
        let k = self.domains.len();
        (0..k).map(|a| (0..k).map(|b| self.overlap(a, b)).collect()).collect()
    }
}

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn check_weights(w: &[f64], n: usize, name: &str) -> Result<()> {
    if w.len() != n || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
        return Err(DogeError::config(format!(
            "synthetic '{name}': weights must be {n} non-negative numbers with positive sum"
        )));
    }
    Ok(())
}

/// Component kernels sampled from a spec.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    spec: SyntheticSpec,
    alphabet: usize,
    block_start: Vec<usize>,
    /// kernels[c][ctx * symbols_c + j]; ctx indexes (prev2, prev1) over the
    /// alphabet plus a start marker.
    kernels: Vec<Vec<f64>>,
}

impl SyntheticGenerator {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let alphabet = spec.alphabet_size();
        let contexts = (alphabet + 1) * (alphabet + 1);
        let mut block_start = Vec::new();
        let mut start = 0;
        let mut kernels = Vec::new();
        for (c, comp) in spec.components.iter().enumerate() {
            block_start.push(start);
            start += comp.symbols;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synthetic.kernel", c as u64));
            let n = comp.symbols;
            let last: Vec<f64> = (0..(alphabet + 1) * n).map(|_| rng.sample(StandardNormal)).collect();
            let mut kernel = Vec::with_capacity(contexts * n);
            for ctx in 0..contexts {
                let p1 = ctx % (alphabet + 1);
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        let pair: f64 = rng.sample(StandardNormal);
                        comp.sharpness * (last[p1 * n + j] + comp.memory * pair)
                    })
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let s: f64 = e.iter().sum();
                kernel.extend(e.iter().map(|x| x / s));
            }
            kernels.push(kernel);
        }
        Ok(SyntheticGenerator {
            spec: spec.clone(),
            alphabet,
            block_start,
            kernels,
        })
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    fn context_index(&self, prev2: Option<usize>, prev1: Option<usize>) -> usize {
        let a = self.alphabet;
        prev2.unwrap_or(a) * (a + 1) + prev1.unwrap_or(a)
    }

    /// Full next-symbol distribution of a chain with the given component
    /// mixture, flattened as [context][symbol].
    pub fn transition_matrix(&self, mixture: &[f64]) -> Vec<f64> {
        let a = self.alphabet;
        let contexts = (a + 1) * (a + 1);
        let mut out = vec![0.0; contexts * a];
        for (c, &w) in mixture.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let n = self.spec.components[c].symbols;
            for ctx in 0..contexts {
                for j in 0..n {
                    out[ctx * a + self.block_start[c] + j] += w * self.kernels[c][ctx * n + j];
                }
            }
        }
        out
    }

    /// Symbols reachable with positive probability under `mixture`.
    pub fn support(&self, mixture: &[f64]) -> Vec<usize> {
        let mut s = Vec::new();
        for (c, &w) in mixture.iter().enumerate() {
            if w > 0.0 {
                s.extend(self.block_start[c]..self.block_start[c] + self.spec.components[c].symbols);
            }
        }
        s
    }

    pub fn sample_sequence(&self, mixture: &[f64], rng: &mut impl Rng) -> Vec<Token> {
        let mut seq = Vec::with_capacity(self.spec.sequence_length);
        seq.push(BOS);
        let (mut p2, mut p1) = (None, None);
        for _ in 1..self.spec.sequence_length {
            let c = sample_categorical(mixture, rng);
            let n = self.spec.components[c].symbols;
            let ctx = self.context_index(p2, p1);
            let j = sample_categorical(&self.kernels[c][ctx * n..(ctx + 1) * n], rng);
            let sym = self.block_start[c] + j;
            seq.push(SYMBOL_BASE + sym as Token);
            p2 = p1;
            p1 = Some(sym);
        }
        seq
    }

    fn sample_domain(&self, name: &str, mixture: &[f64], stream_id: u64) -> Domain {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, "synthetic.sample", stream_id));
        Domain {
            name: name.to_string(),
            sequences: (0..self.spec.sequences_per_domain)
                .map(|_| self.sample_sequence(mixture, &mut rng))
                .collect(),
        }
    }
}

/// Samples a corpus from `spec`. The spec's own seed fixes the kernels;
/// `seed` selects the sample draw.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<DomainCorpus> {
    let mut spec = spec.clone();
    spec.seed = derive_seed(spec.seed, "synthetic.run", seed);
    let generator = SyntheticGenerator::new(&spec)?;
    let domains = (0..spec.domains.len())
        .map(|d| generator.sample_domain(&spec.domains[d].name, &spec.domain_mixture(d), d as u64))
        .collect();
    let ood = spec
        .ood
        .as_ref()
        .map(|o| generator.sample_domain(&o.name, &spec.ood_mixture().unwrap(), u64::MAX));
    DomainCorpus::new(domains, ood, spec.sequence_length)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mixtures: Vec<Vec<f64>>) -> SyntheticSpec {
        SyntheticSpec {
            components: vec![
                ComponentSpec::new(4, 2.0);
                mixtures[0].len()
            ],
            domains: mixtures
                .into_iter()
                .enumerate()
                .map(|(i, mixture)| SyntheticDomain {
                    name: format!("d{i}"),
                    mixture,
                })
                .collect(),
            ood: None,
            sequence_length: 16,
            sequences_per_domain: 20,
            seed: 5,
        }
    }

    #[test]
    fn full_overlap_gives_identical_transitions() {
        let s = spec(vec![vec![0.3, 0.7], vec![0.3, 0.7]]);
        assert_eq!(s.overlap(0, 1), 1.0);
        let g = SyntheticGenerator::new(&s).unwrap();
        assert_eq!(
            g.transition_matrix(&s.domain_mixture(0)),
            g.transition_matrix(&s.domain_mixture(1))
        );
    }

    #[test]
    fn zero_overlap_gives_disjoint_supports() {
        let s = spec(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(s.overlap(0, 1), 0.0);
        let g = SyntheticGenerator::new(&s).unwrap();
        let a = g.support(&s.domain_mixture(0));
        let b = g.support(&s.domain_mixture(1));
        assert!(a.iter().all(|x| !b.contains(x)));
        let corpus = generate_synthetic(&s, 0).unwrap();
        let syms = |d: usize| -> std::collections::BTreeSet<Token> {
            corpus.domains()[d].sequences.iter().flat_map(|s| s[1..].to_vec()).collect()
        };
        assert!(syms(0).is_disjoint(&syms(1)));
    }

    #[test]
    fn partial_overlap() {
        let s = spec(vec![vec![0.5, 0.5, 0.0], vec![0.0, 0.5, 0.5]]);
        assert!((s.overlap(0, 1) - 0.5).abs() < 1e-15);
        let m = s.overlap_matrix();
        assert_eq!(m[0][0], 1.0);
        assert_eq!(m[0][1], m[1][0]);
    }

    #[test]
    fn transition_rows_are_distributions() {
        let s = spec(vec![vec![0.2, 0.8]]);
        let g = SyntheticGenerator::new(&s).unwrap();
        let a = g.alphabet();
        for row in g.transition_matrix(&s.domain_mixture(0)).chunks(a) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_spec_and_seed_reproduce() {
        let s = spec(vec![vec![1.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(generate_synthetic(&s, 3).unwrap(), generate_synthetic(&s, 3).unwrap());
        assert_ne!(generate_synthetic(&s, 3).unwrap(), generate_synthetic(&s, 4).unwrap());
    }

    #[test]
    fn ood_from_single_source_shares_its_generator() {
        let mut s = spec(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        s.ood = Some(SyntheticOod {
            name: "target".into(),
            sources: vec![1.0, 0.0],
        });
        assert_eq!(s.ood_mixture().unwrap(), s.domain_mixture(0));
        let c = generate_synthetic(&s, 0).unwrap();
        assert_eq!(c.ood().unwrap().sequences.len(), 20);
        assert_ne!(c.ood().unwrap().sequences, c.domains()[0].sequences);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(vec![vec![1.0, -1.0]]);
        assert!(s.validate().is_err());
        s = spec(vec![vec![1.0]]);
        s.domains[0].mixture = vec![1.0, 0.0];
        assert!(s.validate().is_err());
        s = spec(vec![vec![1.0]]);
        s.components[0].symbols = 300;
        assert!(s.validate().is_err());
    }
}
