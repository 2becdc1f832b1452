use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{DomainCorpus, DomainId};
use super::tokenizer::{Token, PAD};
use crate::error::{DogeError, Result};

pub type SamplerRng = ChaCha8Rng;

/// Seed for an independent stream identified by (run seed, purpose, index).
pub fn derive_seed(run_seed: u64, purpose: &str, index: u64) -> u64 {
    // FNV-1a over the tag, then splitmix64 finalization of the mixed words.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = run_seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(run_seed: u64, purpose: &str, index: u64) -> SamplerRng {
    SamplerRng::seed_from_u64(derive_seed(run_seed, purpose, index))
}

/// `rows` sequences right-padded with PAD to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    tokens: Vec<Token>,
    rows: usize,
    len: usize,
    domains: Vec<DomainId>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&[Token]], domains: Vec<DomainId>, len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(DogeError::contract("empty batch"));
        }
        if seqs.len() != domains.len() {
            return Err(DogeError::contract("one domain id per sequence required"));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.len() > len {
                return Err(DogeError::contract(format!(
                    "sequence of {} tokens exceeds batch length {len}",
                    s.len()
                )));
            }
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Ok(Batch {
            tokens,
            rows: seqs.len(),
            len,
            domains,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn row(&self, r: usize) -> &[Token] {
        &self.tokens[r * self.len..(r + 1) * self.len]
    }

    pub fn domains(&self) -> &[DomainId] {
        &self.domains
    }

    /// Single-sequence batch of row `r` (padding kept).
    pub fn select(&self, r: usize) -> Batch {
        Batch {
            tokens: self.row(r).to_vec(),
            rows: 1,
            len: self.len,
            domains: vec![self.domains[r]],
        }
    }

    /// Non-padding tokens in row `r`.
    pub fn row_tokens(&self, r: usize) -> usize {
        self.row(r).iter().filter(|&&t| t != PAD).count()
    }
}

/// `b` sequences drawn uniformly with replacement from one domain.
pub fn uniform_domain_batch(
    corpus: &DomainCorpus,
    domain: DomainId,
    b: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if b == 0 {
        return Err(DogeError::contract("batch size must be at least 1"));
    }
    let d = corpus.domain(domain)?;
    let seqs: Vec<&[Token]> = (0..b)
        .map(|_| d.sequences[rng.random_range(0..d.sequences.len())].as_slice())
        .collect();
    Batch::from_sequences(&seqs, vec![domain; b], corpus.context())
}

/// `b` sequences from the mixture sum_i alpha_i * unif(D_i): each row picks a
/// domain with probability alpha_i, then a sequence uniformly inside it.
pub fn mixture_batch(
    corpus: &DomainCorpus,
    alpha: &[f64],
    b: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if b == 0 {
        return Err(DogeError::contract("batch size must be at least 1"));
    }
    check_simplex(alpha, corpus.k())?;
    let mut seqs = Vec::with_capacity(b);
    let mut ids = Vec::with_capacity(b);
    for _ in 0..b {
        let i = sample_categorical(alpha, rng);
        let d = &corpus.domains()[i];
        seqs.push(d.sequences[rng.random_range(0..d.sequences.len())].as_slice());
        ids.push(DomainId::Train(i));
    }
    Batch::from_sequences(&seqs, ids, corpus.context())
}

/// Inverse-CDF draw. A single category consumes no randomness; zero-weight
/// categories are never returned.
pub fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    if p.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        cum += pi;
        if u < cum {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

fn check_simplex(alpha: &[f64], k: usize) -> Result<()> {
    if alpha.len() != k {
        return Err(DogeError::contract(format!(
            "mixture weights have {} entries, corpus has {k} domains",
            alpha.len()
        )));
    }
    let sum: f64 = alpha.iter().sum();
    if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(DogeError::contract(format!("mixture weights {alpha:?} are not on the simplex")));
    }
    Ok(())
}
