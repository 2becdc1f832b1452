//! Fixtures shared by the benchmarks.

use doge_core::data::{generate_synthetic, ComponentSpec, DomainCorpus, SyntheticDomain, SyntheticSpec, VOCAB_SIZE};
use doge_core::model::TransformerConfig;

/// Four-domain synthetic corpus with sequences of `len` tokens.
pub fn corpus(len: usize) -> DomainCorpus {
    let spec = SyntheticSpec {
        components: vec![ComponentSpec::new(6, 2.0); 3],
        domains: [[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.0, 0.0, 1.0]]
            .iter()
            .enumerate()
            .map(|(i, m)| SyntheticDomain {
                name: format!("d{i}"),
                mixture: m.to_vec(),
            })
            .collect(),
        ood: None,
        sequence_length: len,
        sequences_per_domain: 64,
        seed: 1,
    };
    generate_synthetic(&spec, 0).expect("valid spec")
}

pub fn model(layers: usize, dim: usize, context: usize) -> TransformerConfig {
    TransformerConfig {
        layers,
        heads: 4,
        dim,
        hidden: 4 * dim,
        context,
        vocab: VOCAB_SIZE,
        seed: 0,
    }
}
