//! Corpora, byte tokenization and batch sampling.

mod corpus;
mod sampler;
mod synthetic;
pub mod tokenizer;

pub use corpus::{Domain, DomainCorpus, DomainId, IngestStats, OOD_DIR};
pub use sampler::{
    derive_seed, mixture_batch, sample_categorical, stream, uniform_domain_batch, Batch, SamplerRng,
};
pub use synthetic::{
    generate_synthetic, ComponentSpec, SyntheticDomain, SyntheticGenerator, SyntheticOod, SyntheticSpec,
    SYMBOL_BASE,
};
pub use tokenizer::{Token, BOS, EOS, PAD, VOCAB_SIZE};
