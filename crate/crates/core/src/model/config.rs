use serde::{Deserialize, Serialize};

use crate::data::VOCAB_SIZE;
use crate::error::{DogeError, Result};

/// Shape of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub hidden: usize,
    pub context: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.heads > 0 && self.dim % self.heads != 0 {
            problems.push(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.context < 2 {
            problems.push(format!("context {} must be at least 2", self.context));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DogeError::config(problems.join("; ")))
        }
    }

    /// Total trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Names and shapes of every parameter group in enumeration order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, v, c) = (self.dim, self.hidden, self.vocab, self.context);
        let mut out = vec![
            ("embedding".to_string(), vec![v, d]),
            ("position".to_string(), vec![c, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("block{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.fc.weight"), vec![d, h]),
                (p("mlp.fc.bias"), vec![h]),
                (p("mlp.proj.weight"), vec![h, d]),
                (p("mlp.proj.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("final_ln.gain".to_string(), vec![d]),
            ("final_ln.bias".to_string(), vec![d]),
            ("lm_head".to_string(), vec![d, v]),
        ]);
        out
    }
}
