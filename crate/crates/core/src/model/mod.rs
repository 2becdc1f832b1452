//! Tiny decoder-only transformer with one parameter group per weight tensor.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TransformerConfig;
pub use optim::{clip_factor, AdamState, LrSchedule, Optimizer, UpdateRule};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{derive_seed, Batch, PAD};
use crate::error::{DogeError, Result};
use crate::tensor::{FlatGradient, GradientSource, NodeId, Tape, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One named weight tensor and its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGroup {
    pub id: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl GradientSource for ParameterGroup {
    fn name(&self) -> &str {
        &self.name
    }

    fn numel(&self) -> usize {
        self.values.len()
    }

    fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

impl ParameterGroup {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: TransformerConfig,
    groups: Vec<ParameterGroup>,
    rule: UpdateRule,
    adam: Option<AdamState>,
    step: u64,
}

impl Model {
    /// Fresh parameters: N(0, 0.02²) weights, residual output projections
    /// scaled by 1/sqrt(2 * layers), zero biases, unit layer-norm gains.
    pub fn new(config: &TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model.init", 0));
        let base = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0, INIT_STD / (2.0 * config.layers as f64).sqrt()).expect("valid std");
        let groups = config
            .parameter_shapes()
            .into_iter()
            .enumerate()
            .map(|(id, (name, shape))| {
                let n: usize = shape.iter().product();
                let values = if name.ends_with(".gain") {
                    vec![1.0; n]
                } else if name.ends_with(".bias") {
                    vec![0.0; n]
                } else if name.ends_with("proj.weight") {
                    (0..n).map(|_| resid.sample(&mut rng)).collect()
                } else {
                    (0..n).map(|_| base.sample(&mut rng)).collect()
                };
                ParameterGroup {
                    id,
                    name,
                    shape,
                    values,
                    grad: None,
                }
            })
            .collect();
        Ok(Model {
            config: *config,
            groups,
            rule: UpdateRule::default(),
            adam: None,
            step: 0,
        })
    }

    /// Initializes with the seed stored in the config.
    pub fn from_config(config: &TransformerConfig) -> Result<Self> {
        Model::new(config, config.seed)
    }

    pub fn with_update_rule(mut self, rule: UpdateRule) -> Self {
        self.set_update_rule(rule);
        self
    }

    pub fn set_update_rule(&mut self, rule: UpdateRule) {
        if rule.optimizer != self.rule.optimizer {
            self.adam = None;
        }
        self.rule = rule;
    }

    pub fn update_rule(&self) -> UpdateRule {
        self.rule
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn groups(&self) -> &[ParameterGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParameterGroup] {
        &mut self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(ParameterGroup::numel).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.groups.iter().map(ParameterGroup::numel).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn adam_state(&self) -> Option<&AdamState> {
        self.adam.as_ref()
    }

    /// All parameters concatenated in group order.
    pub fn parameters_flat(&self) -> Vec<f64> {
        self.groups.iter().flat_map(|g| g.values.iter().copied()).collect()
    }

    /// Records the mean next-token loss of `batch` on `tape`. Returns the loss
    /// node and one leaf per parameter group. With `trainable == false` the
    /// parameters enter as constants and no gradient can flow.
    pub fn forward_loss(&self, tape: &mut Tape, batch: &Batch, trainable: bool) -> Result<(NodeId, Vec<NodeId>)> {
        let c = &self.config;
        if batch.rows() == 0 {
            return Err(DogeError::contract("empty batch"));
        }
        let len = batch.len();
        if len < 2 {
            return Err(DogeError::contract("sequences need at least two tokens"));
        }
        let seq = len - 1;
        if seq > c.context {
            return Err(DogeError::contract(format!(
                "batch sequences of {len} tokens exceed the model context of {}",
                c.context
            )));
        }
        let mut inputs = Vec::with_capacity(batch.rows() * seq);
        let mut targets = Vec::with_capacity(batch.rows() * seq);
        let mut positions = Vec::with_capacity(batch.rows() * seq);
        for r in 0..batch.rows() {
            let row = batch.row(r);
            for t in 0..seq {
                inputs.push(row[t] as usize);
                let next = row[t + 1];
                targets.push((next != PAD).then_some(next as usize));
                positions.push(t);
            }
        }

        let leaves: Vec<NodeId> = self
            .groups
            .iter()
            .map(|g| {
                let t = Tensor::new(g.shape.clone(), g.values.clone()).expect("group shape matches values");
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        let p = |i: usize| leaves[i];

        let tok = tape.embedding_lookup(p(0), &inputs)?;
        let pos = tape.embedding_lookup(p(1), &positions)?;
        let mut x = tape.add(tok, pos)?;
        let d = c.dim;
        for l in 0..c.layers {
            let b = 2 + 12 * l;
            let h = tape.layer_norm(x, p(b), p(b + 1), LAYER_NORM_EPS)?;
            let qkv = tape.matmul(h, p(b + 2))?;
            let qkv = tape.add(qkv, p(b + 3))?;
            let q = tape.slice_cols(qkv, 0, d)?;
            let k = tape.slice_cols(qkv, d, 2 * d)?;
            let v = tape.slice_cols(qkv, 2 * d, 3 * d)?;
            let att = tape.causal_attention(q, k, v, seq, c.heads)?;
            let proj = tape.matmul(att, p(b + 4))?;
            let proj = tape.add(proj, p(b + 5))?;
            x = tape.add(x, proj)?;

            let h = tape.layer_norm(x, p(b + 6), p(b + 7), LAYER_NORM_EPS)?;
            let f = tape.matmul(h, p(b + 8))?;
            let f = tape.add(f, p(b + 9))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, p(b + 10))?;
            let f = tape.add(f, p(b + 11))?;
            x = tape.add(x, f)?;
        }
        let last = 2 + 12 * c.layers;
        let x = tape.layer_norm(x, p(last), p(last + 1), LAYER_NORM_EPS)?;
        let logits = tape.matmul(x, p(last + 2))?;
        let loss = tape.cross_entropy(logits, &targets)?;
        Ok((loss, leaves))
    }

    /// Mean next-token loss of `batch`, no gradient.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = self.forward_loss(&mut tape, batch, false)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Summed loss and number of predicted positions in `batch`.
    pub fn loss_sum(&self, batch: &Batch) -> Result<(f64, usize)> {
        let count: usize = (0..batch.rows())
            .map(|r| batch.row(r)[1..].iter().filter(|&&t| t != PAD).count())
            .sum();
        Ok((self.loss(batch)? * count as f64, count))
    }

    /// Loss and per-group gradients without touching the gradient slots.
    pub fn gradients(&self, batch: &Batch) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let (loss, leaves) = self.forward_loss(&mut tape, batch, true)?;
        tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        let grads = leaves
            .iter()
            .zip(&self.groups)
            .map(|(&id, g)| tape.take_grad(id).unwrap_or_else(|| vec![0.0; g.numel()]))
            .collect();
        Ok((value, grads))
    }

    /// Loss and flattened gradient restricted to `mask`.
    pub fn flat_gradient(&self, batch: &Batch, mask: Option<&[usize]>) -> Result<(f64, FlatGradient)> {
        let (loss, grads) = self.gradients(batch)?;
        Ok((loss, FlatGradient::from_groups(&grads, mask)?))
    }

    /// Forward and backward on `batch`, adding into the gradient slots.
    pub fn accumulate_gradients(&mut self, batch: &Batch) -> Result<f64> {
        let (loss, grads) = self.gradients(batch)?;
        for (g, new) in self.groups.iter_mut().zip(grads) {
            match &mut g.grad {
                Some(acc) => acc.iter_mut().zip(&new).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(new),
            }
        }
        Ok(loss)
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.groups {
            g.grad = None;
        }
    }

    /// Moves the parameters along `-direction` with step `step_size`.
    ///
    /// The direction is clipped to the configured global norm, then handed to
    /// the optimizer. Groups masked out of `direction` count as zero. Returns
    /// the pre-clip norm.
    pub fn apply_update(&mut self, direction: &FlatGradient, step_size: f64) -> Result<f64> {
        if !(step_size.is_finite() && step_size >= 0.0) {
            return Err(DogeError::contract(format!("step size {step_size} must be finite and >= 0")));
        }
        let sizes = self.group_sizes();
        if direction.group_count() != sizes.len()
            || direction.full_len() != self.parameter_count()
            || direction
                .lengths()
                .iter()
                .zip(&sizes)
                .any(|(&l, &n)| l != 0 && l != n)
        {
            return Err(DogeError::contract(format!(
                "update direction covers {} values in {} groups; model has {} values in {} groups",
                direction.full_len(),
                direction.group_count(),
                self.parameter_count(),
                sizes.len()
            )));
        }
        if direction.values().iter().any(|v| !v.is_finite()) {
            return Err(DogeError::contract("update direction has non-finite entries"));
        }
        let norm = direction.norm();
        let clip = clip_factor(norm, self.rule.clip_norm);
        match self.rule.optimizer {
            Optimizer::Sgd => {
                for (gid, group) in self.groups.iter_mut().enumerate() {
                    let seg = direction.segment(gid);
                    for (p, d) in group.values.iter_mut().zip(seg) {
                        *p -= step_size * (clip * d);
                    }
                }
            }
            Optimizer::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let state = self.adam.get_or_insert_with(|| AdamState {
                    m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
                    v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
                    t: 0,
                });
                state.t += 1;
                let bc1 = 1.0 - beta1.powi(state.t as i32);
                let bc2 = 1.0 - beta2.powi(state.t as i32);
                for (gid, group) in self.groups.iter_mut().enumerate() {
                    let seg = direction.segment(gid);
                    let decay = if group.shape.len() == 2 { weight_decay } else { 0.0 };
                    let (m, v) = (&mut state.m[gid], &mut state.v[gid]);
                    for i in 0..group.values.len() {
                        let g = seg.get(i).map_or(0.0, |d| clip * d);
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        let p = &mut group.values[i];
                        *p -= step_size * (mhat / (vhat.sqrt() + eps) + decay * *p);
                    }
                }
            }
        }
        self.step += 1;
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DomainId, BOS, VOCAB_SIZE};

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            layers: 1,
            heads: 2,
            dim: 8,
            hidden: 16,
            context: 8,
            vocab: VOCAB_SIZE,
            seed: 3,
        }
    }

    fn batch(rows: &[&[u32]]) -> Batch {
        let len = rows.iter().map(|r| r.len()).max().unwrap();
        Batch::from_sequences(rows, vec![DomainId::Train(0); rows.len()], len).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::new(&tiny(), 7).unwrap();
        let b = Model::new(&tiny(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.parameters_flat(), Model::new(&tiny(), 8).unwrap().parameters_flat());
    }

    #[test]
    fn groups_partition_parameters() {
        let m = Model::new(&tiny(), 0).unwrap();
        assert_eq!(m.group_sizes().iter().sum::<usize>(), m.parameter_count());
        assert_eq!(m.parameters_flat().len(), m.parameter_count());
        assert!(m.groups().iter().enumerate().all(|(i, g)| g.id == i));
    }

    #[test]
    fn fresh_loss_is_near_uniform() {
        let m = Model::new(&tiny(), 1).unwrap();
        let b = batch(&[&[BOS, 10, 20, 30, 40], &[BOS, 1, 2]]);
        let l = m.loss(&b).unwrap();
        assert!((l - (VOCAB_SIZE as f64).ln()).abs() < 0.5, "loss {l}");
        assert_eq!(l, m.loss(&b).unwrap());
    }

    #[test]
    fn padding_is_excluded_from_loss() {
        let m = Model::new(&tiny(), 1).unwrap();
        let short = batch(&[&[BOS, 5, 6]]);
        let padded = Batch::from_sequences(&[&[BOS, 5, 6]], vec![DomainId::Train(0)], 6).unwrap();
        assert!((m.loss(&short).unwrap() - m.loss(&padded).unwrap()).abs() < 1e-12);
        assert_eq!(m.loss_sum(&padded).unwrap().1, 2);
    }

    #[test]
    fn out_of_vocab_and_overlong_batches_rejected() {
        let m = Model::new(&tiny(), 1).unwrap();
        assert!(matches!(m.loss(&batch(&[&[BOS, 400]])), Err(DogeError::Data(_))));
        let long: Vec<u32> = vec![1; 10];
        assert!(m.loss(&batch(&[&long])).is_err());
    }

    #[test]
    fn zero_direction_leaves_parameters() {
        let mut m = Model::new(&tiny(), 2).unwrap();
        let before = m.parameters_flat();
        let zero = FlatGradient::from_groups(&m.group_sizes().iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>(), None).unwrap();
        m.apply_update(&zero, 0.1).unwrap();
        assert_eq!(m.parameters_flat(), before);
    }

    #[test]
    fn sgd_update_is_exact_and_invertible() {
        let mut m = Model::new(&tiny(), 2).unwrap().with_update_rule(UpdateRule::sgd().unclipped());
        let before = m.parameters_flat();
        let dir: Vec<Vec<f64>> = m
            .group_sizes()
            .iter()
            .enumerate()
            .map(|(g, &n)| (0..n).map(|i| ((g * 31 + i) % 7) as f64 * 0.01 - 0.03).collect())
            .collect();
        let flat = FlatGradient::from_groups(&dir, None).unwrap();
        m.apply_update(&flat, 0.5).unwrap();
        let after = m.parameters_flat();
        for ((a, b), d) in after.iter().zip(&before).zip(flat.values()) {
            assert_eq!(*a, b - 0.5 * d);
        }
        let mut neg = flat.clone();
        neg.scale(-1.0);
        m.apply_update(&neg, 0.5).unwrap();
        for (a, b) in m.parameters_flat().iter().zip(&before) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_rescales_large_directions() {
        let mut m = Model::new(&tiny(), 2).unwrap();
        let before = m.parameters_flat();
        let n = m.parameter_count() as f64;
        let v = 10.0 / n.sqrt();
        let dir: Vec<Vec<f64>> = m.group_sizes().iter().map(|&k| vec![v; k]).collect();
        let flat = FlatGradient::from_groups(&dir, None).unwrap();
        let norm = m.apply_update(&flat, 1.0).unwrap();
        assert!((norm - 10.0).abs() < 1e-9);
        for (a, b) in m.parameters_flat().iter().zip(&before) {
            assert!((b - a - 0.1 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_direction_only_moves_selected_groups() {
        let mut m = Model::new(&tiny(), 2).unwrap().with_update_rule(UpdateRule::sgd().unclipped());
        let before = m.clone();
        let dir: Vec<Vec<f64>> = m.group_sizes().iter().map(|&k| vec![1.0; k]).collect();
        let flat = FlatGradient::from_groups(&dir, Some(&[3])).unwrap();
        m.apply_update(&flat, 0.1).unwrap();
        for (g, (a, b)) in m.groups().iter().zip(before.groups()).enumerate() {
            assert_eq!(a.values == b.values, g != 3, "group {g}");
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut m = Model::new(&tiny(), 2).unwrap();
        let flat = FlatGradient::from_groups(&[vec![0.0; 3]], None).unwrap();
        assert!(matches!(m.apply_update(&flat, 0.1), Err(DogeError::Contract(_))));
    }

    #[test]
    fn accumulated_gradients_add_up() {
        let mut m = Model::new(&tiny(), 4).unwrap();
        let b = batch(&[&[BOS, 3, 4, 5]]);
        m.accumulate_gradients(&b).unwrap();
        let once = crate::tensor::flatten_gradients(m.groups(), None).unwrap();
        m.accumulate_gradients(&b).unwrap();
        let twice = crate::tensor::flatten_gradients(m.groups(), None).unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            assert_eq!(2.0 * a, *b);
        }
        m.zero_grad();
        assert!(crate::tensor::flatten_gradients(m.groups(), None).is_err());
    }

    #[test]
    fn adam_moves_parameters_and_keeps_state() {
        let mut m = Model::new(&tiny(), 4).unwrap().with_update_rule(UpdateRule::adamw());
        let b = batch(&[&[BOS, 3, 4, 5]]);
        let l0 = m.loss(&b).unwrap();
        for _ in 0..20 {
            let (_, g) = m.flat_gradient(&b, None).unwrap();
            m.apply_update(&g, 1e-2).unwrap();
        }
        assert_eq!(m.adam_state().unwrap().t, 20);
        assert!(m.loss(&b).unwrap() < l0);
    }
}
