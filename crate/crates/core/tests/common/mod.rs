#![allow(dead_code)]

use doge_core::cancellation::PerSampleModel;
use doge_core::data::{
    generate_synthetic, Batch, ComponentSpec, DomainCorpus, DomainId, SyntheticDomain, SyntheticOod, SyntheticSpec,
    Token, BOS,
};
use doge_core::model::Model;
use doge_core::{NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Magnitude below which a gradient entry is compared in absolute terms.
pub const SCALE_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Difference relative to the larger magnitude. Near-zero entries are
/// scaled by `SCALE_FLOOR` so finite-difference noise doesn't dominate.
pub fn element_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// A scalar function of several leaf tensors, recorded on a fresh tape.
pub type Graph<'a> = dyn Fn(&mut Tape, &[NodeId]) -> doge_core::Result<NodeId> + 'a;

fn evaluate(inputs: &[Tensor], f: &Graph) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &ids).unwrap();
    tape.value(out).data()[0]
}

/// Largest element error between backprop and central differences over
/// every input element.
pub fn gradcheck(inputs: &[Tensor], f: &Graph) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &ids).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for e in 0..t.len() {
            let x = t.data()[e];
            work[i].data_mut()[e] = x + FD_STEP;
            let up = evaluate(&work, f);
            work[i].data_mut()[e] = x - FD_STEP;
            let down = evaluate(&work, f);
            work[i].data_mut()[e] = x;
            worst = worst.max(element_error(analytic[i][e], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Reduces any tensor to a scalar with fixed random weights so that every
/// output element gets a distinct upstream gradient.
pub fn project(tape: &mut Tape, x: NodeId, seed: u64) -> doge_core::Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let w = randn(&mut rng(seed), &shape);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

/// A random chain of 3 to 6 ops over a [rows x cols] input plus whatever
/// parameter leaves the chosen ops need. Returns the inputs and the graph.
pub fn random_composition(seed: u64) -> (Vec<Tensor>, Box<Graph<'static>>) {
    #[derive(Clone, Copy, Debug)]
    enum Step {
        MatMul(usize),
        AddBias,
        AddSame,
        Scale(f64),
        Gelu,
        Softmax,
        LayerNorm,
        Mul,
        Attention(usize),
        Slice(usize, usize),
    }
    let mut r = rng(seed);
    let seq = r.random_range(2..5);
    let rows = seq * r.random_range(1..3);
    let mut cols = 2 * r.random_range(1..4);
    let embed = r.random_bool(0.5);
    let vocab = 7;
    let mut inputs = Vec::new();
    let indices: Vec<usize> = (0..rows).map(|_| r.random_range(0..vocab)).collect();
    if embed {
        inputs.push(randn(&mut r, &[vocab, cols]));
    } else {
        inputs.push(randn(&mut r, &[rows, cols]));
    }
    let mut steps = Vec::new();
    for _ in 0..r.random_range(3..7) {
        let step = match r.random_range(0..10) {
            0 => {
                let out = r.random_range(2..6);
                inputs.push(randn(&mut r, &[cols, out]).scaled(0.5));
                cols = out;
                Step::MatMul(inputs.len() - 1)
            }
            1 => {
                inputs.push(randn(&mut r, &[cols]));
                Step::AddBias
            }
            2 => {
                inputs.push(randn(&mut r, &[rows, cols]));
                Step::AddSame
            }
            3 => Step::Scale(r.random_range(-2.0..2.0)),
            4 => Step::Gelu,
            5 => Step::Softmax,
            6 => {
                let mut gain = randn(&mut r, &[cols]);
                gain.data_mut().iter_mut().for_each(|g| *g += 1.0);
                inputs.push(gain);
                inputs.push(randn(&mut r, &[cols]));
                Step::LayerNorm
            }
            7 => {
                inputs.push(randn(&mut r, &[rows, cols]));
                Step::Mul
            }
            8 if cols % 2 == 0 => Step::Attention(if r.random_bool(0.5) { 2 } else { 1 }),
            _ if cols > 1 => {
                let start = r.random_range(0..cols - 1);
                let end = r.random_range(start + 1..=cols);
                cols = end - start;
                Step::Slice(start, end)
            }
            _ => Step::Gelu,
        };
        steps.push(step);
    }
    let finish_ce = r.random_bool(0.5);
    let targets: Vec<Option<usize>> = (0..rows)
        .map(|i| (i % 3 != 2).then(|| r.random_range(0..cols)))
        .collect();
    let targets = if targets.iter().all(Option::is_none) {
        vec![Some(0); rows]
    } else {
        targets
    };
    let graph = move |tape: &mut Tape, ids: &[NodeId]| -> doge_core::Result<NodeId> {
        let mut x = if embed { tape.embedding_lookup(ids[0], &indices)? } else { ids[0] };
        let mut next = 1;
        let mut take = |n: usize| {
            let s = next;
            next += n;
            s
        };
        for step in &steps {
            x = match *step {
                Step::MatMul(i) => {
                    take(1);
                    tape.matmul(x, ids[i])?
                }
                Step::AddBias | Step::AddSame => {
                    let i = take(1);
                    tape.add(x, ids[i])?
                }
                Step::Scale(c) => tape.scale(x, c)?,
                Step::Gelu => tape.gelu(x)?,
                Step::Softmax => tape.softmax_rows(x)?,
                Step::LayerNorm => {
                    let i = take(2);
                    tape.layer_norm(x, ids[i], ids[i + 1], 1e-5)?
                }
                Step::Mul => {
                    let i = take(1);
                    tape.mul(x, ids[i])?
                }
                Step::Attention(heads) => {
                    let q = tape.scale(x, 0.7)?;
                    let v = tape.gelu(x)?;
                    tape.causal_attention(q, x, v, seq, heads)?
                }
                Step::Slice(a, b) => tape.slice_cols(x, a, b)?,
            };
        }
        if finish_ce {
            tape.cross_entropy(x, &targets)
        } else {
            project(tape, x, seed ^ 0x5eed)
        }
    };
    (inputs, Box::new(graph))
}

trait Scaled {
    fn scaled(self, c: f64) -> Self;
}

impl Scaled for Tensor {
    fn scaled(mut self, c: f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v *= c);
        self
    }
}

/// Gradcheck of the whole model loss: every parameter of every group.
pub fn model_gradcheck(model: &Model, batch: &Batch) -> f64 {
    let (_, grads) = model.gradients(batch).unwrap();
    let mut work = model.clone();
    let mut worst: f64 = 0.0;
    for g in 0..grads.len() {
        for e in 0..grads[g].len() {
            let x = work.groups()[g].values[e];
            work.groups_mut()[g].values[e] = x + FD_STEP;
            let up = work.loss(batch).unwrap();
            work.groups_mut()[g].values[e] = x - FD_STEP;
            let down = work.loss(batch).unwrap();
            work.groups_mut()[g].values[e] = x;
            worst = worst.max(element_error(grads[g][e], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

pub fn batch_of(seqs: &[Vec<Token>], len: usize) -> Batch {
    let refs: Vec<&[Token]> = seqs.iter().map(Vec::as_slice).collect();
    Batch::from_sequences(&refs, vec![DomainId::Train(0); refs.len()], len).unwrap()
}

pub fn random_sequences(seed: u64, rows: usize, len: usize, vocab: usize) -> Vec<Vec<Token>> {
    let mut r = rng(seed);
    (0..rows)
        .map(|_| {
            let mut s = vec![BOS];
            s.extend((1..len).map(|_| r.random_range(0..vocab.min(256)) as Token));
            s
        })
        .collect()
}

/// Least squares on a linear model, one group per weight vector.
/// Loss on sample `(x, y)` is `0.5 * (w . x - y)^2` with `x` split across
/// the groups.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub groups: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LinearSample {
    pub x: Vec<Vec<f64>>,
    pub y: f64,
}

impl LinearModel {
    pub fn predict(&self, x: &[Vec<f64>]) -> f64 {
        self.groups
            .iter()
            .zip(x)
            .map(|(w, xs)| w.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

impl PerSampleModel for LinearModel {
    type Sample = LinearSample;

    fn group_names(&self) -> Vec<String> {
        (0..self.groups.len()).map(|i| format!("w{i}")).collect()
    }

    fn group_values(&self) -> Vec<&[f64]> {
        self.groups.iter().map(Vec::as_slice).collect()
    }

    fn sample_gradient(&self, s: &LinearSample) -> doge_core::Result<Vec<Vec<f64>>> {
        let resid = self.predict(&s.x) - s.y;
        Ok(s.x.iter().map(|xs| xs.iter().map(|v| resid * v).collect()).collect())
    }

    fn sgd_step(&mut self, direction: &[Vec<f64>], eta: f64) -> doge_core::Result<()> {
        for (w, d) in self.groups.iter_mut().zip(direction) {
            w.iter_mut().zip(d).for_each(|(a, b)| *a -= eta * b);
        }
        Ok(())
    }
}

fn domains(mixtures: &[Vec<f64>]) -> Vec<SyntheticDomain> {
    mixtures
        .iter()
        .enumerate()
        .map(|(i, m)| SyntheticDomain {
            name: format!("d{i}"),
            mixture: m.clone(),
        })
        .collect()
}

/// Two domains drawn from the same generator.
pub fn symmetric_spec() -> SyntheticSpec {
    SyntheticSpec {
        components: vec![ComponentSpec::new(6, 2.0)],
        domains: domains(&[vec![1.0], vec![1.0]]),
        ood: None,
        sequence_length: 33,
        sequences_per_domain: 128,
        seed: 11,
    }
}

/// Three disjoint-support domains plus an OOD target mixing their
/// generators with `sources`.
pub fn ood_spec(sources: Vec<f64>) -> SyntheticSpec {
    SyntheticSpec {
        components: vec![ComponentSpec::new(6, 2.0); 3],
        domains: domains(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]),
        ood: Some(SyntheticOod {
            name: "_ood".into(),
            sources,
        }),
        sequence_length: 33,
        sequences_per_domain: 128,
        seed: 11,
    }
}

/// One nearly deterministic domain and three order-2 domains sharing
/// transition structure pairwise.
pub fn heterogeneous_spec() -> SyntheticSpec {
    let hard = ComponentSpec {
        symbols: 5,
        sharpness: 3.0,
        memory: 1.0,
    };
    SyntheticSpec {
        components: vec![
            ComponentSpec {
                symbols: 3,
                sharpness: 20.0,
                memory: 0.0,
            },
            hard.clone(),
            hard.clone(),
            hard,
        ],
        domains: vec![
            SyntheticDomain {
                name: "easy".into(),
                mixture: vec![1.0, 0.0, 0.0, 0.0],
            },
            SyntheticDomain {
                name: "b".into(),
                mixture: vec![0.0, 0.6, 0.4, 0.0],
            },
            SyntheticDomain {
                name: "c".into(),
                mixture: vec![0.0, 0.0, 0.6, 0.4],
            },
            SyntheticDomain {
                name: "d".into(),
                mixture: vec![0.0, 0.4, 0.0, 0.6],
            },
        ],
        ood: None,
        sequence_length: 33,
        sequences_per_domain: 400,
        seed: 3,
    }
}

pub fn corpus(spec: &SyntheticSpec, seed: u64) -> DomainCorpus {
    generate_synthetic(spec, seed).unwrap()
}
