use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::BaseConfig;
use crate::data::{derive_seed, mixture_batch, stream, DomainCorpus, DomainId, PAD};
use crate::doge::{Curriculum, DomainWeights};
use crate::error::{DogeError, Result};
use crate::model::{Model, TransformerConfig};

/// Where base-training batches come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingSchedule {
    Fixed(DomainWeights),
    Staged(Curriculum),
}

impl SamplingSchedule {
    pub fn weights_at(&self, step: usize, total: usize) -> &DomainWeights {
        match self {
            SamplingSchedule::Fixed(w) => w,
            SamplingSchedule::Staged(c) => c.weights_at(step, total),
        }
    }

    pub fn k(&self) -> usize {
        self.weights_at(0, 1).k()
    }
}

/// Progress saved next to the base checkpoint.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    /// Non-padding tokens drawn per domain.
    pub tokens: Vec<u64>,
    pub sequences: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct BaseOutcome {
    pub model: Model,
    pub state: TrainState,
    /// `(step, loss)` at each logged step.
    pub losses: Vec<(usize, f64)>,
}

/// Files used for checkpoints and logs; `None` trains in memory only.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub log_stride: usize,
}

pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const BASE_STATE: &str = "base_state.json";
pub const TRAIN_LOG: &str = "train_log.csv";

fn save_state(dir: &Path, model: &Model, state: &TrainState) -> Result<()> {
    model.save(&dir.join(BASE_CHECKPOINT))?;
    fs::write(dir.join(BASE_STATE), serde_json::to_string_pretty(state)?)?;
    Ok(())
}

/// Trains a base model on batches from `schedule`. Step `t` draws its batch
/// from a stream keyed by `(seed, t)`, so a resumed run sees the same data as
/// an uninterrupted one.
pub fn train_base(
    corpus: &DomainCorpus,
    config: &TransformerConfig,
    base: &BaseConfig,
    schedule: &SamplingSchedule,
    seed: u64,
    output: Option<&TrainOutput>,
) -> Result<BaseOutcome> {
    let k = corpus.k();
    if schedule.k() != k {
        return Err(DogeError::config(format!("{} sampling weights for {k} domains", schedule.k())));
    }
    if config.context + 1 < corpus.context() {
        return Err(DogeError::config("base model context is shorter than the corpus sequences"));
    }
    let fresh = || -> Result<(Model, TrainState)> {
        let model = Model::new(config, derive_seed(seed, "base.init", 0))?.with_update_rule(base.update);
        Ok((
            model,
            TrainState {
                step: 0,
                tokens: vec![0; k],
                sequences: vec![0; k],
            },
        ))
    };
    let (mut model, mut state) = match output {
        Some(out) if base.resume && out.dir.join(BASE_CHECKPOINT).exists() => {
            let model = Model::load(&out.dir.join(BASE_CHECKPOINT), base.update)?;
            let state: TrainState = serde_json::from_str(&fs::read_to_string(out.dir.join(BASE_STATE))?)?;
            if model.config() != config || state.tokens.len() != k {
                return Err(DogeError::config("existing base checkpoint does not match this run"));
            }
            log::info!("resuming base training at step {}", state.step);
            (model, state)
        }
        _ => fresh()?,
    };
    let mut log = match output {
        Some(out) => {
            let path = out.dir.join(TRAIN_LOG);
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(state.step > 0)
                .write(true)
                .truncate(state.step == 0)
                .open(path)?;
            if state.step == 0 {
                writeln!(f, "step,loss,lr")?;
            }
            Some(f)
        }
        None => None,
    };
    let stride = output.map_or(1, |o| o.log_stride.max(1));
    let mut losses = Vec::new();
    let total = base.steps;
    while state.step < total {
        let t = state.step;
        let result = (|| -> Result<f64> {
            let alpha = schedule.weights_at(t, total);
            let batch = mixture_batch(corpus, alpha.as_slice(), base.batch_size, &mut stream(seed, "base.batch", t as u64))?;
            for r in 0..batch.rows() {
                if let DomainId::Train(i) = batch.domains()[r] {
                    state.sequences[i] += 1;
                    state.tokens[i] += batch.row(r).iter().filter(|&&x| x != PAD).count() as u64;
                }
            }
            let lr = base.lr.at(t, total);
            let (loss, grad) = model.flat_gradient(&batch, None)?;
            if !loss.is_finite() {
                return Err(DogeError::data(format!("non-finite training loss {loss}")));
            }
            model.apply_update(&grad, lr)?;
            Ok(loss)
        })();
        let loss = match result {
            Ok(l) => l,
            Err(e) => {
                if let Some(out) = output {
                    save_state(&out.dir, &model, &state)?;
                }
                return Err(e.at_step(t + 1));
            }
        };
        state.step += 1;
        if state.step % stride == 0 || state.step == total || state.step == 1 {
            losses.push((state.step, loss));
            if let Some(f) = &mut log {
                writeln!(f, "{},{},{}", state.step, loss, base.lr.at(t, total))?;
            }
            log::debug!("base step {}/{total}: loss {loss:.4}", state.step);
        }
        if let Some(out) = output {
            if base.checkpoint_every > 0 && state.step % base.checkpoint_every == 0 && state.step < total {
                save_state(&out.dir, &model, &state)?;
            }
        }
    }
    if let Some(out) = output {
        save_state(&out.dir, &model, &state)?;
    }
    Ok(BaseOutcome { model, state, losses })
}
