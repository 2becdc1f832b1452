use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cancellation::Strategy;
use crate::data::{generate_synthetic, DomainCorpus, IngestStats, SyntheticSpec};
use crate::doge::{DogeHyperparams, ScoreTarget};
use crate::error::{DogeError, Result};
use crate::model::{LrSchedule, TransformerConfig, UpdateRule};

/// Environment variable that replaces `out_dir` when set.
pub const OUT_ENV: &str = "DOGE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ProxyUniversal,
    ProxyOod,
    BaseTrain,
    Eval,
    Cancellation,
    FullPipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusSource {
    /// One subdirectory per domain, optional `_ood/`.
    Dir { path: PathBuf, context: usize },
    /// Records `{"domain": .., "text": ..}`.
    Jsonl { path: PathBuf, context: usize },
    Synthetic { spec: SyntheticSpec },
}

impl CorpusSource {
    /// Loads or generates the corpus. `seed` only affects synthetic draws.
    pub fn load(&self, seed: u64) -> Result<(DomainCorpus, IngestStats)> {
        match self {
            CorpusSource::Dir { path, context } => DomainCorpus::ingest_dir(path, *context),
            CorpusSource::Jsonl { path, context } => DomainCorpus::ingest_jsonl(path, *context),
            CorpusSource::Synthetic { spec } => Ok((generate_synthetic(spec, seed)?, IngestStats::default())),
        }
    }

    pub fn context(&self) -> usize {
        match self {
            CorpusSource::Dir { context, .. } | CorpusSource::Jsonl { context, .. } => *context,
            CorpusSource::Synthetic { spec } => spec.sequence_length,
        }
    }
}

/// Base-model training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    #[serde(default = "base_steps")]
    pub steps: usize,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default = "UpdateRule::adamw")]
    pub update: UpdateRule,
    /// Weights file to train with in `base-train` mode.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Steps between checkpoints (0 = only at the end).
    #[serde(default = "checkpoint_every")]
    pub checkpoint_every: usize,
    /// Continue from `base.ckpt` in the output directory when present.
    #[serde(default)]
    pub resume: bool,
}

fn base_steps() -> usize {
    5000
}
fn batch() -> usize {
    8
}
fn checkpoint_every() -> usize {
    1000
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            steps: base_steps(),
            batch_size: batch(),
            lr: LrSchedule::default(),
            update: UpdateRule::adamw(),
            weights: None,
            checkpoint_every: checkpoint_every(),
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CancellationConfig {
    #[serde(default = "cancel_steps")]
    pub steps: usize,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub lr: LrSchedule,
}

fn cancel_steps() -> usize {
    1000
}

impl Default for CancellationConfig {
    fn default() -> Self {
        CancellationConfig {
            steps: cancel_steps(),
            batch_size: batch(),
            lr: LrSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Checkpoint evaluated in `eval` mode.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Sequences per evaluation forward pass.
    #[serde(default = "eval_batch")]
    pub batch_size: usize,
}

fn eval_batch() -> usize {
    32
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            batch_size: eval_batch(),
        }
    }
}

/// A whole experiment, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "log_stride")]
    pub log_stride: usize,
    /// Target of the proxy scores in `full-pipeline` mode.
    #[serde(default = "universal")]
    pub target: ScoreTarget,
    /// Stage count for a curriculum schedule.
    #[serde(default)]
    pub curriculum_stages: Option<usize>,
    /// Parameter-group selection strategy such as `low30`.
    #[serde(default)]
    pub mask: Option<String>,
    /// Worker threads for per-domain gradient passes.
    #[serde(default = "threads")]
    pub threads: usize,
    pub corpus: CorpusSource,
    pub proxy_model: Option<TransformerConfig>,
    #[serde(default)]
    pub proxy: DogeHyperparams,
    pub base_model: Option<TransformerConfig>,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub cancellation: CancellationConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Output directory forced by the caller; beats `DOGE_OUT` and `out_dir`.
    #[serde(skip)]
    pub out_override: Option<PathBuf>,
}

fn log_stride() -> usize {
    10
}
fn universal() -> ScoreTarget {
    ScoreTarget::Universal
}
fn threads() -> usize {
    1
}

fn at(field: &str, e: DogeError) -> DogeError {
    let msg = match e {
        DogeError::Config(m) => m,
        other => other.to_string(),
    };
    DogeError::config(format!("{field}: {msg}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DogeError::config(e.to_string()))
    }

    /// Parses, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = RunConfig::from_toml(&text).map_err(|e| match e {
            DogeError::Config(m) => DogeError::format(path, m),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.corpus {
            CorpusSource::Dir { path, .. } | CorpusSource::Jsonl { path, .. } => fix(path),
            CorpusSource::Synthetic { .. } => {}
        }
        if let Some(p) = &mut self.base.weights {
            fix(p);
        }
        if let Some(p) = &mut self.eval.checkpoint {
            fix(p);
        }
        fix(&mut self.out_dir);
    }

    /// Output directory: the caller override, else `DOGE_OUT`, else `out_dir`.
    pub fn effective_out_dir(&self) -> PathBuf {
        if let Some(p) = &self.out_override {
            return p.clone();
        }
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }

    pub fn mask_strategy(&self) -> Result<Option<Strategy>> {
        self.mask.as_deref().map(str::parse).transpose().map_err(|e| at("mask", e))
    }

    fn needs_proxy(&self) -> bool {
        matches!(self.mode, Mode::ProxyUniversal | Mode::ProxyOod | Mode::FullPipeline | Mode::Cancellation)
    }

    fn needs_base(&self) -> bool {
        matches!(self.mode, Mode::BaseTrain | Mode::FullPipeline)
    }

    /// Checks every section, naming the offending key path.
    pub fn validate(&self) -> Result<()> {
        if self.log_stride == 0 {
            return Err(DogeError::config("log_stride: must be at least 1"));
        }
        if self.threads == 0 {
            return Err(DogeError::config("threads: must be at least 1"));
        }
        if self.curriculum_stages == Some(0) {
            return Err(DogeError::config("curriculum_stages: must be at least 1"));
        }
        self.mask_strategy()?;
        match &self.corpus {
            CorpusSource::Dir { path, context } | CorpusSource::Jsonl { path, context } => {
                if !path.exists() {
                    return Err(DogeError::config(format!("corpus.path: {} does not exist", path.display())));
                }
                if *context < 2 {
                    return Err(DogeError::config("corpus.context: must be at least 2"));
                }
            }
            CorpusSource::Synthetic { spec } => spec.validate().map_err(|e| at("corpus.spec", e))?,
        }
        let context = self.corpus.context();
        let check_model = |name: &str, m: &Option<TransformerConfig>| -> Result<()> {
            let m = m
                .as_ref()
                .ok_or_else(|| DogeError::config(format!("{name}: section required for mode {:?}", self.mode)))?;
            m.validate().map_err(|e| at(name, e))?;
            if m.context + 1 < context {
                return Err(DogeError::config(format!(
                    "{name}.context: {} cannot hold corpus sequences of {context} tokens",
                    m.context
                )));
            }
            Ok(())
        };
        if self.needs_proxy() {
            check_model("proxy_model", &self.proxy_model)?;
            self.proxy.validate().map_err(|e| at("proxy", e))?;
            if self.mode == Mode::Cancellation || self.mask.is_some() {
                let c = &self.cancellation;
                if c.steps == 0 || c.batch_size == 0 {
                    return Err(DogeError::config("cancellation: steps and batch_size must be at least 1"));
                }
                c.lr.validate().map_err(|e| at("cancellation.lr", e))?;
            }
        }
        if self.needs_base() {
            check_model("base_model", &self.base_model)?;
            if self.base.steps == 0 || self.base.batch_size == 0 {
                return Err(DogeError::config("base: steps and batch_size must be at least 1"));
            }
            self.base.lr.validate().map_err(|e| at("base.lr", e))?;
        }
        if self.mode == Mode::BaseTrain {
            match &self.base.weights {
                Some(p) if p.exists() => {}
                Some(p) => return Err(DogeError::config(format!("base.weights: {} does not exist", p.display()))),
                None => return Err(DogeError::config("base.weights: required in base-train mode")),
            }
        }
        if self.mode == Mode::Eval {
            match &self.eval.checkpoint {
                Some(p) if p.exists() => {}
                Some(p) => return Err(DogeError::config(format!("eval.checkpoint: {} does not exist", p.display()))),
                None => return Err(DogeError::config("eval.checkpoint: required in eval mode")),
            }
        }
        if self.eval.batch_size == 0 {
            return Err(DogeError::config("eval.batch_size: must be at least 1"));
        }
        Ok(())
    }
}
