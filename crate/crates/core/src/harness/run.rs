use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use super::eval::{evaluate, EvalReport};
use super::plot::{emit_plot_data, read_wide, STEPWISE_CSV};
use super::train::{train_base, SamplingSchedule, TrainOutput, TRAIN_LOG};
use crate::cancellation::{measure_cancellation, select_groups, SelectionMask};
use crate::data::{derive_seed, DomainCorpus};
use crate::doge::{
    run_proxy_ood, run_proxy_universal, Curriculum, DomainWeights, ProxyOutcome, ScoreTarget, WeightTrajectory,
    WeightsFile,
};
use crate::error::{DogeError, Result};
use crate::model::{Model, UpdateRule};

/// Every `HOLDOUT_EVERY`-th sequence of each domain is held out (5%).
pub const HOLDOUT_EVERY: usize = 20;

pub const WEIGHTS_JSON: &str = "weights.json";
pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const PROXY_CHECKPOINT: &str = "proxy.ckpt";
pub const CANCELLATION_CSV: &str = "cancellation.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub train_sequences: IndexMap<String, usize>,
    pub valid_sequences: IndexMap<String, usize>,
    pub files_read: usize,
    pub files_skipped: usize,
    pub remainders_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub strategy: String,
    pub groups: Vec<String>,
    /// Share of parameters whose gradients enter the scores.
    pub parameter_fraction: f64,
    /// Share of the score inner-product work avoided.
    pub compute_saved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySummary {
    pub steps: usize,
    pub target: ScoreTarget,
    pub normalized_scores: bool,
    pub final_alpha: IndexMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSummary {
    pub steps: usize,
    pub staged: bool,
    pub tokens_consumed: IndexMap<String, u64>,
    pub sequences_drawn: IndexMap<String, u64>,
    pub expected_sequences: IndexMap<String, f64>,
    pub final_loss: Option<f64>,
}

/// Everything a run produced, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub domains: Vec<String>,
    pub corpus: Option<CorpusSummary>,
    pub mask: Option<MaskSummary>,
    pub proxy: Option<ProxySummary>,
    pub weights: Option<IndexMap<String, f64>>,
    pub base: Option<BaseSummary>,
    pub eval: Option<EvalReport>,
    pub files: Vec<String>,
}

fn named<T: Copy>(names: &[String], values: &[T]) -> IndexMap<String, T> {
    names.iter().cloned().zip(values.iter().copied()).collect()
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    summary: RunSummary,
}

impl Ctx<'_> {
    fn file(&mut self, name: &str) -> PathBuf {
        self.summary.files.push(name.to_string());
        self.out.join(name)
    }

    fn proxy_seed(&self) -> u64 {
        derive_seed(self.cfg.seed, "proxy", 0)
    }

    fn mask(&mut self, train: &DomainCorpus) -> Result<Option<SelectionMask>> {
        let cfg = self.cfg;
        let strategy = cfg.mask_strategy()?;
        if strategy.is_none() && cfg.mode != Mode::Cancellation {
            return Ok(None);
        }
        let proxy_cfg = cfg.proxy_model.as_ref().expect("validated");
        let model = Model::new(proxy_cfg, self.proxy_seed())?;
        let c = &cfg.cancellation;
        log::info!("measuring cancellation over {} steps", c.steps);
        let scores = measure_cancellation(
            &model,
            train,
            c.steps,
            c.batch_size,
            &c.lr,
            derive_seed(cfg.seed, "cancellation", 0),
        )?;
        scores.write_csv(&self.file(CANCELLATION_CSV))?;
        let Some(strategy) = strategy else {
            return Ok(None);
        };
        let mask = select_groups(&scores, strategy.k, strategy.mode);
        let sizes = model.group_sizes();
        let summary = MaskSummary {
            strategy: strategy.to_string(),
            groups: mask.groups.iter().map(|&g| scores.names[g].clone()).collect(),
            parameter_fraction: mask.parameter_fraction(&sizes),
            compute_saved: mask.compute_saved(&sizes),
        };
        log::info!(
            "mask {}: {} groups, {:.1}% of parameters, {:.1}% of score compute saved",
            summary.strategy,
            summary.groups.len(),
            100.0 * summary.parameter_fraction,
            100.0 * summary.compute_saved
        );
        self.summary.mask = Some(summary);
        Ok(Some(mask))
    }

    fn proxy(&mut self, train: &DomainCorpus, target: ScoreTarget, mask: Option<SelectionMask>) -> Result<ProxyOutcome> {
        let cfg = self.cfg;
        let mut hp = cfg.proxy.clone();
        hp.seed = self.proxy_seed();
        hp.threads = cfg.threads;
        hp.mask = mask.map(|m| m.groups);
        let proxy_cfg = cfg.proxy_model.as_ref().expect("validated");
        let outcome = match target {
            ScoreTarget::Universal => run_proxy_universal(train, proxy_cfg, &hp)?,
            ScoreTarget::Ood => run_proxy_ood(train, proxy_cfg, &hp)?,
        };
        let names = train.names();
        let stages = match cfg.curriculum_stages {
            Some(k) => outcome.trajectory.stage_average(k)?,
            None => Vec::new(),
        };
        WeightsFile::new(&names, &outcome.weights, &stages)?.save(&self.file(WEIGHTS_JSON))?;
        outcome.trajectory.write_csv(&self.file(TRAJECTORY_CSV), cfg.log_stride)?;
        outcome.model.save(&self.file(PROXY_CHECKPOINT))?;
        for p in emit_plot_data(&self.out, &outcome.trajectory, None)? {
            self.summary.files.push(file_name(&p));
        }
        let last = outcome.trajectory.steps.last().expect("at least one step");
        self.summary.proxy = Some(ProxySummary {
            steps: outcome.trajectory.len(),
            target,
            normalized_scores: hp.normalize_scores,
            final_alpha: named(&names, last.alpha.as_slice()),
        });
        self.summary.weights = Some(named(&names, outcome.weights.as_slice()));
        log::info!("domain weights: {:?}", self.summary.weights.as_ref().expect("just set"));
        Ok(outcome)
    }

    fn base(&mut self, train: &DomainCorpus, valid: &DomainCorpus, schedule: &SamplingSchedule) -> Result<()> {
        let cfg = self.cfg;
        let base_cfg = cfg.base_model.as_ref().expect("validated");
        let out = TrainOutput {
            dir: self.out.clone(),
            log_stride: cfg.log_stride,
        };
        let outcome = train_base(train, base_cfg, &cfg.base, schedule, cfg.seed, Some(&out))?;
        for f in [super::train::BASE_CHECKPOINT, super::train::BASE_STATE, TRAIN_LOG] {
            self.summary.files.push(f.to_string());
        }
        let names = train.names();
        let (steps, b) = (cfg.base.steps, cfg.base.batch_size);
        let expected = match schedule {
            SamplingSchedule::Fixed(w) => w.as_slice().iter().map(|a| (steps * b) as f64 * a).collect(),
            SamplingSchedule::Staged(c) => c.expected_sequences(steps, b),
        };
        self.summary.base = Some(BaseSummary {
            steps,
            staged: matches!(schedule, SamplingSchedule::Staged(_)),
            tokens_consumed: named(&names, &outcome.state.tokens),
            sequences_drawn: named(&names, &outcome.state.sequences),
            expected_sequences: named(&names, &expected),
            final_loss: outcome.losses.last().map(|l| l.1),
        });
        let mut report = evaluate(&outcome.model, valid, cfg.eval.batch_size)?;
        report.tokens_consumed = named(&names, &outcome.state.tokens);
        report.save(&self.file(EVAL_JSON))?;
        log::info!(
            "validation: average perplexity {:.3}, worst {:.3}",
            report.average_perplexity,
            report.worst_perplexity
        );
        self.summary.eval = Some(report);
        Ok(())
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn schedule_from_file(cfg: &RunConfig, names: &[String]) -> Result<SamplingSchedule> {
    let path = cfg.base.weights.as_ref().expect("validated");
    let file = WeightsFile::load(path)?;
    match cfg.curriculum_stages {
        None => Ok(SamplingSchedule::Fixed(file.weights_for(names)?)),
        Some(k) => {
            let stages = file.stages_for(names)?;
            if stages.len() != k {
                return Err(DogeError::config(format!(
                    "curriculum_stages: {k} requested but {} holds {} stages",
                    path.display(),
                    stages.len()
                )));
            }
            let total = stages.last().map_or(0, |s| s.end_step);
            Ok(SamplingSchedule::Staged(Curriculum::new(total, stages)?))
        }
    }
}

/// Executes one configured run and writes its artifacts and `summary.json`.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.effective_out_dir();
    fs::create_dir_all(&out)?;
    let mut ctx = Ctx {
        cfg,
        out: out.clone(),
        summary: RunSummary {
            mode: cfg.mode,
            seed: cfg.seed,
            out_dir: out,
            domains: Vec::new(),
            corpus: None,
            mask: None,
            proxy: None,
            weights: None,
            base: None,
            eval: None,
            files: Vec::new(),
        },
    };
    let (corpus, stats) = cfg.corpus.load(cfg.seed)?;
    if stats.files_skipped > 0 {
        log::warn!("{} corpus files skipped as undecodable", stats.files_skipped);
    }
    let (train, valid) = corpus.split_holdout(HOLDOUT_EVERY)?;
    let names = corpus.names();
    ctx.summary.domains = names.clone();
    ctx.summary.corpus = Some(CorpusSummary {
        train_sequences: train.domains().iter().map(|d| (d.name.clone(), d.sequences.len())).collect(),
        valid_sequences: valid.domains().iter().map(|d| (d.name.clone(), d.sequences.len())).collect(),
        files_read: stats.files_read,
        files_skipped: stats.files_skipped,
        remainders_dropped: stats.remainders_dropped,
    });

    match cfg.mode {
        Mode::Cancellation => {
            ctx.mask(&train)?;
        }
        Mode::ProxyUniversal | Mode::ProxyOod => {
            let target = if cfg.mode == Mode::ProxyOod { ScoreTarget::Ood } else { ScoreTarget::Universal };
            let mask = ctx.mask(&train)?;
            ctx.proxy(&train, target, mask)?;
        }
        Mode::FullPipeline => {
            let mask = ctx.mask(&train)?;
            let outcome = ctx.proxy(&train, cfg.target, mask)?;
            let schedule = match cfg.curriculum_stages {
                Some(k) => SamplingSchedule::Staged(Curriculum::from_trajectory(&outcome.trajectory, k)?),
                None => SamplingSchedule::Fixed(outcome.weights.clone()),
            };
            ctx.base(&train, &valid, &schedule)?;
        }
        Mode::BaseTrain => {
            let schedule = schedule_from_file(cfg, &names)?;
            ctx.base(&train, &valid, &schedule)?;
        }
        Mode::Eval => {
            let path = cfg.eval.checkpoint.as_ref().expect("validated");
            let model = Model::load(path, UpdateRule::default())?;
            let report = evaluate(&model, &valid, cfg.eval.batch_size)?;
            report.save(&ctx.file(EVAL_JSON))?;
            ctx.summary.eval = Some(report);
        }
    }
    let path = ctx.file(SUMMARY_JSON);
    fs::write(&path, serde_json::to_string_pretty(&ctx.summary)?)?;
    Ok(ctx.summary)
}

/// Evaluates a checkpoint on a corpus directory or JSONL file, using the
/// held-out split unless `all` is set.
pub fn eval_checkpoint(checkpoint: &Path, corpus: &Path, all: bool, batch: usize) -> Result<EvalReport> {
    let model = Model::load(checkpoint, UpdateRule::default())?;
    let context = model.config().context + 1;
    let is_jsonl = corpus.extension().is_some_and(|e| e == "jsonl");
    let (corpus, _) = if is_jsonl {
        DomainCorpus::ingest_jsonl(corpus, context)?
    } else {
        DomainCorpus::ingest_dir(corpus, context)?
    };
    let corpus = if all { corpus } else { corpus.split_holdout(HOLDOUT_EVERY)?.1 };
    evaluate(&model, &corpus, batch)
}

/// Regenerates plot CSVs from a finished run directory.
pub fn plot_run(dir: &Path) -> Result<Vec<PathBuf>> {
    let traj_path = dir.join(TRAJECTORY_CSV);
    if !traj_path.exists() {
        return Err(DogeError::data(format!("{} has no {TRAJECTORY_CSV}", dir.display())));
    }
    let summary: Option<RunSummary> = fs::read_to_string(dir.join(SUMMARY_JSON))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let (target, normalized) = summary
        .and_then(|s| s.proxy)
        .map_or((ScoreTarget::Universal, false), |p| (p.target, p.normalized_scores));
    let traj = WeightTrajectory::read_csv(&traj_path, target, normalized)?;
    let log_path = dir.join(TRAIN_LOG);
    let base = if log_path.exists() {
        let mut r = csv::Reader::from_path(&log_path)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok());
            match (parse(0), parse(1)) {
                (Some(s), Some(l)) => rows.push((s as usize, l)),
                _ => return Err(DogeError::format(&log_path, "unparsable training log row")),
            }
        }
        Some(rows)
    } else {
        None
    };
    emit_plot_data(dir, &traj, base.as_deref())
}

/// Step-wise weights as written to the plot CSV, for inspection.
pub fn read_stepwise(dir: &Path) -> Result<Vec<(usize, DomainWeights)>> {
    let (_, rows) = read_wide(&dir.join(STEPWISE_CSV))?;
    rows.into_iter().map(|(s, v)| Ok((s, DomainWeights::new(v)?))).collect()
}
