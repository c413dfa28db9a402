//! Experiment orchestration: pretraining the host, building the expert
//! pool, evaluating the pipeline and its two ablations, shot sweeps, and
//! the merge diagnostic.
//!
//! All randomness is derived from the experiment seed through
//! [`derive_seed`], so a report is a pure function of its configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::config::Defaults;
use crate::embedder::TrigramEmbedder;
use crate::ensemble::merge_weighted;
use crate::extractor::{make_extractor, Extraction, Source};
use crate::hash::fnv1a64;
use crate::lora::Adapter;
use crate::model::{Example, HostModel, ModelConfig};
use crate::numerics::{derive_seed, Rng};
use crate::pool::{ExpertPool, PoolError, UnitMeta};
use crate::tasks::{generate_corpus, with_digest, DemonstrationSet, Task};
use crate::trainer::{accuracy, adapt, build_expert, finetune, pretrain_base, TrainConfig, TrainError};

pub const BASE_FILE: &str = "base.model";
pub const EXPERTS_FILE: &str = "experts.txt";

// Seed-path tags.
const BASE: u64 = 1;
const EXPERT: u64 = 2;
const REPEAT: u64 = 3;
const DEMOS: u64 = 4;
const QUERIES: u64 = 5;
const TRAIN: u64 = 6;
const EXTRACT: u64 = 7;
const FRESH: u64 = 8;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Lora(#[from] crate::lora::LoraError),
    #[error(transparent)]
    Ensemble(#[from] crate::ensemble::EnsembleError),
    #[error(transparent)]
    Extract(#[from] crate::extractor::ExtractError),
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mode {
    Tegee,
    NoEnsemble,
    NoDefNoEnsemble,
}

pub const MODES: [Mode; 3] = [Mode::Tegee, Mode::NoEnsemble, Mode::NoDefNoEnsemble];

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Tegee => "tegee",
            Mode::NoEnsemble => "no_ensemble",
            Mode::NoDefNoEnsemble => "no_def_no_ensemble",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MODES.into_iter().find(|m| m.to_string() == s).ok_or_else(|| HarnessError::Invalid(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub defaults: Defaults,
    pub shots: usize,
    pub mode: Mode,
    pub extractor: Source,
    pub k: usize,
    pub tau: f64,
    /// Grow the pool with every evaluated demonstration set.
    pub continual: bool,
}

impl ExperimentConfig {
    pub fn new(seed: u64, defaults: Defaults) -> Self {
        ExperimentConfig {
            seed,
            model: ModelConfig { seed: derive_seed(seed, &[BASE, 0]), ..ModelConfig::default() },
            shots: defaults.evaluation.shots[0],
            mode: Mode::Tegee,
            extractor: Source::Oracle,
            k: defaults.retrieval.top_k,
            tau: defaults.retrieval.tau,
            continual: false,
            defaults,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.defaults.validate().map_err(|e| HarnessError::Invalid(e.to_string()))?;
        if self.shots == 0 || self.k == 0 {
            return Err(HarnessError::Invalid("shots and k must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(HarnessError::Invalid(format!("threshold {} outside (0, 1]", self.tau)));
        }
        Ok(())
    }

    /// Every setting that influences results, one `key value` per line.
    pub fn canonical_text(&self) -> String {
        let d = &self.defaults;
        let m = &self.model;
        // The extractor is irrelevant to the raw few-shot mode.
        let extractor = if self.mode == Mode::NoDefNoEnsemble { "none".to_string() } else { self.extractor.to_string() };
        [
            format!("seed {}", self.seed),
            format!("model {} {} {} {} {}", m.vocab_size, m.d_model, m.max_seq_len, m.label_count, m.seed),
            format!("adapter {} {} {}", d.adapter.rank, d.adapter.targets.join(","), d.adapter.init_seed),
            format!("retrieval {} {} {}", self.k, self.tau, d.retrieval.embed_dim),
            format!(
                "training {} {} {} {} {} {}",
                d.training.learning_rate,
                d.training.expert_batch,
                d.training.expert_steps,
                d.training.expert_examples,
                d.training.few_shot_batch,
                d.training.few_shot_steps
            ),
            format!("pretrain {} {} {}", d.pretrain.steps, d.pretrain.batch, d.pretrain.learning_rate),
            format!("evaluation {} {}", d.evaluation.eval_queries, d.evaluation.seeds),
            format!("experiment {} {}", d.experiment.max_train_tasks, d.experiment.max_test_tasks),
            format!("shots {}", self.shots),
            format!("mode {}", self.mode),
            format!("extractor {extractor}"),
            format!("continual {}", self.continual),
        ]
        .join("\n")
    }

    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.canonical_text().as_bytes())
    }

    /// One seed per evaluation repetition.
    pub fn repetition_seeds(&self) -> Vec<u64> {
        (0..self.defaults.evaluation.seeds as u64).map(|j| derive_seed(self.seed, &[REPEAT, j])).collect()
    }
}

/// `limit` tasks spread evenly over `tasks` (all of them when `limit` is 0
/// or not smaller).
pub fn spread<T: Clone>(tasks: &[T], limit: usize) -> Vec<T> {
    if limit == 0 || limit >= tasks.len() {
        return tasks.to_vec();
    }
    (0..limit).map(|i| tasks[i * tasks.len() / limit].clone()).collect()
}

pub fn train_tasks(cfg: &ExperimentConfig) -> Vec<Task> {
    spread(&generate_corpus(cfg.seed).train, cfg.defaults.experiment.max_train_tasks)
}

pub fn test_tasks(cfg: &ExperimentConfig) -> Vec<Task> {
    spread(&generate_corpus(cfg.seed).test, cfg.defaults.experiment.max_test_tasks)
}

/// The frozen host: generic copy-objective pretraining from the configured
/// initialization.
pub fn build_base(cfg: &ExperimentConfig) -> Result<HostModel, HarnessError> {
    let p = &cfg.defaults.pretrain;
    Ok(pretrain_base(cfg.model.clone(), p.steps, p.batch, p.learning_rate, derive_seed(cfg.seed, &[BASE, 1]))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSummary {
    pub task_id: String,
    pub added: bool,
    pub nearest_similarity: f64,
    pub validation_accuracy: Option<f64>,
}

/// One expert per training task whose definition passes the pool gate.
/// Tasks that would be rejected are not trained.
pub fn build_pool_experiment(
    cfg: &ExperimentConfig,
    base: &HostModel,
) -> Result<(ExpertPool, Vec<ExpertSummary>), HarnessError> {
    cfg.validate()?;
    let d = &cfg.defaults;
    let spec = d.adapter_spec();
    let mut pool = ExpertPool::new(spec.clone(), cfg.tau, TrigramEmbedder::new(d.retrieval.embed_dim))?;
    let mut summary = Vec::new();
    for (i, task) in train_tasks(cfg).iter().enumerate() {
        let def = task.definition();
        if !pool.admits(&def) {
            let nearest = pool.nearest(&def).map(|(_, s)| s).unwrap_or(-1.0);
            summary.push(ExpertSummary { task_id: task.id(), added: false, nearest_similarity: nearest, validation_accuracy: None });
            continue;
        }
        let data = task.sample(d.training.expert_examples, 0);
        let tc = TrainConfig::expert(d, derive_seed(cfg.seed, &[EXPERT, i as u64]));
        let out = build_expert(base, &data, &spec, d.adapter.init_seed, &tc)?;
        let mut meta = UnitMeta::new("pool-build", 0, out.train_count as u64);
        meta.validation_accuracy = out.validation_accuracy;
        let (added, nearest) = pool.try_add(&def, out.adapter, meta)?;
        summary.push(ExpertSummary { task_id: task.id(), added, nearest_similarity: nearest, validation_accuracy: out.validation_accuracy });
    }
    Ok((pool, summary))
}

pub fn summary_text(summary: &[ExpertSummary]) -> String {
    let mut out = String::from("task added nearest validation_accuracy\n");
    for s in summary {
        let acc = s.validation_accuracy.map(|a| format!("{a:.6}")).unwrap_or_else(|| "none".into());
        out.push_str(&format!("{} {} {:.6} {}\n", s.task_id, s.added, s.nearest_similarity, acc));
    }
    out
}

fn io(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Writes the pool, the host model and the expert summary into `dir`.
pub fn save_pool_dir(dir: &Path, pool: &ExpertPool, base: &HostModel, summary: &[ExpertSummary]) -> Result<(), HarnessError> {
    pool.save(dir)?;
    base.save(&dir.join(BASE_FILE))?;
    let path = dir.join(EXPERTS_FILE);
    std::fs::write(&path, summary_text(summary)).map_err(|e| io(&path, e))
}

pub fn load_pool_dir(dir: &Path) -> Result<(ExpertPool, HostModel), HarnessError> {
    Ok((ExpertPool::load(dir)?, HostModel::load(&dir.join(BASE_FILE))?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub task_id: String,
    pub category: String,
    /// Accuracy per repetition seed.
    pub accuracies: Vec<f64>,
}

impl TaskResult {
    pub fn mean(&self) -> f64 {
        mean(&self.accuracies)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub mode: Mode,
    pub shots: usize,
    pub extractor: Source,
    pub config_hash: u64,
    pub tasks: Vec<TaskResult>,
    /// Pool size after each continual step, empty unless the flag is set.
    pub growth: Vec<usize>,
}

impl Report {
    pub fn category_means(&self) -> BTreeMap<String, f64> {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for t in &self.tasks {
            groups.entry(t.category.clone()).or_default().push(t.mean());
        }
        groups.into_iter().map(|(k, v)| (k, mean(&v))).collect()
    }

    /// Mean over every (task, seed) cell.
    pub fn overall(&self) -> f64 {
        let all: Vec<f64> = self.tasks.iter().flat_map(|t| t.accuracies.iter().copied()).collect();
        mean(&all)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("tegee-report 1\n");
        out.push_str(&format!("mode {}\nshots {}\n", self.mode, self.shots));
        if self.mode != Mode::NoDefNoEnsemble {
            out.push_str(&format!("extractor {}\n", self.extractor));
        }
        out.push_str(&format!("config_hash {:016x}\n", self.config_hash));
        for t in &self.tasks {
            let accs: Vec<String> = t.accuracies.iter().map(|a| format!("{a:.6}")).collect();
            out.push_str(&format!("task {} {} {:.6} {}\n", t.task_id, t.category, t.mean(), accs.join(" ")));
        }
        for (c, m) in self.category_means() {
            out.push_str(&format!("category {c} {m:.6}\n"));
        }
        if !self.growth.is_empty() {
            let g: Vec<String> = self.growth.iter().map(|n| n.to_string()).collect();
            out.push_str(&format!("pool_growth {}\n", g.join(" ")));
        }
        out.push_str(&format!("overall {:.6}\nend\n", self.overall()));
        out
    }
}

/// Demonstrations and held-out queries for one (task, repetition) cell.
/// Demonstrations for different shot counts share a prefix.
pub fn cell_data(task: &Task, shots: usize, queries: usize, rep_seed: u64) -> (DemonstrationSet, Vec<Example>) {
    let cell = derive_seed(rep_seed, &[task.seed]);
    let shots_ex = task.sample(shots, derive_seed(cell, &[DEMOS]));
    let qs = task.sample(queries, derive_seed(cell, &[QUERIES]));
    let demos = DemonstrationSet::new(shots_ex, qs[0].tokens.clone(), Some(qs[0].label), Some(task.rule));
    (demos, qs)
}

fn fresh_adapter(cfg: &ExperimentConfig, base: &HostModel, cell: u64) -> Result<Adapter, HarnessError> {
    Ok(Adapter::init(&cfg.defaults.adapter_spec(), base, &mut Rng::new(derive_seed(cell, &[FRESH])))?)
}

/// Runs `cfg.mode` on every held-out task and repetition seed.
pub fn evaluate(cfg: &ExperimentConfig, pool: &ExpertPool, base: &HostModel) -> Result<Report, HarnessError> {
    cfg.validate()?;
    let d = &cfg.defaults;
    let mut local = if cfg.continual { Some(pool.clone()) } else { None };
    let mut growth = Vec::new();
    let mut results = Vec::new();
    let mut step = 0u64;
    let tasks = test_tasks(cfg);
    for task in &tasks {
        let mut accs = Vec::new();
        for rep in cfg.repetition_seeds() {
            let (demos, queries) = cell_data(task, cfg.shots, d.evaluation.eval_queries, rep);
            let cell = derive_seed(rep, &[task.seed]);
            let tc = TrainConfig::few_shot(d, derive_seed(cell, &[TRAIN]));
            let extractor = make_extractor(cfg.extractor, derive_seed(cell, &[EXTRACT]));
            let acc = match cfg.mode {
                Mode::Tegee => {
                    let current = local.as_ref().unwrap_or(pool);
                    let extraction = extractor.extract(&demos)?;
                    let a = adapt(current, base, demos.shots(), demos.query(), extraction, &tc, cfg.k)?;
                    let acc = accuracy(base, Some(&a.report.adapter), &queries)?;
                    if let Some(p) = local.as_mut() {
                        let meta = UnitMeta::new("continual", step, demos.shots().len() as u64);
                        p.try_add(&a.extraction.definition, a.report.adapter, meta)?;
                        growth.push(p.len());
                    }
                    acc
                }
                Mode::NoEnsemble => {
                    let def = extractor.extract(&demos)?.definition;
                    let prefix = |xs: &[Example]| -> Vec<Example> {
                        xs.iter().map(|e| Example::new(with_digest(&def, &e.tokens), e.label)).collect()
                    };
                    let init = fresh_adapter(cfg, base, cell)?;
                    let r = finetune(base, &init, &prefix(demos.shots()), &tc)?;
                    accuracy(base, Some(&r.adapter), &prefix(&queries))?
                }
                Mode::NoDefNoEnsemble => {
                    let init = fresh_adapter(cfg, base, cell)?;
                    let r = finetune(base, &init, demos.shots(), &tc)?;
                    accuracy(base, Some(&r.adapter), &queries)?
                }
            };
            step += 1;
            accs.push(acc);
        }
        results.push(TaskResult { task_id: task.id(), category: task.category().to_string(), accuracies: accs });
    }
    Ok(Report { mode: cfg.mode, shots: cfg.shots, extractor: cfg.extractor, config_hash: cfg.config_hash(), tasks: results, growth })
}

/// The definition `source` concludes for every held-out task, from the
/// demonstrations of the first repetition at `cfg.shots`.
pub fn extract_definitions(cfg: &ExperimentConfig, source: Source) -> Result<Vec<(String, Extraction)>, HarnessError> {
    cfg.validate()?;
    let rep = cfg.repetition_seeds()[0];
    let mut out = Vec::new();
    for task in test_tasks(cfg) {
        let (demos, _) = cell_data(&task, cfg.shots, 1, rep);
        let extractor = make_extractor(source, derive_seed(derive_seed(rep, &[task.seed]), &[EXTRACT]));
        out.push((task.id(), extractor.extract(&demos)?));
    }
    Ok(out)
}

/// All three modes at `cfg.shots`, with the pipeline's margin over each
/// ablation.
pub fn ablate(cfg: &ExperimentConfig, pool: &ExpertPool, base: &HostModel) -> Result<Vec<Report>, HarnessError> {
    MODES.iter().map(|&mode| evaluate(&ExperimentConfig { mode, ..cfg.clone() }, pool, base)).collect()
}

pub fn ablation_text(reports: &[Report]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&r.to_text());
    }
    if let Some(t) = reports.iter().find(|r| r.mode == Mode::Tegee) {
        for r in reports.iter().filter(|r| r.mode != Mode::Tegee) {
            out.push_str(&format!("delta tegee-{} {:.6}\n", r.mode, t.overall() - r.overall()));
        }
    }
    out
}

/// Mean accuracy of each mode over a grid of shot counts.
pub fn sweep(
    cfg: &ExperimentConfig,
    modes: &[Mode],
    grid: &[usize],
    pool: &ExpertPool,
    base: &HostModel,
) -> Result<Vec<Report>, HarnessError> {
    let mut out = Vec::new();
    for &mode in modes {
        for &shots in grid {
            out.push(evaluate(&ExperimentConfig { mode, shots, ..cfg.clone() }, pool, base)?);
        }
    }
    Ok(out)
}

/// `shots mode mean_accuracy` rows for plotting.
pub fn plot_data(reports: &[Report]) -> String {
    let mut out = String::from("shots mode mean_accuracy\n");
    for r in reports {
        out.push_str(&format!("{} {} {:.6}\n", r.shots, r.mode, r.overall()));
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeDiagnostic {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// Frobenius distance, over all targets, between the update of the
    /// factor-averaged adapter and the weighted mean of the experts' updates.
    pub distance: f64,
}

pub fn merge_diagnostic(pool: &ExpertPool, query: &str, k: usize) -> Result<MergeDiagnostic, HarnessError> {
    let r = pool.retrieve(query, k)?;
    let adapters: Vec<&Adapter> = r.entries.iter().map(|e| &pool.units()[e.index].adapter).collect();
    let weights = r.weights();
    let merged = merge_weighted(&adapters, &weights)?;
    let mut sq = 0.0;
    for target in pool.spec().targets() {
        let m = merged.delta(target)?;
        let mut mean_delta = vec![0.0; m.len()];
        for (a, w) in adapters.iter().zip(&weights) {
            for (acc, v) in mean_delta.iter_mut().zip(a.delta(target)?.data()) {
                *acc += w * v;
            }
        }
        sq += m.data().iter().zip(&mean_delta).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(MergeDiagnostic { indices: r.indices(), weights, distance: sq.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.3, 0.4]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[0.4, 0.3, 0.2, 0.1]) + 1.0).abs() < 1e-12);
        // Ties take the average rank: ranks (1, 2.5, 2.5, 4).
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.2, 0.4]);
        assert!((r - 0.9486832980505138).abs() < 1e-12, "{r}");
    }

    #[test]
    fn spread_keeps_order_and_count() {
        let v: Vec<usize> = (0..20).collect();
        assert_eq!(spread(&v, 4), vec![0, 5, 10, 15]);
        assert_eq!(spread(&v, 0).len(), 20);
    }

    #[test]
    fn modes_parse() {
        for m in MODES {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("ensemble".parse::<Mode>().is_err());
    }

    #[test]
    fn hash_tracks_settings() {
        let a = ExperimentConfig::new(1, Defaults::default());
        let b = ExperimentConfig { shots: 50, ..a.clone() };
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash(), ExperimentConfig::new(1, Defaults::default()).config_hash());
    }
}
