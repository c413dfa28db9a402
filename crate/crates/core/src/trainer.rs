//! Adapter fine-tuning with the host model frozen, expert building, the
//! continual step, and generic pretraining of the host itself.
//!
//! Every training call digests the host matrices before and after and
//! records the comparison in a process-wide audit counter.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::config::Defaults;
use crate::ensemble::{merge_weighted, EnsembleError};
use crate::extractor::{ExtractError, Extraction, Extractor};
use crate::lora::{Adapter, AdapterSpec, Factors, LoraError};
use crate::model::{matrix_index, Example, HostModel, ModelConfig, ModelError, MATRIX_NAMES};
use crate::numerics::{derive_seed, NumericsError, Rng, Tensor};
use crate::pool::{ExpertPool, PoolError, RetrievalResult, UnitMeta};

static AUDITS: AtomicU64 = AtomicU64::new(0);
static MISMATCHES: AtomicU64 = AtomicU64::new(0);

/// `(checks, mismatches)` of host checksums around training calls made so
/// far in this process.
pub fn base_audits() -> (u64, u64) {
    (AUDITS.load(Ordering::SeqCst), MISMATCHES.load(Ordering::SeqCst))
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
    #[error("host model changed during training")]
    BaseModified,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, steps: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig { learning_rate, steps, batch_size, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed }
    }

    pub fn few_shot(d: &Defaults, seed: u64) -> Self {
        TrainConfig::new(d.training.learning_rate, d.training.few_shot_steps, d.training.few_shot_batch, seed)
    }

    pub fn expert(d: &Defaults, seed: u64) -> Self {
        TrainConfig::new(d.training.learning_rate, d.training.expert_steps, d.training.expert_batch, seed)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Contract(format!("learning rate {} is not a nonnegative number", self.learning_rate)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Contract("steps and batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
    pub adapter: Adapter,
    pub base_checksum_before: u64,
    pub base_checksum_after: u64,
}

impl TrainReport {
    /// `step loss` lines for plotting.
    pub fn loss_table(&self) -> String {
        let mut out = String::from("step loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i} {l:.6}\n"));
        }
        out
    }
}

/// Adaptive-moment optimizer over a list of tensors.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Adam { lr, beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[&Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn audit(before: u64, model: &HostModel) -> Result<u64, TrainError> {
    let after = model.checksum();
    AUDITS.fetch_add(1, Ordering::SeqCst);
    if after != before {
        MISMATCHES.fetch_add(1, Ordering::SeqCst);
        return Err(TrainError::BaseModified);
    }
    Ok(after)
}

fn diverged(e: ModelError, step: usize) -> TrainError {
    match e {
        ModelError::Numerics(NumericsError::NonFinite(_)) => TrainError::Divergence { step },
        e => TrainError::Model(e),
    }
}

fn adapter_from(spec: &AdapterSpec, params: &[Tensor]) -> Adapter {
    let factors = params.chunks(2).map(|p| Factors { b: p[0].clone(), a: p[1].clone() }).collect();
    Adapter::from_factors(spec.clone(), factors).expect("trained factors keep their shapes")
}

/// Runs `cfg.steps` optimizer steps on minibatches drawn with replacement
/// from `data`, updating only the adapter factors.
pub fn finetune(model: &HostModel, init: &Adapter, data: &[Example], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Contract("no training examples".into()));
    }
    let before = model.checksum();
    let spec = init.spec();
    let targets: Vec<usize> = spec.targets().iter().map(|t| matrix_index(t).expect("validated target")).collect();
    let mut params: Vec<Tensor> = init.factors().iter().flat_map(|f| [f.b.clone(), f.a.clone()]).collect();
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, &params);
    let mut rng = Rng::new(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&Example> = (0..cfg.batch_size).map(|_| &data[rng.below(data.len())]).collect();
        let current = adapter_from(spec, &params);
        let (g, root, b) = model.batch_loss(Some(&current), &batch, false, true).map_err(|e| diverged(e, step))?;
        let loss = g.value(root).item();
        if !loss.is_finite() {
            return Err(TrainError::Divergence { step });
        }
        let grads = g.backward(root).map_err(|e| diverged(e.into(), step))?;
        let ids: Vec<_> = targets.iter().flat_map(|&i| {
            let (bn, an) = b.factors(i).expect("adapter bound");
            [bn, an]
        }).collect();
        let gs: Vec<&Tensor> = ids.iter().map(|id| grads.get(*id).expect("gradient for every factor")).collect();
        adam.step(&mut params, &gs);
        if params.iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(TrainError::Divergence { step });
        }
        losses.push(loss);
    }
    let after = audit(before, model)?;
    Ok(TrainReport { losses, adapter: adapter_from(spec, &params), base_checksum_before: before, base_checksum_after: after })
}

/// Share of `data` whose argmax prediction equals the label.
pub fn accuracy(model: &HostModel, adapter: Option<&Adapter>, data: &[Example]) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for e in data {
        if model.predict(adapter, &e.tokens)? == e.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Debug)]
pub struct ExpertOutcome {
    pub adapter: Adapter,
    pub train_count: usize,
    pub validation_count: usize,
    pub validation_accuracy: Option<f64>,
    pub warnings: Vec<String>,
    pub report: TrainReport,
}

/// Seeded 9:1 split into `(train, validation)`; the validation share is
/// rounded down.
pub fn split_nine_to_one(data: &[Example], seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = Rng::new(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    let n_val = data.len() / 10;
    let val = order[..n_val].iter().map(|&i| data[i].clone()).collect();
    let train = order[n_val..].iter().map(|&i| data[i].clone()).collect();
    (train, val)
}

/// Trains a fresh adapter (factor `A` drawn from `init_seed`) on the
/// training part of a seeded 9:1 split and measures the validation part.
pub fn build_expert(
    model: &HostModel,
    data: &[Example],
    spec: &AdapterSpec,
    init_seed: u64,
    cfg: &TrainConfig,
) -> Result<ExpertOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Contract("no task examples".into()));
    }
    let (train, val) = split_nine_to_one(data, derive_seed(cfg.seed, &[0x5917]));
    let mut warnings = Vec::new();
    if val.is_empty() {
        warnings.push(format!("{} examples leave no validation split", data.len()));
    }
    let init = Adapter::init(spec, model, &mut Rng::new(init_seed))?;
    let report = finetune(model, &init, &train, cfg)?;
    let validation_accuracy =
        if val.is_empty() { None } else { Some(accuracy(model, Some(&report.adapter), &val)?) };
    Ok(ExpertOutcome {
        adapter: report.adapter.clone(),
        train_count: train.len(),
        validation_count: val.len(),
        validation_accuracy,
        warnings,
        report,
    })
}

/// Everything one pass of the pipeline produces on a demonstration set.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub extraction: Extraction,
    pub retrieval: RetrievalResult,
    pub merged: Adapter,
    pub report: TrainReport,
    pub prediction: u32,
}

/// Extract a definition, retrieve the top `k` experts, merge them, fine-tune
/// on the shots and predict the query. The pool is not modified.
pub fn adapt(
    pool: &ExpertPool,
    model: &HostModel,
    shots: &[Example],
    query: &[u32],
    extraction: Extraction,
    cfg: &TrainConfig,
    k: usize,
) -> Result<Adapted, TrainError> {
    let retrieval = pool.retrieve(&extraction.definition, k)?;
    let adapters: Vec<&Adapter> = retrieval.entries.iter().map(|e| &pool.units()[e.index].adapter).collect();
    let merged = merge_weighted(&adapters, &retrieval.weights())?;
    let report = finetune(model, &merged, shots, cfg)?;
    let prediction = model.predict(Some(&report.adapter), query)?;
    Ok(Adapted { extraction, retrieval, merged, report, prediction })
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub prediction: u32,
    pub adapter: Adapter,
    pub definition: String,
    pub pool_grew: bool,
    pub nearest_similarity: f64,
    pub retrieval: RetrievalResult,
}

/// One continual-learning step: adapt to the demonstrations, predict the
/// query, then offer the fine-tuned adapter to the pool under the concluded
/// definition.
pub fn continual_step(
    pool: &mut ExpertPool,
    model: &HostModel,
    demos: &crate::tasks::DemonstrationSet,
    extractor: &dyn Extractor,
    cfg: &TrainConfig,
    k: usize,
    step: u64,
) -> Result<StepOutcome, TrainError> {
    let extraction = extractor.extract(demos)?;
    let a = adapt(pool, model, demos.shots(), demos.query(), extraction, cfg, k)?;
    let meta = UnitMeta::new("continual", step, demos.shots().len() as u64);
    let definition = a.extraction.definition.clone();
    let (pool_grew, nearest_similarity) = pool.try_add(&definition, a.report.adapter.clone(), meta)?;
    Ok(StepOutcome {
        prediction: a.prediction,
        adapter: a.report.adapter,
        definition,
        pool_grew,
        nearest_similarity,
        retrieval: a.retrieval,
    })
}

/// One pretraining example: a random sequence of 4 to 12 symbols below 16
/// labelled with one of its own tokens, picked uniformly.
fn copy_example(rng: &mut Rng, label_count: usize) -> Example {
    let n = rng.between(crate::tasks::MIN_LEN, crate::tasks::MAX_LEN);
    let tokens: Vec<u32> = (0..n).map(|_| rng.below(label_count.min(16)) as u32).collect();
    let label = tokens[rng.below(n)];
    Example::new(tokens, label)
}

/// Full-parameter training of a freshly initialized host on the generic
/// copy-a-token objective, so that the frozen host carries content-aware
/// attention before any adapter is trained.
pub fn pretrain_base(cfg: ModelConfig, steps: usize, batch: usize, learning_rate: f64, seed: u64) -> Result<HostModel, TrainError> {
    let mut model = HostModel::init(cfg.clone())?;
    if steps == 0 {
        return Ok(model);
    }
    let tc = TrainConfig::new(learning_rate, steps, batch, seed);
    tc.validate()?;
    let mut params: Vec<Tensor> = model.matrices().map(|(_, m)| m.clone()).collect();
    let mut adam = Adam::new(tc.learning_rate, tc.beta1, tc.beta2, tc.eps, &params);
    let mut rng = Rng::new(seed);
    for step in 0..steps {
        let examples: Vec<Example> = (0..batch).map(|_| copy_example(&mut rng, cfg.label_count)).collect();
        let refs: Vec<&Example> = examples.iter().collect();
        let (g, root, b) = model.batch_loss(None, &refs, true, false).map_err(|e| diverged(e, step))?;
        if !g.value(root).item().is_finite() {
            return Err(TrainError::Divergence { step });
        }
        let grads = g.backward(root).map_err(|e| diverged(e.into(), step))?;
        let gs: Vec<&Tensor> = (0..MATRIX_NAMES.len())
            .map(|i| grads.get(b.base(i).expect("all matrices trainable")).expect("gradient for every matrix"))
            .collect();
        adam.step(&mut params, &gs);
        model = HostModel::from_matrices(cfg.clone(), params.clone())?;
    }
    Ok(model)
}
