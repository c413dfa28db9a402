//! The acceptance suite. Runs every criterion in order, prints one
//! `criterion N: PASS|FAIL ...` line each and exits non-zero if any fails.
//!
//! Tolerances and sample counts are pinned below.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use tegee::config::Defaults;
use tegee::embedder::{cosine, EmbeddingVector, TextEmbedder, TrigramEmbedder};
use tegee::ensemble::merge_weighted;
use tegee::extractor::{OracleExtractor, Source};
use tegee::harness::{
    ablate, build_base, build_pool_experiment, cell_data, evaluate, extract_definitions, spearman, test_tasks,
    ExperimentConfig, Mode, Report,
};
use tegee::model::{loss, MATRIX_NAMES};
use tegee::numerics::Rng;
use tegee::pool::{ExpertPool, PoolError, UnitMeta, WEIGHT_FLOOR};
use tegee::quality::{overlap_matrix, DefinitionSource};
use tegee::trainer::{base_audits, continual_step, TrainConfig};
use tegee::{Adapter, AdapterSpec, Example, Factors, HostModel, ModelConfig, Tensor};

const GRAD_TRIPLES: usize = 100;
const GRAD_EPS: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
// Below this magnitude the central difference is dominated by rounding in
// the loss (about 1e-10 absolute at eps 1e-5), so errors are measured
// against the floor instead.
const GRAD_REL_FLOOR: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const FORWARD_INPUTS: usize = 1000;
const DENSE_TOL: f64 = 1e-12;
const MERGE_INSTANCES: usize = 200;
const MERGE_ORACLE_INSTANCES: usize = 50;
const MERGE_TOL: f64 = 1e-12;
const RETRIEVAL_QUERIES: usize = 500;
const RETRIEVAL_MAX_POOL: usize = 200;
const RETRIEVAL_TOL: f64 = 1e-12;
const OVERLAP_SEEDS: u64 = 5;
const OVERLAP_SHOTS: usize = 5;
const NOISY_P: f64 = 0.5;
const ABLATION_SHOTS: usize = 5;
const ABLATION_MARGIN: f64 = 0.15;
const ABLATION_BUDGET: Duration = Duration::from_secs(600);
const SHOT_GRID: [usize; 4] = [5, 50, 100, 500];
const MIN_SPEARMAN: f64 = 0.8;
const SWEEP_BUDGET: Duration = Duration::from_secs(1200);
const CONTINUAL_STEPS: usize = 20;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn record(results: &mut Vec<Outcome>, id: usize, pass: bool, detail: String) {
    println!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    results.push(Outcome { id, pass, detail });
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gaussian(std))
}

/// A host with every matrix drawn at unit-variance scale.
fn random_model(rng: &mut Rng, cfg: ModelConfig) -> HostModel {
    let mats = MATRIX_NAMES
        .iter()
        .map(|n| {
            let (r, c) = cfg.shape_of(n).unwrap();
            gaussian_matrix(rng, r, c, 1.0 / (r as f64).sqrt())
        })
        .collect();
    HostModel::from_matrices(cfg, mats).unwrap()
}

fn random_adapter(rng: &mut Rng, model: &HostModel, spec: &AdapterSpec, std: f64) -> Adapter {
    let factors = spec
        .shapes(model.config())
        .unwrap()
        .into_iter()
        .map(|(d, k)| Factors { b: gaussian_matrix(rng, d, spec.rank(), std), a: gaussian_matrix(rng, spec.rank(), k, std) })
        .collect();
    Adapter::from_factors(spec.clone(), factors).unwrap()
}

fn random_tokens(rng: &mut Rng, cfg: &ModelConfig) -> Vec<u32> {
    let n = rng.between(1, cfg.max_seq_len);
    (0..n).map(|_| rng.below(cfg.vocab_size) as u32).collect()
}

fn random_spec(rng: &mut Rng) -> AdapterSpec {
    let mut targets: Vec<String> = MATRIX_NAMES.iter().filter(|_| rng.bernoulli(0.4)).map(|s| s.to_string()).collect();
    if targets.is_empty() {
        targets.push(MATRIX_NAMES[rng.below(MATRIX_NAMES.len())].to_string());
    }
    AdapterSpec::new(targets, rng.between(1, 4)).unwrap()
}

fn with_entry(adapter: &Adapter, target: usize, in_b: bool, j: usize, v: f64) -> Adapter {
    let mut factors = adapter.factors().to_vec();
    let t = if in_b { &factors[target].b } else { &factors[target].a };
    let mut data = t.data().to_vec();
    data[j] = v;
    let replaced = Tensor::matrix(t.rows(), t.cols(), data).unwrap();
    if in_b {
        factors[target].b = replaced;
    } else {
        factors[target].a = replaced;
    }
    Adapter::from_factors(adapter.spec().clone(), factors).unwrap()
}

fn criterion_gradients() -> (bool, String) {
    let start = Instant::now();
    let mut rng = Rng::new(0x67_7261_64);
    let mut worst = 0.0f64;
    let (mut entries, mut kinks) = (0usize, 0usize);
    for _ in 0..GRAD_TRIPLES {
        let d_model = [8, 16, 32][rng.below(3)];
        let cfg = ModelConfig { d_model, seed: rng.next_u64(), ..ModelConfig::default() };
        let model = random_model(&mut rng, cfg.clone());
        let spec = random_spec(&mut rng);
        let adapter = random_adapter(&mut rng, &model, &spec, 0.2);
        let ex = Example::new(random_tokens(&mut rng, &cfg), rng.below(cfg.label_count) as u32);
        let (_, grads) = model.adapter_gradients(&adapter, &ex).unwrap();
        let f = |a: &Adapter| loss(&model.forward(Some(a), &ex.tokens).unwrap(), ex.label).unwrap();
        let pattern = |a: &Adapter| model.relu_pattern(Some(a), &ex.tokens).unwrap();
        let here = pattern(&adapter);
        for (t, g) in grads.iter().enumerate() {
            for (in_b, analytic) in [(true, &g.b), (false, &g.a)] {
                let orig = if in_b { &adapter.factors()[t].b } else { &adapter.factors()[t].a };
                for j in 0..orig.len() {
                    let x = orig.data()[j];
                    let (up, down) = (with_entry(&adapter, t, in_b, j, x + GRAD_EPS), with_entry(&adapter, t, in_b, j, x - GRAD_EPS));
                    // a unit switching on or off inside the stencil makes the
                    // difference quotient straddle a kink
                    if pattern(&up) != here || pattern(&down) != here {
                        kinks += 1;
                        continue;
                    }
                    let (plus, minus) = (f(&up), f(&down));
                    let numeric = (plus - minus) / (2.0 * GRAD_EPS);
                    let a = analytic.data()[j];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
                    worst = worst.max(rel);
                    entries += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < GRAD_REL_TOL && elapsed < GRAD_BUDGET;
    (
        pass,
        format!(
            "max relative error {worst:.2e} over {entries} entries of {GRAD_TRIPLES} triples ({kinks} entries skipped at ReLU kinks), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Host with `W0 + B·A` written into each adapted matrix, by scalar loops.
fn densified(model: &HostModel, adapter: &Adapter) -> HostModel {
    let mats = MATRIX_NAMES
        .iter()
        .map(|name| {
            let w = model.matrix(name).unwrap();
            match adapter.factor(name) {
                None => w.clone(),
                Some(f) => Tensor::from_fn(w.rows(), w.cols(), |i, j| {
                    let mut s = 0.0;
                    for r in 0..f.b.cols() {
                        s += f.b.get(i, r) * f.a.get(r, j);
                    }
                    w.get(i, j) + s
                }),
            }
        })
        .collect();
    HostModel::from_matrices(model.config().clone(), mats).unwrap()
}

fn criterion_forward() -> (bool, String) {
    let mut rng = Rng::new(0x65_71_31);
    let mut identical = 0;
    let mut worst = 0.0f64;
    for i in 0..FORWARD_INPUTS {
        // a fresh host and target set every 50 inputs
        let block = (i / 50) as u64;
        let cfg = ModelConfig { seed: block, ..ModelConfig::default() };
        let model = random_model(&mut Rng::new(1000 + block), cfg.clone());
        let spec = random_spec(&mut Rng::new(2000 + block));
        let zero_b = Adapter::init(&spec, &model, &mut rng).unwrap();
        let tokens = random_tokens(&mut rng, &cfg);
        let plain = model.forward(None, &tokens).unwrap();
        let with_zero = model.forward(Some(&zero_b), &tokens).unwrap();
        if plain.data().iter().zip(with_zero.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            identical += 1;
        }
        let adapter = random_adapter(&mut rng, &model, &spec, 0.3);
        let low_rank = model.forward(Some(&adapter), &tokens).unwrap();
        let dense = densified(&model, &adapter).forward(None, &tokens).unwrap();
        for (a, b) in low_rank.data().iter().zip(dense.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let pass = identical == FORWARD_INPUTS && worst <= DENSE_TOL;
    (pass, format!("B=0 bit-identical on {identical}/{FORWARD_INPUTS} inputs; dense vs low-rank max diff {worst:.2e}"))
}

fn flat(a: &Adapter) -> Vec<f64> {
    a.factors().iter().flat_map(|f| f.b.data().iter().chain(f.a.data()).copied()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_merge() -> (bool, String) {
    let mut rng = Rng::new(0x6d_65_72);
    let model = HostModel::init(ModelConfig::default()).unwrap();
    let spec = AdapterSpec::default();
    let (mut identity, mut perm, mut rescale, mut envelope, mut oracle) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for inst in 0..MERGE_INSTANCES {
        let n = rng.between(1, 6);
        let ads: Vec<Adapter> = (0..n).map(|_| random_adapter(&mut rng, &model, &spec, 1.0)).collect();
        let ws: Vec<f64> = (0..n).map(|_| 0.01 + rng.uniform()).collect();
        let refs: Vec<&Adapter> = ads.iter().collect();
        let merged = flat(&merge_weighted(&refs, &ws).unwrap());

        identity = identity.max(max_diff(&flat(&merge_weighted(&refs[..1], &ws[..1]).unwrap()), &flat(&ads[0])));

        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let prefs: Vec<&Adapter> = order.iter().map(|&i| &ads[i]).collect();
        let pws: Vec<f64> = order.iter().map(|&i| ws[i]).collect();
        perm = perm.max(max_diff(&flat(&merge_weighted(&prefs, &pws).unwrap()), &merged));

        let c = 0.1 + 10.0 * rng.uniform();
        let sws: Vec<f64> = ws.iter().map(|w| w * c).collect();
        rescale = rescale.max(max_diff(&flat(&merge_weighted(&refs, &sws).unwrap()), &merged));

        let flats: Vec<Vec<f64>> = ads.iter().map(flat).collect();
        for (j, v) in merged.iter().enumerate() {
            let lo = flats.iter().map(|f| f[j]).fold(f64::INFINITY, f64::min);
            let hi = flats.iter().map(|f| f[j]).fold(f64::NEG_INFINITY, f64::max);
            envelope = envelope.max(lo - v).max(v - hi);
        }

        if inst < MERGE_ORACLE_INSTANCES {
            let total: f64 = ws.iter().sum();
            let mut expected = vec![0.0; merged.len()];
            for (f, w) in flats.iter().zip(&ws) {
                for (e, x) in expected.iter_mut().zip(f) {
                    *e += w / total * x;
                }
            }
            oracle = oracle.max(max_diff(&expected, &merged));
        }
    }
    let pass = [identity, perm, rescale, envelope, oracle].iter().all(|&e| e <= MERGE_TOL);
    (
        pass,
        format!(
            "identity {identity:.1e}, permutation {perm:.1e}, rescale {rescale:.1e}, envelope excess {envelope:.1e}, scalar oracle {oracle:.1e}"
        ),
    )
}

const VOCAB: [&str; 24] = [
    "report", "the", "greatest", "symbol", "in", "whole", "sequence", "echo", "first", "final", "digit", "total",
    "odd", "zero", "one", "nine", "positions", "among", "count", "present", "smallest", "name", "entry", "right",
];

fn random_definition(rng: &mut Rng) -> String {
    let n = rng.between(3, 12);
    (0..n).map(|_| VOCAB[rng.below(VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

/// Exhaustive reference: every unit scored, fully sorted, top `k` kept and
/// floored weights normalized.
fn brute_force(units: &[EmbeddingVector], q: &EmbeddingVector, k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = units.iter().enumerate().map(|(i, e)| (i, cosine(q, e).unwrap())).collect();
    for i in 0..scored.len() {
        for j in 0..scored.len() - 1 - i {
            let (a, b) = (scored[j], scored[j + 1]);
            if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                scored.swap(j, j + 1);
            }
        }
    }
    scored.truncate(k);
    let floored: Vec<f64> = scored.iter().map(|s| s.1.max(WEIGHT_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    scored.iter().zip(&floored).map(|(s, f)| (s.0, f / total)).collect()
}

fn criterion_retrieval() -> (bool, String) {
    let mut rng = Rng::new(0x72_65_74);
    let model = HostModel::init(ModelConfig::default()).unwrap();
    let spec = AdapterSpec::default();
    let adapter = Adapter::init(&spec, &model, &mut rng).unwrap();
    let sizes = [1usize, 2, 3, 7, 20, 50, 90, 130, 170, RETRIEVAL_MAX_POOL];
    let per_pool = RETRIEVAL_QUERIES / sizes.len();
    let (mut mismatched, mut worst, mut queries) = (0, 0.0f64, 0);
    for &size in &sizes {
        let mut pool = ExpertPool::new(spec.clone(), 1.0, TrigramEmbedder::default()).unwrap();
        while pool.len() < size {
            pool.try_add(&random_definition(&mut rng), adapter.clone(), UnitMeta::new("oracle", 0, 0)).unwrap();
        }
        let embeddings: Vec<EmbeddingVector> = pool.units().iter().map(|u| u.embedding.clone()).collect();
        for _ in 0..per_pool {
            let q = random_definition(&mut rng);
            let k = rng.between(1, 6);
            let got = pool.retrieve(&q, k).unwrap();
            let want = brute_force(&embeddings, &pool.embedder().embed(&q), k);
            queries += 1;
            if got.indices() != want.iter().map(|w| w.0).collect::<Vec<_>>() {
                mismatched += 1;
                continue;
            }
            worst = worst.max(max_diff(&got.weights(), &want.iter().map(|w| w.1).collect::<Vec<_>>()));
        }
    }
    let pass = mismatched == 0 && worst <= RETRIEVAL_TOL;
    (pass, format!("{mismatched}/{queries} index mismatches, max weight diff {worst:.1e}, pools up to {RETRIEVAL_MAX_POOL}"))
}

fn criterion_overlap(pool: &ExpertPool, defaults: &Defaults) -> (bool, String) {
    let k = defaults.retrieval.top_k;
    let (mut diag_ok, mut symmetric) = (true, true);
    let (mut hyp, mut noisy) = (0.0, 0.0);
    let mut task_count = 0;
    for seed in 0..OVERLAP_SEEDS {
        let cfg = ExperimentConfig { shots: OVERLAP_SHOTS, ..ExperimentConfig::new(seed, defaults.clone()) };
        let mut sources = Vec::new();
        for (name, src) in [("oracle", Source::Oracle), ("hypothesis", Source::Hypothesis), ("noisy", Source::Noisy(NOISY_P))] {
            let definitions = extract_definitions(&cfg, src).unwrap().into_iter().map(|(id, e)| (id, e.definition)).collect();
            sources.push(DefinitionSource { name: name.into(), definitions });
        }
        let m = overlap_matrix(pool, &sources, k).unwrap();
        task_count = m.task_count;
        for i in 0..3 {
            diag_ok &= m.counts[i][i] == m.task_count * k;
            for j in 0..3 {
                symmetric &= m.counts[i][j] == m.counts[j][i];
            }
        }
        hyp += m.get("oracle", "hypothesis").unwrap() as f64 / OVERLAP_SEEDS as f64;
        noisy += m.get("oracle", "noisy").unwrap() as f64 / OVERLAP_SEEDS as f64;
    }
    let pass = diag_ok && symmetric && hyp > noisy;
    (
        pass,
        format!(
            "diagonal = {task_count}x{k} = {} on every seed: {diag_ok}; symmetric: {symmetric}; mean overlap with oracle: hypothesis {hyp:.1} vs noisy({NOISY_P}) {noisy:.1}",
            task_count * k
        ),
    )
}

fn criterion_ablation(reports: &[Report], elapsed: Duration) -> (bool, String) {
    let get = |m: Mode| reports.iter().find(|r| r.mode == m).unwrap();
    let (t, ne, nd) = (get(Mode::Tegee), get(Mode::NoEnsemble), get(Mode::NoDefNoEnsemble));
    let tasks_ahead = t.tasks.iter().zip(&nd.tasks).filter(|(a, b)| a.mean() >= b.mean()).count();
    let gap = t.overall() - nd.overall();
    let pass = gap >= ABLATION_MARGIN && t.overall() >= ne.overall() && elapsed < ABLATION_BUDGET;
    (
        pass,
        format!(
            "tegee {:.4}, no_ensemble {:.4}, no_def_no_ensemble {:.4}, gap {gap:.4} (need >= {ABLATION_MARGIN}); tegee >= raw on {tasks_ahead}/{} tasks; {:.0}s",
            t.overall(),
            ne.overall(),
            nd.overall(),
            t.tasks.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_shots(means: &[f64], elapsed: Duration) -> (bool, String) {
    let grid: Vec<f64> = SHOT_GRID.iter().map(|&s| s as f64).collect();
    let rho = spearman(&grid, means);
    let weakly = means.windows(2).all(|w| w[1] >= w[0]);
    let early = means[2] - means[0];
    let late = means[3] - means[2];
    let pass = rho >= MIN_SPEARMAN && weakly && late < early && elapsed < SWEEP_BUDGET;
    let shown: Vec<String> = SHOT_GRID.iter().zip(means).map(|(s, m)| format!("{s}:{m:.4}")).collect();
    (
        pass,
        format!(
            "means {}; spearman {rho:.3}; weakly increasing {weakly}; gain 5->100 {early:.4} vs 100->500 {late:.4}; {:.0}s",
            shown.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_continual(pool: &ExpertPool, base: &HostModel, defaults: &Defaults) -> (bool, String) {
    let cfg = ExperimentConfig::new(0, defaults.clone());
    let mut live = pool.clone();
    let embedder = *pool.embedder();
    let mut reference: Vec<EmbeddingVector> = pool.units().iter().map(|u| u.embedding.clone()).collect();
    let rep = cfg.repetition_seeds()[0];
    let mut sets = Vec::new();
    for task in test_tasks(&cfg).into_iter().take(CONTINUAL_STEPS) {
        sets.push(cell_data(&task, ABLATION_SHOTS, 1, rep).0);
    }
    let (mut expected, mut grew) = (0, 0);
    for (step, demos) in sets.iter().enumerate() {
        let def = demos.provenance().unwrap().definition();
        let e = embedder.embed(&def);
        let nearest = reference.iter().map(|r| cosine(&e, r).unwrap()).fold(f64::NEG_INFINITY, f64::max);
        if nearest < pool.tau() {
            expected += 1;
            reference.push(e);
        }
        let tc = TrainConfig::few_shot(defaults, step as u64);
        let out = continual_step(&mut live, base, demos, &OracleExtractor, &tc, cfg.k, step as u64).unwrap();
        grew += out.pool_grew as usize;
    }
    let after_novel = live.len();
    let mut duplicate_growth = 0;
    for (step, demos) in sets.iter().enumerate() {
        let tc = TrainConfig::few_shot(defaults, 100 + step as u64);
        let out = continual_step(&mut live, base, demos, &OracleExtractor, &tc, cfg.k, 100 + step as u64).unwrap();
        duplicate_growth += out.pool_grew as usize;
    }
    let pass = after_novel - pool.len() == expected && grew == expected && duplicate_growth == 0 && live.len() == after_novel;
    (
        pass,
        format!(
            "{CONTINUAL_STEPS} steps grew the pool by {} with {expected} definitions below tau {}; duplicate resubmissions grew it by {duplicate_growth}",
            after_novel - pool.len(),
            pool.tau()
        ),
    )
}

fn same_pool(a: &ExpertPool, b: &ExpertPool) -> bool {
    let bits = |e: &EmbeddingVector| e.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    a.len() == b.len()
        && a.tau().to_bits() == b.tau().to_bits()
        && a.spec() == b.spec()
        && a.units().iter().zip(b.units()).all(|(x, y)| {
            x.definition == y.definition
                && x.meta == y.meta
                && bits(&x.embedding) == bits(&y.embedding)
                && x.adapter.to_bytes() == y.adapter.to_bytes()
        })
}

fn copy_dir(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for e in std::fs::read_dir(src).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), dst.join(e.file_name())).unwrap();
    }
}

fn criterion_persistence(pool: &ExpertPool) -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("pool");
    pool.save(&dir).unwrap();
    let loaded = ExpertPool::load(&dir).unwrap();
    let pool_ok = same_pool(pool, &loaded);
    let mut adapters_ok = true;
    for (i, u) in pool.units().iter().enumerate() {
        let p = tmp.path().join(format!("a{i}.adapter"));
        u.adapter.save(&p).unwrap();
        adapters_ok &= Adapter::load(&p).unwrap().to_bytes() == u.adapter.to_bytes();
    }

    type Corrupt = fn(&mut Vec<u8>);
    let cases: [(&str, &str, Corrupt); 4] = [
        ("truncated manifest", "manifest.txt", |b| b.truncate(b.len() / 2)),
        ("manifest bad header", "manifest.txt", |b| b[0] = b'X'),
        ("truncated adapter", "unit-0003.adapter", |b| b.truncate(b.len() - 5)),
        ("adapter trailing bytes", "unit-0000.adapter", |b| b.extend_from_slice(b"junk")),
    ];
    let mut corrupt_ok = true;
    let mut seen = Vec::new();
    for (i, (label, file, corrupt)) in cases.iter().enumerate() {
        let bad = tmp.path().join(format!("bad{i}"));
        copy_dir(&dir, &bad);
        let path = bad.join(file);
        let mut bytes = std::fs::read(&path).unwrap();
        corrupt(&mut bytes);
        std::fs::write(&path, bytes).unwrap();
        let mut live = loaded.clone();
        let err = live.reload_from(&bad);
        let untouched = same_pool(&live, &loaded);
        match err {
            Err(PoolError::Format { file: f, error }) if f.ends_with(file) && untouched => {
                seen.push(format!("{label} @{}", error.offset));
            }
            other => {
                corrupt_ok = false;
                seen.push(format!("{label}: unexpected {other:?}, untouched {untouched}"));
            }
        }
    }
    let truncated = tmp.path().join("t.adapter");
    let bytes = pool.units()[0].adapter.to_bytes();
    std::fs::write(&truncated, &bytes[..bytes.len() - 1]).unwrap();
    let single = matches!(Adapter::load(&truncated), Err(tegee::LoraError::Format(_)));
    let pass = pool_ok && adapters_ok && corrupt_ok && single;
    (
        pass,
        format!("pool round trip bit-exact {pool_ok}; adapter round trips {adapters_ok}; corruption -> {}", seen.join(", ")),
    )
}

const TINY: &str = "[pretrain]\nsteps = 150\n[training]\nexpert_steps = 30\nexpert_examples = 80\nfew_shot_steps = 15\n\
[evaluation]\neval_queries = 15\nseeds = 2\n[experiment]\nmax_train_tasks = 8\nmax_test_tasks = 3\n";

fn tegee_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_tegee")).args(args).output().map(|o| o.status.success()).unwrap_or(false)
}

fn criterion_determinism() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let p = |rel: &str| tmp.path().join(rel).display().to_string();
    std::fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    let cfg = p("tiny.toml");
    let mut ran = true;
    for run in ["a", "b"] {
        ran &= tegee_cli(&["build-pool", "--seed", "7", "--config", &cfg, "--out", &p(&format!("pool-{run}"))]);
    }
    for run in ["a", "b"] {
        let out = p(&format!("ablate-{run}"));
        ran &= tegee_cli(&["ablate", "--seed", "7", "--config", &cfg, "--pool", &p("pool-a"), "--out", &out]);
    }
    if !ran {
        return (false, "a command failed".into());
    }
    let read = |rel: &str| std::fs::read(tmp.path().join(rel)).unwrap();
    let reports = read("ablate-a/ablation.txt") == read("ablate-b/ablation.txt");
    let mut pools = true;
    for e in std::fs::read_dir(tmp.path().join("pool-a")).unwrap() {
        let name = e.unwrap().file_name();
        let name = name.to_string_lossy();
        pools &= read(&format!("pool-a/{name}")) == read(&format!("pool-b/{name}"));
    }
    (reports && pools, format!("ablation reports byte-identical {reports}; rebuilt pool directories byte-identical {pools}"))
}

fn main() -> ExitCode {
    let suite = Instant::now();
    let defaults = Defaults::default();
    let mut results = Vec::new();

    let (p, d) = criterion_gradients();
    record(&mut results, 1, p, d);
    let (p, d) = criterion_forward();
    record(&mut results, 2, p, d);
    let (p, d) = criterion_merge();
    record(&mut results, 3, p, d);
    let (p, d) = criterion_retrieval();
    record(&mut results, 4, p, d);

    let cfg = ExperimentConfig::new(0, defaults.clone());
    let t = Instant::now();
    let base = build_base(&cfg).unwrap();
    let base_sum = base.checksum();
    let (pool, _) = build_pool_experiment(&cfg, &base).unwrap();
    println!("setup: host and pool of {} experts in {:.0}s", pool.len(), t.elapsed().as_secs_f64());

    let (p, d) = criterion_overlap(&pool, &defaults);
    record(&mut results, 6, p, d);

    let cfg5 = ExperimentConfig { shots: ABLATION_SHOTS, ..cfg.clone() };
    let t = Instant::now();
    let reports = ablate(&cfg5, &pool, &base).unwrap();
    let (p, d) = criterion_ablation(&reports, t.elapsed());
    record(&mut results, 7, p, d);

    let t = Instant::now();
    let mut means = Vec::new();
    for shots in SHOT_GRID {
        let r = evaluate(&ExperimentConfig { shots, mode: Mode::Tegee, ..cfg.clone() }, &pool, &base).unwrap();
        means.push(r.overall());
    }
    let (p, d) = criterion_shots(&means, t.elapsed());
    record(&mut results, 8, p, d);

    let (p, d) = criterion_continual(&pool, &base, &defaults);
    record(&mut results, 9, p, d);
    let (p, d) = criterion_persistence(&pool);
    record(&mut results, 10, p, d);
    let (p, d) = criterion_determinism();
    record(&mut results, 11, p, d);

    let (checks, mismatches) = base_audits();
    let unchanged = base.checksum() == base_sum;
    record(
        &mut results,
        5,
        checks > 0 && mismatches == 0 && unchanged,
        format!("{checks} checksum audits around training calls, {mismatches} mismatches; host checksum unchanged {unchanged}"),
    );

    results.sort_by_key(|r| r.id);
    println!("\nacceptance summary ({:.0}s)", suite.elapsed().as_secs_f64());
    for r in &results {
        println!("criterion {}: {} {}", r.id, if r.pass { "PASS" } else { "FAIL" }, r.detail);
    }
    if results.iter().all(|r| r.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
