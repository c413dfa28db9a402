//! Command-line driver for the expert-pool lab.
//!
//! Exit codes: 0 on success, 1 on a usage error (the usage text is printed),
//! 2 on a data or format error (the message names the file and byte offset).

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};

use tegee::config::load_defaults;
use tegee::embedder::cosine;
use tegee::extractor::{definitions_from_text, definitions_to_text, make_extractor, Source};
use tegee::harness::{
    ablate, ablation_text, build_base, build_pool_experiment, cell_data, extract_definitions, load_pool_dir,
    plot_data, save_pool_dir, sweep, test_tasks, ExperimentConfig, Mode, MODES,
};
use tegee::pool::ExpertPool;
use tegee::quality::{overlap_matrix, DefinitionSource};
use tegee::tasks::{export_corpus, file_stem, generate_corpus, DemonstrationSet};
use tegee::trainer::{adapt, TrainConfig};
use tegee::HostModel;

#[derive(Parser)]
#[command(name = "tegee", version, about = "Task-definition-guided expert ensembling lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// TOML file overriding entries of the embedded defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus and one demonstration file per held-out task.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Shots per demonstration file (default: smallest of the shot grid).
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Pretrain the host and train one expert per admissible training task.
    BuildPool {
        #[command(flatten)]
        common: Common,
        /// Insertion threshold (default from the config).
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Adapt to one demonstration file and predict its query.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        demos: PathBuf,
        /// oracle, hypothesis or noisy:P
        #[arg(long, default_value = "oracle")]
        extractor: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Evaluate the pipeline and both ablations on the held-out tasks.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long, default_value = "oracle")]
        extractor: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Mean accuracy over a grid of shot counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        /// Comma-separated shot counts (default: the configured grid).
        #[arg(long)]
        shots: Option<String>,
        /// A mode name or `all`.
        #[arg(long, default_value = "tegee")]
        mode: String,
        #[arg(long, default_value = "oracle")]
        extractor: String,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Pairwise overlap of the experts retrieved under different definition sources.
    Overlap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        /// Comma-separated extractor names or definition files.
        #[arg(long, default_value = "oracle,hypothesis,noisy:0.5")]
        sources: String,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// List the units of a pool.
    InspectPool {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
    },
}

/// A problem with the command line itself rather than with its inputs.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            let mut cmd = Cli::command();
            cmd.build();
            let name = std::env::args().nth(1).unwrap_or_default();
            let text = match cmd.find_subcommand_mut(&name) {
                Some(sub) => sub.render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!("error: {e}\n\n{text}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus { common, shots } => gen_corpus(&common, shots),
        Command::BuildPool { common, tau } => build_pool(&common, tau),
        Command::Run { common, pool, demos, extractor, k } => run(&common, &pool, &demos, &extractor, k),
        Command::Ablate { common, pool, shots, extractor, k } => {
            let source = parse_source(&extractor)?;
            let (mut cfg, pool, base) = experiment(&common, &pool, k)?;
            cfg.shots = positive("--shots", shots.unwrap_or(cfg.shots))?;
            cfg.extractor = source;
            let reports = ablate(&cfg, &pool, &base)?;
            let path = write_out(&common.out, "ablation.txt", &ablation_text(&reports))?;
            for r in &reports {
                println!("{} {:.4}", r.mode, r.overall());
            }
            summary("ablate", &cfg, &path);
            Ok(())
        }
        Command::Sweep { common, pool, shots, mode, extractor, k } => {
            let source = parse_source(&extractor)?;
            let grid = shots.map(|list| parse_grid(&list)).transpose()?;
            let modes = if mode == "all" { MODES.to_vec() } else { vec![Mode::from_str(&mode).map_err(|e| usage(e.to_string()))?] };
            let (mut cfg, pool, base) = experiment(&common, &pool, k)?;
            cfg.extractor = source;
            let grid = grid.unwrap_or_else(|| cfg.defaults.evaluation.shots.clone());
            let reports = sweep(&cfg, &modes, &grid, &pool, &base)?;
            let text: String = reports.iter().map(|r| r.to_text()).collect();
            write_out(&common.out, "sweep.txt", &text)?;
            let plot = plot_data(&reports);
            let path = write_out(&common.out, "plot.txt", &plot)?;
            print!("{plot}");
            summary("sweep", &cfg, &path);
            Ok(())
        }
        Command::Overlap { common, pool, sources, shots, k } => overlap(&common, &pool, &sources, shots, k),
        Command::InspectPool { common, pool } => inspect(&common, &pool),
    }
}

fn config(common: &Common) -> Result<ExperimentConfig> {
    let defaults = match &common.config {
        Some(p) => load_defaults(Some(p)).with_context(|| format!("{}", p.display()))?,
        None => load_defaults(None)?,
    };
    Ok(ExperimentConfig::new(common.seed, defaults))
}

/// Configuration, pool and host for commands that work on a built pool.
fn experiment(common: &Common, dir: &Path, k: Option<usize>) -> Result<(ExperimentConfig, ExpertPool, HostModel)> {
    let mut cfg = config(common)?;
    cfg.k = positive("--k", k.unwrap_or(cfg.k))?;
    let (pool, base) = load_pool_dir(dir).with_context(|| format!("loading pool {}", dir.display()))?;
    cfg.tau = pool.tau();
    cfg.model = base.config().clone();
    Ok((cfg, pool, base))
}

fn positive(flag: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(usage(format!("{flag} must be positive")));
    }
    Ok(v)
}

fn parse_source(s: &str) -> Result<Source> {
    Source::from_str(s).map_err(|e| usage(format!("--extractor: {e}")))
}

fn parse_grid(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("--shots: `{s}` is not a positive count"))),
        })
        .collect()
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn summary(command: &str, cfg: &ExperimentConfig, wrote: &Path) {
    println!("{command}: ok, seed {}, config {:016x}, wrote {}", cfg.seed, cfg.config_hash(), wrote.display());
}

fn gen_corpus(common: &Common, shots: Option<usize>) -> Result<()> {
    let cfg = config(common)?;
    let shots = positive("--shots", shots.unwrap_or(cfg.shots))?;
    let corpus = generate_corpus(cfg.seed);
    export_corpus(&corpus, &common.out, cfg.defaults.training.expert_examples)
        .with_context(|| format!("writing corpus to {}", common.out.display()))?;
    let demos_dir = common.out.join("demos");
    let rep = cfg.repetition_seeds()[0];
    for task in test_tasks(&cfg) {
        let (demos, _) = cell_data(&task, shots, 1, rep);
        write_out(&demos_dir, &format!("{}.demos", file_stem(&task.id())), &demos.to_text())?;
    }
    println!("{} training tasks, {} held-out tasks, {shots}-shot demonstrations", corpus.train.len(), corpus.test.len());
    summary("gen-corpus", &cfg, &common.out);
    Ok(())
}

fn build_pool(common: &Common, tau: Option<f64>) -> Result<()> {
    let mut cfg = config(common)?;
    if let Some(t) = tau {
        if !(t > 0.0 && t <= 1.0) {
            return Err(usage(format!("--tau {t} must lie in (0, 1]")));
        }
        cfg.tau = t;
    }
    let base = build_base(&cfg)?;
    let (pool, experts) = build_pool_experiment(&cfg, &base)?;
    save_pool_dir(&common.out, &pool, &base, &experts).with_context(|| format!("saving pool to {}", common.out.display()))?;
    let accs: Vec<f64> = experts.iter().filter_map(|e| e.validation_accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
    println!("{} experts, {} tasks skipped by the gate, mean validation accuracy {mean:.4}", pool.len(), experts.len() - pool.len());
    summary("build-pool", &cfg, &common.out);
    Ok(())
}

fn run(common: &Common, dir: &Path, demos_path: &Path, extractor: &str, k: Option<usize>) -> Result<()> {
    let source = parse_source(extractor)?;
    let (mut cfg, pool, base) = experiment(common, dir, k)?;
    cfg.extractor = source;
    let bytes = std::fs::read(demos_path).with_context(|| format!("reading {}", demos_path.display()))?;
    let demos = DemonstrationSet::from_text(&bytes).with_context(|| format!("{}", demos_path.display()))?;
    let extraction = make_extractor(cfg.extractor, cfg.seed).extract(&demos)?;
    let tc = TrainConfig::few_shot(&cfg.defaults, cfg.seed);
    let a = adapt(&pool, &base, demos.shots(), demos.query(), extraction, &tc, cfg.k)?;
    let mut text = format!("definition {}\nconfidence {:.6}\n", a.extraction.definition, a.extraction.confidence);
    for e in &a.retrieval.entries {
        text.push_str(&format!(
            "expert {} similarity {:.6} weight {:.6} {}\n",
            e.index,
            e.similarity,
            e.weight,
            pool.units()[e.index].definition
        ));
    }
    text.push_str(&format!("prediction {}\n", a.prediction));
    if let Some(ok) = demos.is_correct(a.prediction) {
        text.push_str(&format!("correct {ok}\n"));
    }
    let path = write_out(&common.out, "run.txt", &text)?;
    print!("{text}");
    summary("run", &cfg, &path);
    Ok(())
}

fn overlap(common: &Common, dir: &Path, sources: &str, shots: Option<usize>, k: Option<usize>) -> Result<()> {
    let (mut cfg, pool, _) = experiment(common, dir, k)?;
    cfg.shots = positive("--shots", shots.unwrap_or(cfg.shots))?;
    let mut defs = Vec::new();
    for name in sources.split(',').map(str::trim) {
        if let Ok(source) = Source::from_str(name) {
            let records = extract_definitions(&cfg, source)?;
            let file = format!("definitions-{}.txt", name.replace(':', "-"));
            write_out(&common.out, &file, &definitions_to_text(name, &records))?;
            let definitions = records.into_iter().map(|(id, e)| (id, e.definition)).collect();
            defs.push(DefinitionSource { name: name.to_string(), definitions });
        } else if Path::new(name).is_file() {
            let bytes = std::fs::read(name).with_context(|| format!("reading {name}"))?;
            let (label, definitions) = definitions_from_text(&bytes).with_context(|| name.to_string())?;
            defs.push(DefinitionSource { name: label, definitions });
        } else {
            return Err(usage(format!("--sources: `{name}` is neither an extractor nor a definitions file")));
        }
    }
    let m = overlap_matrix(&pool, &defs, cfg.k)?;
    let path = write_out(&common.out, "overlap.txt", &m.to_text())?;
    print!("{}", m.table());
    summary("overlap", &cfg, &path);
    Ok(())
}

fn inspect(common: &Common, dir: &Path) -> Result<()> {
    let (cfg, pool, base) = experiment(common, dir, None)?;
    let units = pool.units();
    let mut text = format!(
        "units {} tau {} rank {} targets {} base {:016x}\n",
        units.len(),
        pool.tau(),
        pool.spec().rank(),
        pool.spec().targets().join(","),
        base.checksum()
    );
    text.push_str("index source step examples validation nearest definition\n");
    for (i, u) in units.iter().enumerate() {
        let nearest = units
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, v)| cosine(&u.embedding, &v.embedding).unwrap_or(f64::NAN))
            .fold(f64::NEG_INFINITY, f64::max);
        let val = u.meta.validation_accuracy.map(|v| format!("{v:.4}")).unwrap_or_else(|| "none".into());
        text.push_str(&format!(
            "{i} {} {} {} {val} {nearest:.4} {}\n",
            u.meta.source, u.meta.created_step, u.meta.example_count, u.definition
        ));
    }
    let path = write_out(&common.out, "inspect.txt", &text)?;
    print!("{text}");
    summary("inspect-pool", &cfg, &path);
    Ok(())
}
