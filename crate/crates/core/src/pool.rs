//! The expert pool: task units of (definition, embedding, adapter, metadata)
//! with top-k similarity retrieval and threshold-gated insertion.
//!
//! A unit enters the pool only if its definition's similarity to every
//! stored definition is below the pool threshold, so stored definitions stay
//! pairwise distinct.

use std::fs;
use std::path::{Path, PathBuf};

use crate::embedder::{cosine, EmbeddingVector, TextEmbedder, TrigramEmbedder};
use crate::format::{parse_usize, ByteReader, FormatError};
use crate::lora::{Adapter, AdapterSpec};

/// Floor applied to similarities before they are normalized into weights.
pub const WEIGHT_FLOOR: f64 = 1e-6;

const MANIFEST: &str = "manifest.txt";

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("the pool is empty")]
    Empty,
    #[error("adapter spec does not match the pool spec")]
    SpecMismatch,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{file}: {error}")]
    Format { file: String, error: FormatError },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitMeta {
    /// Where the unit came from, e.g. `pool-build` or `continual`.
    pub source: String,
    pub created_step: u64,
    pub example_count: u64,
    pub validation_accuracy: Option<f64>,
}

impl UnitMeta {
    pub fn new(source: &str, created_step: u64, example_count: u64) -> Self {
        UnitMeta { source: source.to_string(), created_step, example_count, validation_accuracy: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskUnit {
    pub definition: String,
    pub embedding: EmbeddingVector,
    pub adapter: Adapter,
    pub meta: UnitMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalEntry {
    pub index: usize,
    pub similarity: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub entries: Vec<RetrievalEntry>,
    pub k: usize,
}

impl RetrievalResult {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPool {
    spec: AdapterSpec,
    tau: f64,
    embedder: TrigramEmbedder,
    units: Vec<TaskUnit>,
}

/// Top `k` of `(index, similarity)` by similarity, lower index first on ties,
/// with floored and normalized weights.
pub fn select_top_k(sims: &[f64], k: usize) -> RetrievalResult {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k.min(sims.len()));
    let floored: Vec<f64> = order.iter().map(|&i| sims[i].max(WEIGHT_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    let entries = order
        .iter()
        .zip(&floored)
        .map(|(&index, &f)| RetrievalEntry { index, similarity: sims[index], weight: f / total })
        .collect();
    RetrievalResult { entries, k }
}

impl ExpertPool {
    pub fn new(spec: AdapterSpec, tau: f64, embedder: TrigramEmbedder) -> Result<Self, PoolError> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(PoolError::Invalid(format!("threshold {tau} outside (0, 1]")));
        }
        Ok(ExpertPool { spec, tau, embedder, units: Vec::new() })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn embedder(&self) -> &TrigramEmbedder {
        &self.embedder
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[TaskUnit] {
        &self.units
    }

    pub fn unit(&self, i: usize) -> Option<&TaskUnit> {
        self.units.get(i)
    }

    pub fn embed(&self, text: &str) -> EmbeddingVector {
        self.embedder.embed(text)
    }

    /// Similarity of `query` to every unit, in pool order.
    pub fn similarities(&self, query: &EmbeddingVector) -> Vec<f64> {
        self.units.iter().map(|u| cosine(query, &u.embedding).expect("pool embeddings share one dimension")).collect()
    }

    /// Index and similarity of the closest unit, lowest index on ties.
    pub fn nearest(&self, definition: &str) -> Option<(usize, f64)> {
        let sims = self.similarities(&self.embed(definition));
        select_top_k(&sims, 1).entries.first().map(|e| (e.index, e.similarity))
    }

    pub fn retrieve(&self, query_definition: &str, k: usize) -> Result<RetrievalResult, PoolError> {
        if k == 0 {
            return Err(PoolError::Invalid("k must be at least 1".into()));
        }
        if self.units.is_empty() {
            return Err(PoolError::Empty);
        }
        Ok(select_top_k(&self.similarities(&self.embed(query_definition)), k))
    }

    /// Appends a unit when its definition is below the threshold against
    /// every stored definition. Returns whether it was added and the nearest
    /// similarity (−1 for an empty pool).
    pub fn try_add(&mut self, definition: &str, adapter: Adapter, meta: UnitMeta) -> Result<(bool, f64), PoolError> {
        if adapter.spec() != &self.spec {
            return Err(PoolError::SpecMismatch);
        }
        let embedding = self.embed(definition);
        let nearest = self.similarities(&embedding).into_iter().fold(f64::NEG_INFINITY, f64::max);
        if self.units.is_empty() {
            self.units.push(TaskUnit { definition: definition.to_string(), embedding, adapter, meta });
            return Ok((true, -1.0));
        }
        if nearest < self.tau {
            self.units.push(TaskUnit { definition: definition.to_string(), embedding, adapter, meta });
            Ok((true, nearest))
        } else {
            Ok((false, nearest))
        }
    }

    /// Would `definition` pass the insertion gate?
    pub fn admits(&self, definition: &str) -> bool {
        self.units.is_empty() || self.similarities(&self.embed(definition)).iter().all(|&s| s < self.tau)
    }

    /// Writes `manifest.txt` and one adapter file per unit into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), PoolError> {
        fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
        let mut m = String::new();
        m.push_str("tegee-pool 1\n");
        m.push_str(&format!("tau {}\n", self.tau));
        m.push_str(&format!("dim {}\n", self.embedder.dim()));
        m.push_str(&format!("rank {}\n", self.spec.rank()));
        m.push_str(&format!("targets {}\n", self.spec.targets().join(" ")));
        m.push_str(&format!("units {}\n", self.units.len()));
        for (i, u) in self.units.iter().enumerate() {
            let file = unit_file(i);
            let path = dir.join(&file);
            fs::write(&path, u.adapter.to_bytes()).map_err(|source| io_err(&path, source))?;
            m.push_str(&format!("unit {i} {file}\n"));
            m.push_str(&format!("definition {}\n", escape(&u.definition)));
            m.push_str(&format!("source {}\n", escape(&u.meta.source)));
            m.push_str(&format!("created_step {}\n", u.meta.created_step));
            m.push_str(&format!("example_count {}\n", u.meta.example_count));
            match u.meta.validation_accuracy {
                Some(a) => m.push_str(&format!("validation_accuracy {a}\n")),
                None => m.push_str("validation_accuracy none\n"),
            }
        }
        m.push_str("end\n");
        let path = dir.join(MANIFEST);
        fs::write(&path, m).map_err(|source| io_err(&path, source))
    }

    pub fn load(dir: &Path) -> Result<ExpertPool, PoolError> {
        let path = dir.join(MANIFEST);
        let bytes = fs::read(&path).map_err(|source| io_err(&path, source))?;
        let fmt = |error: FormatError| PoolError::Format { file: path.display().to_string(), error };
        let mut r = ByteReader::new(&bytes);
        let at = r.offset();
        if r.line().map_err(fmt)? != "tegee-pool 1" {
            return Err(fmt(FormatError::new(at, "not a pool manifest (expected `tegee-pool 1`)")));
        }
        let tau = parse_f64(&mut r, "tau").map_err(fmt)?;
        let at = r.offset();
        let dim = parse_usize(r.fields("dim", 2).map_err(fmt)?[1], at).map_err(fmt)?;
        let at = r.offset();
        let rank = parse_usize(r.fields("rank", 2).map_err(fmt)?[1], at).map_err(fmt)?;
        let at = r.offset();
        let line = r.line().map_err(fmt)?;
        let targets: Vec<String> = match line.strip_prefix("targets ") {
            Some(rest) => rest.split(' ').map(str::to_string).collect(),
            None => return Err(fmt(FormatError::new(at, "expected `targets`"))),
        };
        let spec = AdapterSpec::new(targets, rank).map_err(|e| fmt(FormatError::new(at, e.to_string())))?;
        if dim == 0 {
            return Err(fmt(FormatError::new(at, "zero embedding dimension")));
        }
        let mut pool = ExpertPool::new(spec, tau, TrigramEmbedder::new(dim))
            .map_err(|e| fmt(FormatError::new(0, e.to_string())))?;
        let at = r.offset();
        let count = parse_usize(r.fields("units", 2).map_err(fmt)?[1], at).map_err(fmt)?;
        for i in 0..count {
            let at = r.offset();
            let f = r.fields("unit", 3).map_err(fmt)?;
            if f[1] != i.to_string() || f[2].contains('/') || f[2].contains("..") {
                return Err(fmt(FormatError::new(at, format!("expected unit {i} with a plain file name"))));
            }
            let file = f[2].to_string();
            let definition = unescape(text_field(&mut r, "definition").map_err(fmt)?, at).map_err(fmt)?;
            let source = unescape(text_field(&mut r, "source").map_err(fmt)?, at).map_err(fmt)?;
            let at2 = r.offset();
            let created_step = r.fields("created_step", 2).map_err(fmt)?[1]
                .parse()
                .map_err(|_| fmt(FormatError::new(at2, "bad created_step")))?;
            let at3 = r.offset();
            let example_count = r.fields("example_count", 2).map_err(fmt)?[1]
                .parse()
                .map_err(|_| fmt(FormatError::new(at3, "bad example_count")))?;
            let at4 = r.offset();
            let acc = r.fields("validation_accuracy", 2).map_err(fmt)?[1];
            let validation_accuracy = if acc == "none" {
                None
            } else {
                Some(acc.parse::<f64>().map_err(|_| fmt(FormatError::new(at4, "bad validation_accuracy")))?)
            };
            let apath = dir.join(&file);
            let abytes = fs::read(&apath).map_err(|source| io_err(&apath, source))?;
            let adapter = Adapter::from_bytes(&abytes)
                .map_err(|error| PoolError::Format { file: apath.display().to_string(), error })?;
            if adapter.spec() != &pool.spec {
                return Err(PoolError::Format {
                    file: apath.display().to_string(),
                    error: FormatError::new(0, "adapter spec differs from the manifest"),
                });
            }
            let embedding = pool.embed(&definition);
            pool.units.push(TaskUnit {
                definition,
                embedding,
                adapter,
                meta: UnitMeta { source, created_step, example_count, validation_accuracy },
            });
        }
        let at = r.offset();
        if r.line().map_err(fmt)? != "end" {
            return Err(fmt(FormatError::new(at, "expected `end`")));
        }
        r.finish().map_err(fmt)?;
        Ok(pool)
    }

    /// Replaces this pool with the one stored in `dir`; on any error the
    /// pool is left as it was.
    pub fn reload_from(&mut self, dir: &Path) -> Result<(), PoolError> {
        let fresh = ExpertPool::load(dir)?;
        *self = fresh;
        Ok(())
    }
}

pub fn unit_file(i: usize) -> String {
    format!("unit-{i:04}.adapter")
}

fn io_err(path: &Path, source: std::io::Error) -> PoolError {
    PoolError::Io { path: PathBuf::from(path).display().to_string(), source }
}

fn parse_f64(r: &mut ByteReader, key: &str) -> Result<f64, FormatError> {
    let at = r.offset();
    let f = r.fields(key, 2)?;
    f[1].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| FormatError::new(at, format!("bad value for {key}")))
}

fn text_field<'a>(r: &mut ByteReader<'a>, key: &str) -> Result<&'a str, FormatError> {
    let at = r.offset();
    let line = r.line()?;
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| FormatError::new(at, format!("expected `{key}`")))
}

/// Backslash-escapes `\`, newline and carriage return.
pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str, at: usize) -> Result<String, FormatError> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            _ => return Err(FormatError::new(at, "bad escape sequence")),
        }
    }
    Ok(out)
}
