//! Definition-quality analysis: how many retrieved experts two definition
//! sources have in common.
//!
//! For every task each source's definition retrieves a top-`k` set of unit
//! indices; entry `(a, b)` of the overlap matrix sums `|set_a ∩ set_b|` over
//! tasks.

use std::collections::BTreeSet;

use crate::pool::{ExpertPool, PoolError};

#[derive(Debug, thiserror::Error)]
pub enum QualityError {
    #[error("source `{source_name}` is not aligned with `{reference}`: {message}")]
    Alignment { source_name: String, reference: String, message: String },
    #[error("no definition sources")]
    NoSources,
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// One source's definitions, keyed by task id.
#[derive(Clone, Debug, PartialEq)]
pub struct DefinitionSource {
    pub name: String,
    pub definitions: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlapMatrix {
    pub sources: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    pub k: usize,
    pub task_count: usize,
}

/// Checks that every source covers the same task ids exactly once and
/// returns the definitions in a common (sorted by task id) order.
pub fn align(sources: &[DefinitionSource]) -> Result<Vec<Vec<String>>, QualityError> {
    let first = sources.first().ok_or(QualityError::NoSources)?;
    let ids = |s: &DefinitionSource| -> Result<Vec<String>, QualityError> {
        let mut v: Vec<String> = s.definitions.iter().map(|(id, _)| id.clone()).collect();
        v.sort();
        if v.windows(2).any(|w| w[0] == w[1]) {
            return Err(QualityError::Alignment {
                source_name: s.name.clone(),
                reference: s.name.clone(),
                message: "duplicate task id".into(),
            });
        }
        Ok(v)
    };
    let reference = ids(first)?;
    let mut out = Vec::with_capacity(sources.len());
    for s in sources {
        if ids(s)? != reference {
            return Err(QualityError::Alignment {
                source_name: s.name.clone(),
                reference: first.name.clone(),
                message: "task ids differ".into(),
            });
        }
        let mut defs = s.definitions.clone();
        defs.sort_by(|a, b| a.0.cmp(&b.0));
        out.push(defs.into_iter().map(|(_, d)| d).collect());
    }
    Ok(out)
}

pub fn overlap_matrix(pool: &ExpertPool, sources: &[DefinitionSource], k: usize) -> Result<OverlapMatrix, QualityError> {
    let aligned = align(sources)?;
    let task_count = aligned[0].len();
    let sets: Vec<Vec<BTreeSet<usize>>> = aligned
        .iter()
        .map(|defs| {
            defs.iter()
                .map(|d| Ok(pool.retrieve(d, k)?.indices().into_iter().collect()))
                .collect::<Result<_, PoolError>>()
        })
        .collect::<Result<_, PoolError>>()?;
    let n = sources.len();
    let mut counts = vec![vec![0; n]; n];
    for a in 0..n {
        for b in 0..n {
            counts[a][b] = (0..task_count).map(|t| sets[a][t].intersection(&sets[b][t]).count()).sum();
        }
    }
    Ok(OverlapMatrix { sources: sources.iter().map(|s| s.name.clone()).collect(), counts, k, task_count })
}

impl OverlapMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<usize> {
        let i = self.sources.iter().position(|s| s == a)?;
        let j = self.sources.iter().position(|s| s == b)?;
        Some(self.counts[i][j])
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "tegee-overlap 1\nk {}\ntasks {}\nsources {}\n",
            self.k,
            self.task_count,
            self.sources.join(" ")
        );
        for row in &self.counts {
            let r: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("row {}\n", r.join(" ")));
        }
        out.push_str("end\n");
        out
    }

    /// Column-aligned table for reading.
    pub fn table(&self) -> String {
        let w = self.sources.iter().map(|s| s.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:w$}", "");
        for s in &self.sources {
            out.push_str(&format!(" {s:>w$}"));
        }
        out.push('\n');
        for (s, row) in self.sources.iter().zip(&self.counts) {
            out.push_str(&format!("{s:w$}"));
            for c in row {
                out.push_str(&format!(" {c:>w$}"));
            }
            out.push('\n');
        }
        out
    }
}
