//! Low-rank adapters.
//!
//! An adapter holds, per target matrix `W0` of shape `d × k`, a pair of
//! factors `B` (`d × r`) and `A` (`r × k`) whose product is the additive
//! update `ΔW = B · A`. There is no extra scaling coefficient.

use std::path::Path;

use crate::format::{parse_usize, push_f64s, ByteReader, FormatError};
use crate::model::{matrix_index, HostModel, ModelConfig};
use crate::numerics::{matmul, NumericsError, Rng, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum LoraError {
    #[error("adapter spec error: {0}")]
    Spec(String),
    #[error("unknown adapter target `{0}`")]
    Target(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AdapterSpec {
    targets: Vec<String>,
    rank: usize,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec { targets: vec!["q_proj".into(), "k_proj".into()], rank: 4 }
    }
}

impl AdapterSpec {
    pub fn new(targets: Vec<String>, rank: usize) -> Result<Self, LoraError> {
        if rank == 0 {
            return Err(LoraError::Spec("rank must be positive".into()));
        }
        if targets.is_empty() {
            return Err(LoraError::Spec("no targets".into()));
        }
        for (i, t) in targets.iter().enumerate() {
            if matrix_index(t).is_none() {
                return Err(LoraError::Target(t.clone()));
            }
            if targets[..i].contains(t) {
                return Err(LoraError::Spec(format!("duplicate target `{t}`")));
            }
        }
        Ok(AdapterSpec { targets, rank })
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `(d, k)` per target, checking `r ≤ min(d, k)`.
    pub fn shapes(&self, cfg: &ModelConfig) -> Result<Vec<(usize, usize)>, LoraError> {
        self.targets
            .iter()
            .map(|t| {
                let (d, k) = cfg.shape_of(t).ok_or_else(|| LoraError::Target(t.clone()))?;
                if self.rank > d.min(k) {
                    return Err(LoraError::Spec(format!("rank {} exceeds min({d}, {k}) for `{t}`", self.rank)));
                }
                Ok((d, k))
            })
            .collect()
    }

    /// Trainable entries for a model configuration.
    pub fn trainable_count(&self, cfg: &ModelConfig) -> Result<usize, LoraError> {
        Ok(self.shapes(cfg)?.iter().map(|(d, k)| d * self.rank + self.rank * k).sum())
    }
}

/// The two factors of one adapted matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Factors {
    /// `d × r`
    pub b: Tensor,
    /// `r × k`
    pub a: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    spec: AdapterSpec,
    factors: Vec<Factors>,
}

impl Adapter {
    /// `A` drawn Gaussian(0, 0.02) target by target, `B` zero.
    pub fn init(spec: &AdapterSpec, model: &HostModel, rng: &mut Rng) -> Result<Self, LoraError> {
        let shapes = spec.shapes(model.config())?;
        let r = spec.rank;
        let factors = shapes
            .iter()
            .map(|&(d, k)| Factors { b: Tensor::zeros(d, r), a: Tensor::from_fn(r, k, |_, _| rng.gaussian(INIT_STD)) })
            .collect();
        Ok(Adapter { spec: spec.clone(), factors })
    }

    /// Assembles an adapter from explicit factors, checking that they agree
    /// with each other and with the rank.
    pub fn from_factors(spec: AdapterSpec, factors: Vec<Factors>) -> Result<Self, LoraError> {
        if factors.len() != spec.targets.len() {
            return Err(LoraError::Spec(format!("{} factor pairs for {} targets", factors.len(), spec.targets.len())));
        }
        for (t, f) in spec.targets.iter().zip(&factors) {
            if !f.b.is_matrix() || !f.a.is_matrix() || f.b.cols() != spec.rank || f.a.rows() != spec.rank {
                return Err(LoraError::Spec(format!(
                    "`{t}`: factors {:?}·{:?} are not rank {}",
                    f.b.shape(),
                    f.a.shape(),
                    spec.rank
                )));
            }
        }
        Ok(Adapter { spec, factors })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn factors(&self) -> &[Factors] {
        &self.factors
    }

    pub fn factor(&self, target: &str) -> Option<&Factors> {
        self.spec.targets.iter().position(|t| t == target).map(|i| &self.factors[i])
    }

    /// Materialized `B · A` for one target.
    pub fn delta(&self, target: &str) -> Result<Tensor, LoraError> {
        let f = self.factor(target).ok_or_else(|| LoraError::Target(target.to_string()))?;
        Ok(matmul(&f.b, &f.a)?)
    }

    /// Scales every `B` by `c`, leaving `A` alone, so each delta scales by
    /// exactly `c`.
    pub fn scale(&self, c: f64) -> Result<Adapter, LoraError> {
        let factors = self
            .factors
            .iter()
            .map(|f| Ok(Factors { b: crate::numerics::scale(&f.b, c)?, a: f.a.clone() }))
            .collect::<Result<_, NumericsError>>()?;
        Ok(Adapter { spec: self.spec.clone(), factors })
    }

    pub fn trainable_count(&self) -> usize {
        self.factors.iter().map(|f| f.b.len() + f.a.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("tegee-adapter 1\nrank {}\ntargets {}\n", self.spec.rank, self.spec.targets.len());
        for (t, f) in self.spec.targets.iter().zip(&self.factors) {
            header.push_str(&format!("target {t} {} {}\n", f.b.rows(), f.a.cols()));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for f in &self.factors {
            push_f64s(&mut out, f.b.data());
            push_f64s(&mut out, f.a.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        let at = r.offset();
        if r.line()? != "tegee-adapter 1" {
            return Err(FormatError::new(at, "not an adapter file (expected `tegee-adapter 1`)"));
        }
        let at = r.offset();
        let rank = parse_usize(r.fields("rank", 2)?[1], at)?;
        let at = r.offset();
        let count = parse_usize(r.fields("targets", 2)?[1], at)?;
        let mut targets = Vec::new();
        let mut shapes = Vec::new();
        for _ in 0..count {
            let at = r.offset();
            let f = r.fields("target", 4)?;
            let d = parse_usize(f[2], at)?;
            let k = parse_usize(f[3], at)?;
            if d == 0 || k == 0 {
                return Err(FormatError::new(at, "zero-sized target"));
            }
            targets.push(f[1].to_string());
            shapes.push((d, k));
        }
        let at = r.offset();
        if r.line()? != "end" {
            return Err(FormatError::new(at, "expected `end`"));
        }
        let spec = AdapterSpec::new(targets, rank).map_err(|e| FormatError::new(at, e.to_string()))?;
        let mut factors = Vec::new();
        for (d, k) in shapes {
            let b = Tensor::matrix(d, rank, r.f64s(d * rank)?).map_err(|e| r.error(e.to_string()))?;
            let a = Tensor::matrix(rank, k, r.f64s(rank * k)?).map_err(|e| r.error(e.to_string()))?;
            factors.push(Factors { b, a });
        }
        r.finish()?;
        Adapter::from_factors(spec, factors).map_err(|e| r.error(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), LoraError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| LoraError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, LoraError> {
        let bytes = std::fs::read(path).map_err(|source| LoraError::Io { path: path.display().to_string(), source })?;
        Ok(Adapter::from_bytes(&bytes)?)
    }
}
