//! The frozen host model: a one-block, single-head attention classifier.
//!
//! Tokens are embedded, summed with a fixed sinusoidal position table, passed
//! through scaled dot-product attention and a ReLU feed-forward block (both
//! with residual adds), mean-pooled over positions and projected onto the
//! label logits. All matrices act on row vectors, so a projection reads
//! `x · W`. An adapted matrix computes `x · W0 + (x · B) · A`.

use std::path::Path;

use crate::format::{push_f64s, ByteReader, FormatError};
use crate::hash::fnv1a64_extend;
use crate::hash::FNV_OFFSET;
use crate::lora::{Adapter, Factors};
use crate::numerics::{cross_entropy, Graph, NodeId, NumericsError, Rng, Tensor};

/// Matrix names in canonical order.
pub const MATRIX_NAMES: [&str; 8] = ["tok_embed", "q_proj", "k_proj", "v_proj", "o_proj", "ff_in", "ff_out", "head"];

const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown target `{0}`")]
    Target(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
    pub label_count: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { vocab_size: 64, d_model: 32, max_seq_len: 16, label_count: 16, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("max_seq_len", self.max_seq_len),
            ("label_count", self.label_count),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{k} must be positive")));
            }
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::Config(format!("d_model must be even, got {}", self.d_model)));
        }
        if self.label_count > self.vocab_size {
            return Err(ModelError::Config(format!(
                "label_count {} exceeds vocab_size {}",
                self.label_count, self.vocab_size
            )));
        }
        Ok(())
    }

    /// `(rows, cols)` of a named matrix.
    pub fn shape_of(&self, name: &str) -> Option<(usize, usize)> {
        let d = self.d_model;
        Some(match name {
            "tok_embed" => (self.vocab_size, d),
            "q_proj" | "k_proj" | "v_proj" | "o_proj" => (d, d),
            "ff_in" => (d, 4 * d),
            "ff_out" => (4 * d, d),
            "head" => (d, self.label_count),
            _ => return None,
        })
    }

    pub fn parameter_count(&self) -> usize {
        MATRIX_NAMES.iter().map(|n| self.shape_of(n).map(|(r, c)| r * c).unwrap_or(0)).sum()
    }
}

/// One labelled token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: u32,
}

impl Example {
    pub fn new(tokens: Vec<u32>, label: u32) -> Self {
        Example { tokens, label }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HostModel {
    config: ModelConfig,
    matrices: Vec<Tensor>,
    positions: Tensor,
}

/// Graph nodes holding the base matrices and, per matrix, optional adapter
/// factors `(B, A)`.
pub(crate) struct Bindings {
    mats: Vec<Option<NodeId>>,
    lora: Vec<Option<(NodeId, NodeId)>>,
    embed_is_const: bool,
}

impl Bindings {
    pub(crate) fn base(&self, i: usize) -> Option<NodeId> {
        self.mats[i]
    }

    pub(crate) fn factors(&self, i: usize) -> Option<(NodeId, NodeId)> {
        self.lora[i]
    }
}

/// Sinusoidal position table, `max_seq_len × d_model`.
pub fn position_table(cfg: &ModelConfig) -> Tensor {
    let d = cfg.d_model;
    Tensor::from_fn(cfg.max_seq_len, d, |pos, j| {
        let i = j - j % 2;
        let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn matrix_index(name: &str) -> Option<usize> {
    MATRIX_NAMES.iter().position(|n| *n == name)
}

impl HostModel {
    /// Gaussian(0, 0.02) initialization drawn from `cfg.seed` in canonical
    /// matrix order.
    pub fn init(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let matrices = MATRIX_NAMES
            .iter()
            .map(|name| {
                let (r, c) = cfg.shape_of(name).expect("canonical name");
                Tensor::from_fn(r, c, |_, _| rng.gaussian(INIT_STD))
            })
            .collect();
        let positions = position_table(&cfg);
        Ok(HostModel { config: cfg, matrices, positions })
    }

    pub fn from_matrices(cfg: ModelConfig, matrices: Vec<Tensor>) -> Result<Self, ModelError> {
        cfg.validate()?;
        if matrices.len() != MATRIX_NAMES.len() {
            return Err(ModelError::Dimension(format!("expected {} matrices", MATRIX_NAMES.len())));
        }
        for (name, m) in MATRIX_NAMES.iter().zip(&matrices) {
            let (r, c) = cfg.shape_of(name).expect("canonical name");
            if m.shape() != [r, c] {
                return Err(ModelError::Dimension(format!("{name}: expected {r}x{c}, got {:?}", m.shape())));
            }
        }
        let positions = position_table(&cfg);
        Ok(HostModel { config: cfg, matrices, positions })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn matrix(&self, name: &str) -> Option<&Tensor> {
        matrix_index(name).map(|i| &self.matrices[i])
    }

    pub fn matrices(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        MATRIX_NAMES.iter().copied().zip(self.matrices.iter())
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn parameter_count(&self) -> usize {
        self.matrices.iter().map(|m| m.len()).sum()
    }

    /// FNV-1a over the little-endian bytes of every matrix in canonical order.
    pub fn checksum(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for m in &self.matrices {
            for v in m.data() {
                h = fnv1a64_extend(h, &v.to_le_bytes());
            }
        }
        h
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::Input(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    pub(crate) fn check_adapter(&self, adapter: &Adapter) -> Result<(), ModelError> {
        for (target, f) in adapter.spec().targets().iter().zip(adapter.factors()) {
            let (r, c) = self.config.shape_of(target).ok_or_else(|| ModelError::Target(target.clone()))?;
            let rank = adapter.spec().rank();
            if f.b.shape() != [r, rank] || f.a.shape() != [rank, c] {
                return Err(ModelError::Dimension(format!(
                    "{target}: factors {:?}·{:?} do not fit {r}x{c}",
                    f.b.shape(),
                    f.a.shape()
                )));
            }
        }
        Ok(())
    }

    /// Places the base matrices into `g`, as parameters when `train_base`,
    /// and the adapter factors, as parameters when `train_adapter`.
    pub(crate) fn bind(
        &self,
        g: &mut Graph,
        adapter: Option<&Adapter>,
        train_base: bool,
        train_adapter: bool,
    ) -> Result<Bindings, ModelError> {
        let mut lora = vec![None; MATRIX_NAMES.len()];
        if let Some(a) = adapter {
            self.check_adapter(a)?;
            for (target, f) in a.spec().targets().iter().zip(a.factors()) {
                let i = matrix_index(target).ok_or_else(|| ModelError::Target(target.clone()))?;
                let (b, aa) = if train_adapter {
                    (g.param(f.b.clone()), g.param(f.a.clone()))
                } else {
                    (g.input(f.b.clone()), g.input(f.a.clone()))
                };
                lora[i] = Some((b, aa));
            }
        }
        let embed_is_const = !train_base && lora[0].is_none();
        let mats = self
            .matrices
            .iter()
            .enumerate()
            .map(|(i, m)| {
                if i == 0 && embed_is_const {
                    None
                } else if train_base {
                    Some(g.param(m.clone()))
                } else {
                    Some(g.input(m.clone()))
                }
            })
            .collect();
        Ok(Bindings { mats, lora, embed_is_const })
    }

    /// `x · W0 + (x · B) · A` for matrix `i`, or `x · W0` when unadapted.
    fn project(&self, g: &mut Graph, b: &Bindings, i: usize, x: NodeId) -> Result<NodeId, NumericsError> {
        let base = g.matmul(x, b.mats[i].expect("matrix bound in graph"))?;
        match b.lora[i] {
            None => Ok(base),
            Some((bf, af)) => {
                let low = g.matmul(x, bf)?;
                let delta = g.matmul(low, af)?;
                g.add(base, delta)
            }
        }
    }

    /// Builds the forward pass for one sequence and returns the `1 × labels`
    /// logits node.
    pub(crate) fn logits_node(&self, g: &mut Graph, b: &Bindings, tokens: &[u32]) -> Result<NodeId, ModelError> {
        Ok(self.trace(g, b, tokens)?.0)
    }

    /// The logits node and the feed-forward pre-activation node.
    fn trace(&self, g: &mut Graph, b: &Bindings, tokens: &[u32]) -> Result<(NodeId, NodeId), ModelError> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.config.d_model;
        let x = if b.embed_is_const {
            let emb = &self.matrices[0];
            let data: Vec<f64> = tokens
                .iter()
                .enumerate()
                .flat_map(|(p, &t)| emb.row(t as usize).iter().zip(self.positions.row(p)).map(|(e, q)| e + q))
                .collect();
            g.input(Tensor::matrix(n, d, data)?)
        } else {
            let v = self.config.vocab_size;
            let onehot = Tensor::from_fn(n, v, |p, j| if tokens[p] as usize == j { 1.0 } else { 0.0 });
            let oh = g.input(onehot);
            let e = self.project(g, b, 0, oh)?;
            let pos = g.input(Tensor::from_fn(n, d, |p, j| self.positions.get(p, j)));
            g.add(e, pos)?
        };
        let q = self.project(g, b, 1, x)?;
        let k = self.project(g, b, 2, x)?;
        let v = self.project(g, b, 3, x)?;
        let scores = g.matmul_nt(q, k)?;
        let scaled = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = g.row_softmax(scaled)?;
        let mixed = g.matmul(attn, v)?;
        let out = self.project(g, b, 4, mixed)?;
        let h = g.add(x, out)?;
        let pre = self.project(g, b, 5, h)?;
        let act = g.relu(pre)?;
        let ff = self.project(g, b, 6, act)?;
        let y = g.add(h, ff)?;
        let pooled = g.mean_pool(y)?;
        Ok((self.project(g, b, 7, pooled)?, pre))
    }

    /// Mean cross-entropy of `batch` in one graph. Returns the graph, the
    /// scalar loss node and the bindings.
    pub(crate) fn batch_loss(
        &self,
        adapter: Option<&Adapter>,
        batch: &[&Example],
        train_base: bool,
        train_adapter: bool,
    ) -> Result<(Graph, NodeId, Bindings), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, adapter, train_base, train_adapter)?;
        let mut total = None;
        for e in batch {
            if e.label as usize >= self.config.label_count {
                return Err(ModelError::Input(format!("label {} outside {} classes", e.label, self.config.label_count)));
            }
            let logits = self.logits_node(&mut g, &b, &e.tokens)?;
            let ce = g.cross_entropy(logits, e.label as usize)?;
            total = Some(match total {
                None => ce,
                Some(t) => g.add(t, ce)?,
            });
        }
        let mean = g.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64)?;
        Ok((g, mean, b))
    }

    /// Cross-entropy of one example and its gradient with respect to each
    /// adapter factor, in target order.
    pub fn adapter_gradients(&self, adapter: &Adapter, example: &Example) -> Result<(f64, Vec<Factors>), ModelError> {
        let (g, root, b) = self.batch_loss(Some(adapter), &[example], false, true)?;
        let grads = g.backward(root)?;
        let mut out = Vec::new();
        for target in adapter.spec().targets() {
            let i = matrix_index(target).ok_or_else(|| ModelError::Target(target.clone()))?;
            let (bn, an) = b.factors(i).expect("adapter bound");
            let get = |id| grads.get(id).cloned().expect("gradient for every factor");
            out.push(Factors { b: get(bn), a: get(an) });
        }
        Ok((g.value(root).item(), out))
    }

    /// Logits over the label set, shape `[label_count]`.
    pub fn forward(&self, adapter: Option<&Adapter>, tokens: &[u32]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, adapter, false, false)?;
        let out = self.logits_node(&mut g, &b, tokens)?;
        Ok(g.value(out).reshape(vec![self.config.label_count])?)
    }

    /// Which feed-forward units are active (pre-activation > 0), row by row.
    /// Finite differences are only meaningful while this pattern is fixed.
    pub fn relu_pattern(&self, adapter: Option<&Adapter>, tokens: &[u32]) -> Result<Vec<bool>, ModelError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, adapter, false, false)?;
        let (_, pre) = self.trace(&mut g, &b, tokens)?;
        Ok(g.value(pre).data().iter().map(|&v| v > 0.0).collect())
    }

    /// Argmax label, lowest index on ties.
    pub fn predict(&self, adapter: Option<&Adapter>, tokens: &[u32]) -> Result<u32, ModelError> {
        let logits = self.forward(adapter, tokens)?;
        Ok(argmax(logits.data()) as u32)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut header = format!(
            "tegee-model 1\nvocab_size {}\nd_model {}\nmax_seq_len {}\nlabel_count {}\nseed {}\n",
            c.vocab_size, c.d_model, c.max_seq_len, c.label_count, c.seed
        );
        for (name, m) in self.matrices() {
            header.push_str(&format!("matrix {name} {} {}\n", m.rows(), m.cols()));
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        for m in &self.matrices {
            push_f64s(&mut out, m.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = ByteReader::new(bytes);
        let at = r.offset();
        if r.line()? != "tegee-model 1" {
            return Err(FormatError::new(at, "not a model file (expected `tegee-model 1`)").into());
        }
        let num = |r: &mut ByteReader, key: &str| -> Result<u64, FormatError> {
            let at = r.offset();
            let f = r.fields(key, 2)?;
            f[1].parse().map_err(|_| FormatError::new(at, format!("bad value for {key}")))
        };
        let cfg = ModelConfig {
            vocab_size: num(&mut r, "vocab_size")? as usize,
            d_model: num(&mut r, "d_model")? as usize,
            max_seq_len: num(&mut r, "max_seq_len")? as usize,
            label_count: num(&mut r, "label_count")? as usize,
            seed: num(&mut r, "seed")?,
        };
        let at = r.offset();
        cfg.validate().map_err(|e| FormatError::new(at, e.to_string()))?;
        let mut shapes = Vec::new();
        for name in MATRIX_NAMES {
            let at = r.offset();
            let f = r.fields("matrix", 4)?;
            let (rows, cols) = cfg.shape_of(name).expect("canonical name");
            if f[1] != name || f[2] != rows.to_string() || f[3] != cols.to_string() {
                return Err(FormatError::new(at, format!("expected `matrix {name} {rows} {cols}`")).into());
            }
            shapes.push((rows, cols));
        }
        let at = r.offset();
        if r.line()? != "end" {
            return Err(FormatError::new(at, "expected `end`").into());
        }
        let mut matrices = Vec::new();
        for (rows, cols) in shapes {
            let data = r.f64s(rows * cols)?;
            matrices.push(Tensor::matrix(rows, cols, data)?);
        }
        r.finish()?;
        HostModel::from_matrices(cfg, matrices)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        HostModel::from_bytes(&bytes)
    }
}

/// `−log softmax(logits)[label]`.
pub fn loss(logits: &Tensor, label: u32) -> Result<f64, ModelError> {
    let row = logits.reshape(vec![1, logits.len()])?;
    Ok(cross_entropy(&row, label as usize)?.item())
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::AdapterSpec;

    #[test]
    fn default_parameter_count_closed_form() {
        let cfg = ModelConfig::default();
        let (v, d, l) = (64, 32, 16);
        assert_eq!(cfg.parameter_count(), v * d + 4 * d * d + 8 * d * d + d * l);
        let m = HostModel::init(cfg).unwrap();
        assert_eq!(m.parameter_count(), 2048 + 4096 + 8192 + 512);
    }

    #[test]
    fn init_is_seeded() {
        let a = HostModel::init(ModelConfig::default()).unwrap();
        let b = HostModel::init(ModelConfig::default()).unwrap();
        let c = HostModel::init(ModelConfig { seed: 1, ..ModelConfig::default() }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.matrix("q_proj"), c.matrix("q_proj"));
    }

    #[test]
    fn config_rules() {
        assert!(HostModel::init(ModelConfig { d_model: 31, ..Default::default() }).is_err());
        assert!(HostModel::init(ModelConfig { label_count: 65, ..Default::default() }).is_err());
    }

    #[test]
    fn token_checks() {
        let m = HostModel::init(ModelConfig::default()).unwrap();
        assert!(matches!(m.forward(None, &[]), Err(ModelError::Input(_))));
        assert!(matches!(m.forward(None, &[64]), Err(ModelError::Input(_))));
        assert!(matches!(m.forward(None, &[1; 17]), Err(ModelError::Input(_))));
        assert_eq!(m.forward(None, &[1; 16]).unwrap().len(), 16);
    }

    #[test]
    fn loss_reference_values() {
        let u = loss(&Tensor::new(vec![16], vec![0.0; 16]).unwrap(), 4).unwrap();
        assert!((u - 16f64.ln()).abs() < 1e-15);
        let mut v = vec![0.0; 16];
        v[2] = 50.0;
        assert!(loss(&Tensor::new(vec![16], v).unwrap(), 2).unwrap() < 1e-20);
    }

    #[test]
    fn loss_matches_naive_log_sum_exp() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let xs: Vec<f64> = (0..16).map(|_| rng.gaussian(3.0)).collect();
            let label = rng.below(16);
            let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln() - xs[label];
            let got = loss(&Tensor::new(vec![16], xs).unwrap(), label as u32).unwrap();
            assert!((got - naive).abs() < 1e-10);
        }
    }

    #[test]
    fn embedding_adapter_uses_one_hot_path_consistently() {
        let m = HostModel::init(ModelConfig::default()).unwrap();
        let spec = AdapterSpec::new(vec!["tok_embed".into()], 2).unwrap();
        let a = Adapter::init(&spec, &m, &mut Rng::new(1)).unwrap();
        let toks = [3, 1, 4, 1, 5];
        assert_eq!(m.forward(Some(&a), &toks).unwrap(), m.forward(None, &toks).unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let m = HostModel::init(ModelConfig { seed: 9, ..Default::default() }).unwrap();
        let bytes = m.to_bytes();
        let back = HostModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
        let err = HostModel::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, ModelError::Format(FormatError { .. })));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
