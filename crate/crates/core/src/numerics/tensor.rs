//! Dense row-major tensors of `f64` and the closed set of kernels the host
//! model needs.
//!
//! Every kernel validates shapes up front and refuses to return a value that
//! contains NaN or an infinity.

use super::NumericsError;

/// Row-major array of finite `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::Dimension(format!("invalid shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NumericsError::Dimension(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("new")?;
        Ok(t)
    }

    /// A `rows × cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized tensor");
        Tensor { shape: vec![rows, cols], data: vec![0.0; rows * cols] }
    }

    /// A 1×1 tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![v] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { shape: vec![rows, cols], data }
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix; panics on other ranks.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "not a matrix");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "not a matrix");
        self.shape[1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Same data, new shape of equal size.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        Tensor::new(shape, self.data.clone())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    fn check_finite(&self, op: &str) -> Result<(), NumericsError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::NonFinite(op.to_string()))
        }
    }

    pub(crate) fn finite(self, op: &str) -> Result<Self, NumericsError> {
        self.check_finite(op)?;
        Ok(self)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn need_matrix(t: &Tensor, op: &str) -> Result<(usize, usize), NumericsError> {
    if t.is_matrix() {
        Ok((t.shape[0], t.shape[1]))
    } else {
        Err(NumericsError::Dimension(format!("{op}: expected a matrix, got shape {:?}", t.shape)))
    }
}

/// `a · b`. Each output entry accumulates over the inner index in increasing
/// order, starting from zero.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, n) = need_matrix(a, "matmul")?;
    let (n2, p) = need_matrix(b, "matmul")?;
    if n != n2 {
        return Err(NumericsError::Dimension(format!("matmul: {m}x{n} by {n2}x{p}")));
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a.data[i * n..(i + 1) * n];
        let orow = &mut out[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * p..(k + 1) * p];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Tensor::from_parts(m, p, out).finite("matmul")
}

/// `a · bᵀ`, same summation order as [`matmul`].
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, n) = need_matrix(a, "matmul_nt")?;
    let (p, n2) = need_matrix(b, "matmul_nt")?;
    if n != n2 {
        return Err(NumericsError::Dimension(format!("matmul_nt: {m}x{n} by ({p}x{n2})ᵀ")));
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a.data[i * n..(i + 1) * n];
        for j in 0..p {
            let brow = &b.data[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * p + j] = s;
        }
    }
    Tensor::from_parts(m, p, out).finite("matmul_nt")
}

/// `aᵀ · b`, same summation order as [`matmul`].
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (n, m) = need_matrix(a, "matmul_tn")?;
    let (n2, p) = need_matrix(b, "matmul_tn")?;
    if n != n2 {
        return Err(NumericsError::Dimension(format!("matmul_tn: ({n}x{m})ᵀ by {n2}x{p}")));
    }
    let mut out = vec![0.0; m * p];
    for k in 0..n {
        let arow = &a.data[k * m..(k + 1) * m];
        let brow = &b.data[k * p..(k + 1) * p];
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Tensor::from_parts(m, p, out).finite("matmul_tn")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.shape != b.shape {
        return Err(NumericsError::Dimension(format!("add: {:?} + {:?}", a.shape, b.shape)));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor { shape: a.shape.clone(), data }.finite("add")
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor, NumericsError> {
    let data = a.data.iter().map(|x| x * c).collect();
    Tensor { shape: a.shape.clone(), data }.finite("scale")
}

/// Softmax over each row, shifted by the row maximum.
pub fn row_softmax(a: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, n) = need_matrix(a, "row_softmax")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::from_parts(m, n, out).finite("row_softmax")
}

pub fn relu(a: &Tensor) -> Result<Tensor, NumericsError> {
    let data = a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

/// Mean over rows: `n × d` to `1 × d`.
pub fn mean_pool(a: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, n) = need_matrix(a, "mean_pool")?;
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, x) in out.iter_mut().zip(&a.data[i * n..(i + 1) * n]) {
            *o += x;
        }
    }
    let inv = m as f64;
    for o in out.iter_mut() {
        *o /= inv;
    }
    Tensor::from_parts(1, n, out).finite("mean_pool")
}

/// `−log softmax(logits)[label]` for a single row of logits, as a 1×1 tensor.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<Tensor, NumericsError> {
    let (m, n) = need_matrix(logits, "cross_entropy")?;
    if m != 1 {
        return Err(NumericsError::Dimension(format!("cross_entropy: expected one row, got {m}")));
    }
    if label >= n {
        return Err(NumericsError::Dimension(format!("cross_entropy: label {label} out of {n}")));
    }
    Ok(Tensor::scalar(log_sum_exp(&logits.data) - logits.data[label])).and_then(|t| t.finite("cross_entropy"))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}
