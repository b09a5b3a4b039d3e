use super::{NumericsError, Result};

/// Element type for all tensors: `f32` for training runs, `f64` for
/// gradient-check mode.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from exactly `Self::BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<T: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Plain vector, used for biases and layer-norm gains.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor1<T: Scalar> {
    data: Vec<T>,
}

impl<T: Scalar> Tensor1<T> {
    pub fn zeros(len: usize) -> Self {
        Tensor1 { data: vec![T::zero(); len] }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor1 { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// View as a 1xN matrix.
    pub fn to_row(&self) -> Tensor2<T> {
        Tensor2 { rows: 1, cols: self.data.len(), data: self.data.clone() }
    }
}

impl<T: Scalar> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::DataLength { rows, cols, got: data.len() });
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::DataLength { rows: rows.len(), cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2 { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1x1 tensor.
    pub fn scalar(&self) -> T {
        debug_assert_eq!(self.shape(), (1, 1), "scalar() on non-scalar tensor");
        self.data[0]
    }

    pub fn to_tensor1(&self) -> Tensor1<T> {
        Tensor1 { data: self.data.clone() }
    }

    /// Checked mode: errors when any value is NaN or infinite.
    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { context: context.to_string() });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor2<T> {
        Tensor2 { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: T) -> Tensor2<T> {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor2<T>) -> Result<Tensor2<T>> {
        if self.shape() != other.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Tensor2 { rows: self.rows, cols: self.cols, data })
    }

    pub fn add_assign(&mut self, other: &Tensor2<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Broadcast-add a 1xN row vector to every row.
    pub fn add_row(&self, bias: &Tensor2<T>) -> Result<Tensor2<T>> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: self.shape(),
                right: bias.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor2<T> {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Standard matrix product `self @ other`.
    pub fn matmul(&self, other: &Tensor2<T>) -> Result<Tensor2<T>> {
        if self.cols != other.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self @ other^T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor2<T>) -> Result<Tensor2<T>> {
        if self.cols != other.cols {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor2::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = T::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self^T @ other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor2<T>) -> Result<Tensor2<T>> {
        if self.rows != other.rows {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Tensor2::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }
}

/// Elementwise `max(0, x)`; the subgradient at 0 is taken as 0.
pub fn relu<T: Scalar>(x: &Tensor2<T>) -> Tensor2<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows<T: Scalar>(x: &Tensor2<T>) -> Tensor2<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Per-row standardization followed by an elementwise affine map.
pub fn layer_norm<T: Scalar>(
    x: &Tensor2<T>,
    gain: &Tensor1<T>,
    bias: &Tensor1<T>,
    eps: f64,
) -> Result<Tensor2<T>> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape(),
            right: (gain.len(), bias.len()),
        });
    }
    let eps = T::from_f64(eps);
    let n = T::from_f64(x.cols() as f64);
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mut mean = T::zero();
        for &v in row.iter() {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in row.iter() {
            let d = v - mean;
            var += d * d;
        }
        var = var / n;
        let inv_std = (var + eps).sqrt().recip();
        for (v, (&g, &b)) in row.iter_mut().zip(gain.data().iter().zip(bias.data())) {
            *v = (*v - mean) * inv_std * g + b;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of `target_ids` under row-wise softmax of
/// `logits`, skipping positions whose target equals `ignore_id`.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor2<T>,
    target_ids: &[usize],
    ignore_id: Option<usize>,
) -> Result<T> {
    if logits.rows() != target_ids.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "cross_entropy",
            left: logits.shape(),
            right: (target_ids.len(), 0),
        });
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (r, &t) in target_ids.iter().enumerate() {
        if Some(t) == ignore_id {
            continue;
        }
        if t >= logits.cols() {
            return Err(NumericsError::IndexOutOfRange {
                op: "cross_entropy",
                index: t,
                len: logits.cols(),
            });
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut logsum = T::zero();
        for &v in row {
            logsum += (v - max).exp();
        }
        total += max + logsum.ln() - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(NumericsError::EmptyTarget { ignore: ignore_id });
    }
    Ok(total / T::from_f64(count as f64))
}
