//! Dense row-major `f64` tensors and the eager kernels shared with the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    BadShape(Vec<usize>),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(skip)]
    requires_grad: bool,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::BadShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor from external data, rejecting NaN and infinities.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(TensorError::Length {
                shape: shape.to_vec(),
                expected: n,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Internal constructor for kernel outputs; shape and length are trusted.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![0.0; n]))
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(&[1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::Dimension {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    // Eager versions of the differentiable primitives.

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(self.shape(), rhs.shape())?;
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn softmax(&self) -> Result<Tensor> {
        let mut out = self.data.clone();
        kernels::softmax_rows(&mut out, self.last_dim());
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        check_norm_params(self, gamma, beta, eps)?;
        let d = self.last_dim();
        let mut out = vec![0.0; self.len()];
        let mut inv_std = vec![0.0; self.rows()];
        kernels::layer_norm(&self.data, &mut out, &mut inv_std, d, eps);
        kernels::affine_rows(&mut out, &gamma.data, &beta.data);
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R, training: bool) -> Result<Tensor> {
        let mask = dropout_mask(self.len(), rate, rng, training)?;
        let data = match mask {
            Some(mask) => self.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
            None => self.data.clone(),
        };
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(TensorError::Dimension {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }),
    }
}

pub(crate) fn check_norm_params(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<()> {
    let d = x.last_dim();
    if gamma.len() != d || beta.len() != d {
        return Err(TensorError::Dimension {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    if !(eps > 0.0) {
        return Err(TensorError::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    Ok(())
}

/// Inverted-dropout keep mask scaled by `1 / (1 - rate)`; `None` means identity.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(
    len: usize,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Option<Vec<f64>>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(None);
    }
    let scale = 1.0 / (1.0 - rate);
    Ok(Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect(),
    ))
}

pub(crate) mod kernels {
    /// `out[m,n] = a[m,k] · b[k,n]`, overwriting `out`.
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }

    /// `out[m,n] += a[m,k] · b[n,k]ᵀ`
    pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }

    /// `out[k,n] += a[m,k]ᵀ · b[m,n]`
    pub fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }

    /// In-place softmax over consecutive rows of width `n` with max subtraction.
    pub fn softmax_rows(x: &mut [f64], n: usize) {
        for row in x.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }

    /// Given softmax output `y` and upstream `dy`, accumulates `dx`.
    pub fn softmax_rows_backward(y: &[f64], dy: &[f64], dx: &mut [f64], n: usize) {
        for ((yr, dyr), dxr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
            let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
            for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
                *d += yv * (g - dot);
            }
        }
    }

    /// Normalizes rows of width `d` to zero mean and unit population variance.
    /// `xhat` receives the normalized values, `inv_std` one entry per row.
    pub fn layer_norm(x: &[f64], xhat: &mut [f64], inv_std: &mut [f64], d: usize, eps: f64) {
        for ((row, out), istd) in x.chunks(d).zip(xhat.chunks_mut(d)).zip(inv_std.iter_mut()) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            *istd = 1.0 / (var + eps).sqrt();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * *istd;
            }
        }
    }

    pub fn affine_rows(x: &mut [f64], gamma: &[f64], beta: &[f64]) {
        let d = gamma.len();
        for row in x.chunks_mut(d) {
            for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
                *v = *v * g + b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_non_finite_input() {
        let err = Tensor::vector(vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1, .. }));
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(Tensor::zeros(&[0, 2]), Err(TensorError::BadShape(_))));
        assert!(matches!(
            Tensor::new(&[2, 2], vec![1.0; 3]),
            Err(TensorError::Length { expected: 4, got: 3, .. })
        ));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i2 = Tensor::identity(2).unwrap();
        assert_eq!(i2.matmul(&a).unwrap().data(), a.data());

        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 2]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = Tensor::vector(vec![0.0; 3]).unwrap().softmax().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::vector(vec![2f64.ln(), 0.0]).unwrap().softmax().unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);
        let s = Tensor::vector(vec![1000.0, 1000.0]).unwrap().softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full(&[4], 1.0).unwrap();
        let zeros = Tensor::zeros(&[4]).unwrap();
        let c = Tensor::full(&[4], 3.7).unwrap();
        let y = c.layer_norm(&ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::vector(vec![1.0, 3.0]).unwrap();
        let y = x
            .layer_norm(&Tensor::full(&[2], 1.0).unwrap(), &Tensor::zeros(&[2]).unwrap(), 1e-5)
            .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);

        let fives = Tensor::full(&[4], 5.0).unwrap();
        let y = c.layer_norm(&ones, &fives, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = Tensor::full(&[2], 1.0).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        assert!(matches!(x.layer_norm(&g, &b, 0.0), Err(TensorError::Config(_))));
    }

    #[test]
    fn relu_and_dropout_cases() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(x.dropout(0.0, &mut rng, true).unwrap(), x);
        assert_eq!(x.dropout(0.5, &mut rng, false).unwrap(), x);
        assert!(matches!(x.dropout(1.0, &mut rng, true), Err(TensorError::Config(_))));
        assert!(matches!(x.dropout(-0.1, &mut rng, true), Err(TensorError::Config(_))));
    }

    #[test]
    fn dropout_zeroes_and_rescales() {
        let x = Tensor::full(&[10_000], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = x.dropout(0.25, &mut rng, true).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        assert!(y
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        let frac = zeros as f64 / 10_000.0;
        assert!((frac - 0.25).abs() < 0.02, "dropped fraction {frac}");
    }
}
