use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::Debug;
use std::iter::Sum;

use super::GradError;

/// Scalar type of a tensor: `f32` for training, `f64` for verification.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + 'static {
    /// `c = op(a) * op(b) (+ c)` with `op(a)` of shape `m x k` and `op(b)` of
    /// shape `k x n`, all row major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool);

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self], accumulate: bool) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand sizes");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor, usually `(N, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, GradError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GradError::Shape {
                op: "tensor".into(),
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self, op: &str) -> Result<(usize, usize, usize, usize), GradError> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(GradError::Shape { op: op.into(), left: self.shape.clone(), right: vec![0; 4] }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap())).collect() }
    }

    /// Channel slice `[c0, c1)` of a rank-4 tensor.
    pub fn channels(&self, c0: usize, c1: usize) -> Tensor<T> {
        let (n, c, h, w) = self.dims4("channels").expect("rank-4 tensor");
        assert!(c0 <= c1 && c1 <= c);
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (c1 - c0) * hw);
        for b in 0..n {
            data.extend_from_slice(&self.data[(b * c + c0) * hw..(b * c + c1) * hw]);
        }
        Tensor { shape: vec![n, c1 - c0, h, w], data }
    }

    /// Sample `b` of the batch as a `(1, C, H, W)` tensor.
    pub fn sample(&self, b: usize) -> Tensor<T> {
        let (_, c, h, w) = self.dims4("sample").expect("rank-4 tensor");
        let len = c * h * w;
        Tensor { shape: vec![1, c, h, w], data: self.data[b * len..(b + 1) * len].to_vec() }
    }
}
