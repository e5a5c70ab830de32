use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type accepted by the kernels.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Q, K and V laid out as `[len, heads, head_dim]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensors<F> {
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl<F: Scalar> AttentionTensors<F> {
    pub fn new(q: Vec<F>, k: Vec<F>, v: Vec<F>, len: usize, heads: usize, head_dim: usize) -> Result<Self> {
        let want = len * heads * head_dim;
        for (name, t) in [("Q", &q), ("K", &k), ("V", &v)] {
            if t.len() != want {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has {} elements, expected {len}x{heads}x{head_dim}",
                    t.len()
                )));
            }
        }
        Ok(Self {
            q,
            k,
            v,
            len,
            heads,
            head_dim,
        })
    }

    #[inline]
    pub fn row_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn scale(&self) -> F {
        F::one() / F::from_usize(self.head_dim).unwrap().sqrt()
    }

    #[inline]
    pub(crate) fn at<'a>(&self, t: &'a [F], row: usize, head: usize) -> &'a [F] {
        let off = (row * self.heads + head) * self.head_dim;
        &t[off..off + self.head_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<F> {
    /// `[len, heads, head_dim]`.
    pub o: Vec<F>,
    /// Log-sum-exp of the scaled, masked scores per `(row, head)`;
    /// `-inf` for rows that see nothing (pad rows only).
    pub lse: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads<F> {
    pub dq: Vec<F>,
    pub dk: Vec<F>,
    pub dv: Vec<F>,
}

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}
