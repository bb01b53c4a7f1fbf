//! Dense tensors and the primitive numerical kernels the models are built from.
//!
//! Layout is row-major, images are `N × C × H × W`. Values are stored as `f32`
//! for training; every kernel is generic over [`Element`] so the same code can
//! run as a 64-bit shadow computation for gradient checking.

mod conv;
pub mod io;
mod ops;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;
use std::sync::atomic::{AtomicU8, Ordering};

use num_traits::Float;

use crate::error::{Error, Result};

pub use conv::{
    conv2d, conv2d_backward, conv2d_forward, conv2d_transpose, conv2d_transpose_backward,
    conv2d_transpose_forward, conv2d_transpose_output_size, conv_output_size, ConvGrads,
    ConvParams, ConvSpec,
};
pub use ops::{
    concat_channels, concat_channels_backward, cross_entropy, cross_entropy_backward, dense,
    dense_backward, global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward,
    maxpool2d_with_indices, prelu, prelu_backward, selu, selu_backward, selu_scalar, softmax,
    softmax_backward, DenseGrads, PreluGrads, LOG_CLAMP, SELU_ALPHA, SELU_LAMBDA,
};

/// Scalar type a tensor can hold.
pub trait Element:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + 'static
{
    /// `c = a · b + beta · c` with arbitrary strides; `a` is `m × k`, `b` is `k × n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

fn check_span(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_span(a.len(), m, k, a_strides);
                check_span(b.len(), k, n, b_strides);
                check_span(c.len(), m, n, c_strides);
                // SAFETY: every operand span was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

const DET_UNSET: u8 = 0;
const DET_OFF: u8 = 1;
const DET_ON: u8 = 2;

static DETERMINISTIC: AtomicU8 = AtomicU8::new(DET_UNSET);

/// Environment variable that forces deterministic (serial, fixed-order) execution.
pub const DETERMINISTIC_ENV: &str = "ONCONET_DETERMINISTIC";

/// Forces serial execution of kernels and data preparation.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(if on { DET_ON } else { DET_OFF }, Ordering::SeqCst);
}

/// Whether deterministic mode is active. Defaults to the value of
/// `ONCONET_DETERMINISTIC` until [`set_deterministic`] is called.
pub fn deterministic() -> bool {
    match DETERMINISTIC.load(Ordering::SeqCst) {
        DET_ON => true,
        DET_OFF => false,
        _ => {
            let on = std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1");
            set_deterministic(on);
            on
        }
    }
}

/// Maps `f` over `0..n`, in parallel unless deterministic mode is on.
/// Results are always returned in index order.
pub(crate) fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if deterministic() || n < 2 {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let len = validate_shape(&shape)?;
        if len != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expects {len} elements, data has {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Result<Self> {
        let shape = shape.into();
        let len = validate_shape(&shape)?;
        Self::new(shape, vec![value; len])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, E::zero())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> E) -> Result<Self> {
        let shape = shape.into();
        let len = validate_shape(&shape)?;
        Self::new(shape, (0..len).map(f).collect())
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: E) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.data.len() != 1 {
            return Err(Error::invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [a, b] => Ok((a, b)),
            _ => Err(Error::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Rank {
                op,
                expected: 4,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = validate_shape(&shape)?;
        if len != self.data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("cannot reshape {} elements", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| F::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all elements, accumulated in 64-bit.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Copy of channels `range` of a 4-D tensor.
    pub fn slice_channels(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let (n, c, h, w) = self.dims4("slice_channels")?;
        if range.start >= range.end || range.end > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("channel range {range:?} outside 0..{c}"),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * range.len() * plane);
        for b in 0..n {
            let start = (b * c + range.start) * plane;
            data.extend_from_slice(&self.data[start..start + range.len() * plane]);
        }
        Self::new(vec![n, range.len(), h, w], data)
    }

    /// Copy of samples `range` along the leading dimension.
    pub fn slice_batch(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| Error::invalid("slice_batch", "scalar tensor"))?;
        if range.start >= range.end || range.end > n {
            return Err(Error::invalid("slice_batch", format!("sample range {range:?} outside 0..{n}")));
        }
        let per = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Self::new(shape, self.data[range.start * per..range.end * per].to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[E]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                dim: "elements",
                expected: self.data.len(),
                actual: delta.len(),
            });
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![E::zero(); self.data.len()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Resets the gradient buffer to exact zeros (keeps it allocated).
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = E::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

impl<E: Element> Tensor<E> {
    /// Element-wise maximum absolute difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }
}
