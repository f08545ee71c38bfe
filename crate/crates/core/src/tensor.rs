//! Dense row-major tensors over a selectable floating point element type.
//!
//! Training runs in `f32`; `f64` exists for oracle-grade gradient checks.
//! The element type is fixed at compile time through the [`Element`] trait.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{invalid, shape_err, Result};

/// Floating point element type of a [`Tensor`].
pub trait Element:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Short type name used in reports.
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`. A transposed operand is
    /// stored in its untransposed (`k x m` / `n x k`) layout.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    /// Run `f` on a reused per-thread buffer of `len` elements with
    /// unspecified contents.
    fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [Self]) -> R) -> R;
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Strides of op(X) where X is stored row-major.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_element {
    ($t:ty, $name:literal, $gemm:path, $scratch:ident) => {
        thread_local! {
            static $scratch: std::cell::RefCell<Vec<$t>> = const { std::cell::RefCell::new(Vec::new()) };
        }

        impl Element for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, a_trans);
                let (rsb, csb) = gemm_strides(k, n, b_trans);
                // SAFETY: the slice lengths were checked above and the strides
                // describe in-bounds row-major views of those slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [Self]) -> R) -> R {
                $scratch.with(|cell| match cell.try_borrow_mut() {
                    Ok(mut buf) => {
                        if buf.len() < len {
                            buf.resize(len, 0.0);
                        }
                        f(&mut buf[..len])
                    }
                    Err(_) => f(&mut vec![0.0; len]),
                })
            }
        }
    };
}

impl_element!(f32, "f32", matrixmultiply::sgemm, SCRATCH_F32);
impl_element!(f64, "f64", matrixmultiply::dgemm, SCRATCH_F64);

/// Dense n-dimensional array. Images use the `[batch, channels, height, width]` layout.
#[derive(Clone, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", E::NAME, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n: usize = shape.iter().product();
        let mut t = Self::zeros(shape);
        for i in 0..n {
            t.data[i] = f(i);
        }
        t
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| E::of(x)).collect())
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on tensor {:?}", self.shape);
        self.data[0]
    }

    /// Extents of a rank-4 `[B, C, H, W]` tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(shape_err!("expected rank-4 tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| F::of(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: E) -> Self {
        self.map(|x| x * s)
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: E, x: &Self) -> Result<()> {
        self.check_same_shape(x)?;
        for (y, &v) in self.data.iter_mut().zip(&x.data) {
            *y += alpha * v;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, x: &Self) -> Result<()> {
        self.check_same_shape(x)?;
        for (y, &v) in self.data.iter_mut().zip(&x.data) {
            *y += v;
        }
        Ok(())
    }

    /// `base + sum_i coef_i * terms_i`, skipping zero coefficients.
    pub fn lincomb(base: &Self, terms: &[(f64, &Self)]) -> Result<Self> {
        let mut out = base.clone();
        for &(c, t) in terms {
            if c != 0.0 {
                out.axpy(E::of(c), t)?;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    /// Sum accumulated in double precision.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs(&self) -> E {
        self.data.iter().fold(E::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copy of sample `b` of a batched tensor, keeping a unit batch axis.
    pub fn batch_item(&self, b: usize) -> Result<Self> {
        let n = self.shape[0];
        if b >= n {
            return Err(invalid!("batch index {b} out of range {n}"));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self {
            shape,
            data: self.data[b * stride..(b + 1) * stride].to_vec(),
        })
    }

    /// Concatenate tensors along the leading (batch) axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| invalid!("cannot stack zero tensors"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut batch = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(shape_err!("stack {:?} with {:?}", first.shape, t.shape));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(Self { shape, data })
    }

    /// Flat concatenation of several tensors into one rank-1 tensor.
    pub fn concat_flat(parts: &[&Self]) -> Self {
        let data: Vec<E> = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
        let n = data.len().max(1);
        let mut data = data;
        data.resize(n, E::zero());
        Self {
            shape: vec![n],
            data,
        }
    }

    /// Split a flat buffer into tensors of the given shapes.
    pub fn split_flat(flat: &[E], shapes: &[&[usize]]) -> Result<Vec<Self>> {
        let mut out = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for s in shapes {
            let n: usize = s.iter().product();
            if off + n > flat.len() {
                return Err(shape_err!("flat buffer too short for {s:?}"));
            }
            out.push(Self::new(s, flat[off..off + n].to_vec())?);
            off += n;
        }
        Ok(out)
    }
}
