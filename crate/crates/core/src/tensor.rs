//! Dense row-major tensors and the numeric kernels the autodiff layer is built on.
//!
//! A [`Tensor`] is immutable once constructed; its buffer is shared through an
//! `Arc`, so cloning is cheap and tensors can cross thread boundaries.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};

/// Scalar element type: `f32` for training, `f64` for gradient checks.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
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
    /// `c = alpha * a · b + beta * c` with arbitrary strides (`m×k` times `k×n`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits float type")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_float {
    ($t:ty, $gemm:path) => {
        impl Float for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernels that already guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let dist = Uniform::new(lo, hi).expect("valid uniform range");
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, v| if v.abs() > m { v.abs() } else { m })
    }

    /// 2-D matrix product `[m,k] · [k,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            (k as isize, 1),
            &other.data,
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Swap axes 1 and 2 of a rank-3 tensor.
    pub fn swap12(&self) -> Result<Self> {
        if self.rank() != 3 {
            return Err(Error::Shape {
                op: "swap12",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (a, b, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = vec![T::zero(); a * b * c];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    out[(i * c + k) * b + j] = self.data[(i * b + j) * c + k];
                }
            }
        }
        Ok(Self::from_parts(vec![a, c, b], out))
    }

    /// Slice `[start, start+len)` along the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Self> {
        let last = *self.shape.last().unwrap_or(&0);
        if start + len > last {
            return Err(Error::Shape {
                op: "slice_last",
                lhs: self.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let rows = self.len() / last.max(1);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.data[r * last + start..r * last + start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = len;
        Ok(Self::from_parts(shape, out))
    }

    /// Zero-pad the last axis so this tensor lands at `[start, start+len)` of width `total`.
    pub fn pad_last(&self, start: usize, total: usize) -> Result<Self> {
        let len = *self.shape.last().unwrap_or(&0);
        if start + len > total {
            return Err(Error::Shape {
                op: "pad_last",
                lhs: self.shape.clone(),
                rhs: vec![start, total],
            });
        }
        let rows = self.len() / len.max(1);
        let mut out = vec![T::zero(); rows * total];
        for r in 0..rows {
            out[r * total + start..r * total + start + len]
                .copy_from_slice(&self.data[r * len..(r + 1) * len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = total;
        Ok(Self::from_parts(shape, out))
    }

    /// Concatenate along the last axis.
    pub fn concat_last(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let lead = &first.shape[..first.rank() - 1];
        let rows: usize = lead.iter().product();
        let mut total = 0;
        for p in parts {
            if &p.shape[..p.rank() - 1] != lead {
                return Err(Error::Shape {
                    op: "concat_last",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += p.shape[p.rank() - 1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let w = p.shape[p.rank() - 1];
                out.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Self::from_parts(shape, out))
    }

    /// `[B, T, D]` → `[B, D]` at time index `t`.
    pub fn select_axis1(&self, t: usize) -> Result<Self> {
        if self.rank() != 3 || t >= self.shape[1] {
            return Err(Error::Shape {
                op: "select_axis1",
                lhs: self.shape.clone(),
                rhs: vec![t],
            });
        }
        let (b, tt, d) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            out.extend_from_slice(&self.data[(i * tt + t) * d..(i * tt + t + 1) * d]);
        }
        Ok(Self::from_parts(vec![b, d], out))
    }

    /// Stack `T` tensors of shape `[B, D]` into `[B, T, D]`.
    pub fn stack_axis1(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Invalid("stack of nothing".into()))?;
        if first.rank() != 2 {
            return Err(Error::Shape {
                op: "stack_axis1",
                lhs: first.shape.clone(),
                rhs: vec![],
            });
        }
        let (b, d) = (first.shape[0], first.shape[1]);
        for p in parts {
            first.same_shape(p, "stack_axis1")?;
        }
        let t = parts.len();
        let mut out = vec![T::zero(); b * t * d];
        for (ti, p) in parts.iter().enumerate() {
            for i in 0..b {
                out[(i * t + ti) * d..(i * t + ti + 1) * d]
                    .copy_from_slice(&p.data[i * d..(i + 1) * d]);
            }
        }
        Ok(Self::from_parts(vec![b, t, d], out))
    }

    /// Add a vector along the last axis (bias broadcast).
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let last = *self.shape.last().unwrap_or(&0);
        if row.rank() != 1 || row.len() != last {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        let mut out = self.to_vec();
        for chunk in out.chunks_mut(last.max(1)) {
            for (o, &b) in chunk.iter_mut().zip(row.data.iter()) {
                *o += b;
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Sum over all leading axes, leaving a vector of the last axis.
    pub fn sum_rows(&self) -> Self {
        let last = *self.shape.last().unwrap_or(&1);
        let mut out = vec![T::zero(); last];
        for chunk in self.data.chunks(last.max(1)) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Self::from_parts(vec![last], out)
    }
}

/// Convolution geometry for a 3×3, stride-1, pad-1 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.cin * 9
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    /// Unfold one `[cin, h, w]` image into `[cin*9, h*w]` columns.
    pub fn im2col<T: Float>(&self, img: &[T], cols: &mut [T]) {
        let (h, w) = (self.h as isize, self.w as isize);
        let hw = self.positions();
        for c in 0..self.cin {
            let plane = &img[c * hw..(c + 1) * hw];
            for ky in 0..3isize {
                for kx in 0..3isize {
                    let row = (c * 9) + (ky * 3 + kx) as usize;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky - 1;
                        let drow = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                        if sy < 0 || sy >= h {
                            drow.fill(T::zero());
                            continue;
                        }
                        let srow = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        for x in 0..w {
                            let sx = x + kx - 1;
                            drow[x as usize] = if sx < 0 || sx >= w {
                                T::zero()
                            } else {
                                srow[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Fold columns back, accumulating into `img`.
    pub fn col2im<T: Float>(&self, cols: &[T], img: &mut [T]) {
        let (h, w) = (self.h as isize, self.w as isize);
        let hw = self.positions();
        for c in 0..self.cin {
            let plane = &mut img[c * hw..(c + 1) * hw];
            for ky in 0..3isize {
                for kx in 0..3isize {
                    let row = (c * 9) + (ky * 3 + kx) as usize;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky - 1;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let crow = &src[(y * w) as usize..((y + 1) * w) as usize];
                        let prow = &mut plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        for x in 0..w {
                            let sx = x + kx - 1;
                            if sx >= 0 && sx < w {
                                prow[sx as usize] += crow[x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}
