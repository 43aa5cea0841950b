use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type of tensors: `f32` for training, `f64` for reference checks.
pub trait Real:
    Float + Sum + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + Serialize + DeserializeOwned + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = A * B`, or `C += A * B` when `accumulate`. `C` is row-major with
    /// `n` columns; `A` and `B` are described by (row, column) strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    );
}

macro_rules! real_impl {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
                };
                assert!(a.len() >= extent(m, k, rsa, csa) && b.len() >= extent(k, n, rsb, csb));
                // SAFETY: extents checked above; `c` is a distinct &mut slice.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        if accumulate { 1.0 } else { 0.0 },
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

real_impl!(f32, matrixmultiply::sgemm);
real_impl!(f64, matrixmultiply::dgemm);

/// Dense NCHW tensor. Matrices (batch, features) are stored with
/// `height == width == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FeatureMap<T = f32> {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
            data: vec![T::zero(); batch * channels * height * width],
        }
    }

    pub fn from_vec(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "feature map dims must be >= 1, got ({batch},{channels},{height},{width})"
            )));
        }
        if data.len() != batch * channels * height * width {
            return Err(Error::Shape(format!(
                "buffer of {} values does not fit ({batch},{channels},{height},{width})",
                data.len()
            )));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    /// A (rows, cols) matrix viewed as (rows, cols, 1, 1).
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(rows, cols, 1, 1, data)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Values per batch item.
    pub fn item_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn item(&self, n: usize) -> &[T] {
        let k = self.item_len();
        &self.data[n * k..(n + 1) * k]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let k = self.item_len();
        &mut self.data[n * k..(n + 1) * k]
    }

    /// Row `n` of a matrix-shaped tensor.
    pub fn row(&self, n: usize) -> &[T] {
        self.item(n)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&FeatureMap<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (n, h, w) = (first.batch, first.height, first.width);
        if parts.iter().any(|p| p.batch != n || p.height != h || p.width != w) {
            return Err(Error::Shape("concat needs matching batch and spatial dims".into()));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.item(b));
            }
        }
        Ok(Self {
            batch: n,
            channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Split along channels into pieces of the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Vec<FeatureMap<T>> {
        debug_assert_eq!(widths.iter().sum::<usize>(), self.channels);
        let plane = self.plane();
        let mut out: Vec<FeatureMap<T>> = widths
            .iter()
            .map(|&c| FeatureMap::zeros(self.batch, c, self.height, self.width))
            .collect();
        for b in 0..self.batch {
            let src = self.item(b);
            let mut offset = 0;
            for (piece, &c) in out.iter_mut().zip(widths) {
                piece
                    .item_mut(b)
                    .copy_from_slice(&src[offset * plane..(offset + c) * plane]);
                offset += c;
            }
        }
        out
    }

    /// Stack single-item tensors into one batch.
    pub fn stack(items: &[FeatureMap<T>]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyDataset)?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for it in items {
            if it.channels != first.channels || it.height != first.height || it.width != first.width {
                return Err(Error::Shape("cannot stack tensors of differing shapes".into()));
            }
            data.extend_from_slice(&it.data);
        }
        Ok(Self {
            batch: data.len() / first.item_len(),
            channels: first.channels,
            height: first.height,
            width: first.width,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &FeatureMap<T>) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Same values in another precision.
    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            batch: self.batch,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
