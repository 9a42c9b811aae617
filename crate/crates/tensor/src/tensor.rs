use std::fmt;

use crate::error::{Result, TensorError};
use crate::Scalar;

/// Dimensions of a batch-channel-row-column tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const SCALAR: Shape4 = Shape4 {
        n: 1,
        c: 1,
        h: 1,
        w: 1,
    };

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// Element count, or `None` when it overflows `usize`.
    pub fn checked_numel(&self) -> Option<usize> {
        self.n
            .checked_mul(self.c)?
            .checked_mul(self.h)?
            .checked_mul(self.w)
    }

    pub fn numel(&self) -> usize {
        self.checked_numel().expect("shape element count overflows usize")
    }

    /// Elements in one `h x w` plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    pub fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        *self == Self::SCALAR
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        let expected = shape.checked_numel().ok_or_else(|| TensorError::Invalid {
            op: "from_vec",
            reason: format!("element count of {shape} overflows"),
        })?;
        if data.len() != expected {
            return Err(TensorError::DataLength {
                op: "from_vec",
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn ones(shape: Shape4) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Shape4::SCALAR,
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.shape.offset(n, c, h, w);
        &mut self.data[i]
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if !self.shape.is_scalar() {
            return Err(TensorError::NotScalar {
                op: "item",
                shape: self.shape,
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::ZERO, |m, v| if v.abs() > m { v.abs() } else { m })
    }

    /// Contiguous range of batch items `[start, start + count)`.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.shape.n {
            return Err(TensorError::Invalid {
                op: "batch_slice",
                reason: format!("items {start}..{} out of {}", start + count, self.shape.n),
            });
        }
        let item = self.shape.item();
        Ok(Self {
            shape: Shape4::new(count, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start * item..(start + count) * item].to_vec(),
        })
    }

    /// Stack tensors of identical per-item shape along the batch axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "stack",
            reason: "no tensors to stack".into(),
        })?;
        let s = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut n = 0;
        for p in parts {
            if (p.shape.c, p.shape.h, p.shape.w) != (s.c, s.h, s.w) {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    expected: Shape4::new(p.shape.n, s.c, s.h, s.w),
                    got: p.shape,
                });
            }
            data.extend_from_slice(&p.data);
            n += p.shape.n;
        }
        Ok(Self {
            shape: Shape4::new(n, s.c, s.h, s.w),
            data,
        })
    }

    /// Channel range `[start, start + count)` of every batch item.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Self> {
        let s = self.shape;
        if start + count > s.c {
            return Err(TensorError::Invalid {
                op: "channel_slice",
                reason: format!("channels {start}..{} out of {}", start + count, s.c),
            });
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * count * plane);
        for n in 0..s.n {
            let base = s.offset(n, start, 0, 0);
            data.extend_from_slice(&self.data[base..base + count * plane]);
        }
        Ok(Self {
            shape: Shape4::new(s.n, count, s.h, s.w),
            data,
        })
    }
}
