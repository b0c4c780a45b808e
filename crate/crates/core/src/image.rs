//! Image-shaped tensors tagged with their value range.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Declared value interval of an [`ImageTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// Raw intensities in `[0, 1]`.
    Unit,
    /// Normalized HR/LR intensities in `[-1, 1]`.
    Symmetric,
    /// HR minus upsampled LR, in `[-2, 2]`.
    Residual,
    /// Noise and noisy latents.
    Unbounded,
}

impl ValueRange {
    pub fn bounds(self) -> Option<(f64, f64)> {
        match self {
            Self::Unit => Some((0.0, 1.0)),
            Self::Symmetric => Some((-1.0, 1.0)),
            Self::Residual => Some((-2.0, 2.0)),
            Self::Unbounded => None,
        }
    }
}

/// Rank-4 `[B, C, H, W]` tensor with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    data: Tensor<T>,
    range: ValueRange,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(data: Tensor<T>, range: ValueRange) -> Result<Self> {
        let (b, c, h, w) = data.dims4()?;
        if b == 0 || c == 0 || h == 0 || w == 0 {
            return Err(dim_err(format!("image dims must be positive, got {:?}", data.shape())));
        }
        if !data.all_finite() {
            return Err(Error::Data("image contains non-finite values".into()));
        }
        Ok(Self { data, range })
    }

    pub fn zeros(shape: [usize; 4], range: ValueRange) -> Self {
        Self { data: Tensor::zeros(&shape), range }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn with_range(mut self, range: ValueRange) -> Self {
        self.range = range;
        self
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dims4().expect("rank 4 by construction")
    }

    pub fn shape(&self) -> [usize; 4] {
        let (b, c, h, w) = self.dims();
        [b, c, h, w]
    }

    pub fn data(&self) -> &[T] {
        self.data.data()
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.data.data_mut()
    }

    /// Clip every entry into the declared range (no-op for unbounded).
    pub fn clip_to_range(&mut self) {
        if let Some((lo, hi)) = self.range.bounds() {
            let (lo, hi) = (T::of(lo), T::of(hi));
            self.data.data_mut().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
        }
    }

    pub fn batch_item(&self, i: usize) -> Result<Self> {
        Ok(Self { data: self.data.narrow_batch(i, 1)?, range: self.range })
    }

    pub fn stack(items: &[Self]) -> Result<Self> {
        let range = items.first().ok_or_else(|| dim_err("nothing to stack"))?.range;
        let parts: Vec<Tensor<T>> = items.iter().map(|i| i.data.clone()).collect();
        Ok(Self { data: Tensor::stack_batch(&parts)?, range })
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor { data: self.data.cast(), range: self.range }
    }
}
