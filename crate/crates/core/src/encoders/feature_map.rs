use ndarray::{Array2, Array3, ArrayView1};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Visual encoder output, shape `(channels, width, height)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    data: Array3<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        let (_, w, h) = data.dim();
        if w == 0 || h == 0 {
            return Err(Error::shape("feature map needs a nonempty spatial extent"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite entries"));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn num_positions(&self) -> usize {
        self.width() * self.height()
    }

    /// Local feature at `(w, h)`.
    pub fn at(&self, w: usize, h: usize) -> ArrayView1<'_, T> {
        self.data.slice(ndarray::s![.., w, h])
    }

    /// Positions as rows, `(W*H, channels)`; row index is `w * H + h`.
    pub fn positions(&self) -> Array2<T> {
        let (n, w, h) = self.data.dim();
        let mut out = Array2::zeros((w * h, n));
        for wi in 0..w {
            for hi in 0..h {
                out.row_mut(wi * h + hi).assign(&self.at(wi, hi));
            }
        }
        out
    }
}
