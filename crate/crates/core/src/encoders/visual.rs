//! Frozen convolutional visual encoder.

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::feature_map::FeatureMap;
use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, Preprocess};
use crate::init;
use crate::scalar::Scalar;
use crate::seed;
use super::WeightVisitor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// `(out_channels, in_channels, k, k)`
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn out_extent(&self, extent: usize) -> usize {
        let k = self.weight.dim().2;
        (extent + 2 * self.padding).saturating_sub(k) / self.stride + 1
    }

    /// Convolution followed by ReLU. Input and output are `(channels, rows, cols)`.
    pub fn forward(&self, input: &Array3<T>) -> Array3<T> {
        let (cin, rows, cols) = input.dim();
        let (cout, wcin, k, _) = self.weight.dim();
        debug_assert_eq!(cin, wcin);
        let (orows, ocols) = (self.out_extent(rows), self.out_extent(cols));
        let pad = self.padding as isize;
        let mut patches = Array2::<T>::zeros((orows * ocols, cin * k * k));
        for r in 0..orows {
            for c in 0..ocols {
                let mut row = patches.row_mut(r * ocols + c);
                let mut idx = 0;
                for ch in 0..cin {
                    for dr in 0..k {
                        for dc in 0..k {
                            let ir = (r * self.stride + dr) as isize - pad;
                            let ic = (c * self.stride + dc) as isize - pad;
                            if ir >= 0 && ic >= 0 && (ir as usize) < rows && (ic as usize) < cols {
                                row[idx] = input[[ch, ir as usize, ic as usize]];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
        let kernel = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("contiguous conv weight");
        let mut out = patches.dot(&kernel.t());
        out += &self.bias;
        out.mapv_inplace(|v| v.max(T::zero()));
        out.t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, orows, ocols))
            .expect("output size matches")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvgPool {
    pub size: usize,
    pub stride: usize,
}

impl AvgPool {
    pub fn out_extent(&self, extent: usize) -> usize {
        extent.saturating_sub(self.size) / self.stride + 1
    }

    pub fn forward<T: Scalar>(&self, input: &Array3<T>) -> Array3<T> {
        let (ch, rows, cols) = input.dim();
        let (orows, ocols) = (self.out_extent(rows), self.out_extent(cols));
        let norm = T::of((self.size * self.size) as f64);
        Array3::from_shape_fn((ch, orows, ocols), |(c, r, q)| {
            let mut acc = T::zero();
            for dr in 0..self.size {
                for dq in 0..self.size {
                    acc += input[[c, r * self.stride + dr, q * self.stride + dq]];
                }
            }
            acc / norm
        })
    }
}

/// Image encoder with frozen weights: a stack of ReLU convolutions followed by
/// an optional average pooling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder<T> {
    layers: Vec<ConvLayer<T>>,
    pool: Option<AvgPool>,
    preprocess: Preprocess,
}

impl<T: Scalar> VisualEncoder<T> {
    pub fn new(layers: Vec<ConvLayer<T>>, pool: Option<AvgPool>, preprocess: Preprocess) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("visual encoder needs at least one layer"));
        }
        let mut cin = 3;
        for (i, l) in layers.iter().enumerate() {
            let (_, lin, k, k2) = l.weight.dim();
            if lin != cin || k != k2 || l.bias.len() != l.weight.dim().0 || l.stride == 0 {
                return Err(Error::shape(format!("conv layer {i} has inconsistent shape")));
            }
            cin = l.weight.dim().0;
        }
        let enc = Self {
            layers,
            pool,
            preprocess,
        };
        let (w, h) = enc.output_extent();
        if w == 0 || h == 0 {
            return Err(Error::shape("encoder geometry collapses the input"));
        }
        Ok(enc)
    }

    /// Deterministic random encoder: three stride-2 stages `3 -> 16 -> 32 -> 64`.
    pub fn synthetic(seed: u64, input_size: usize) -> Result<Self> {
        let mut rng = seed::rng(seed::child_seed(seed, 0x7615_0001));
        let widths = [3, 16, 32, 64];
        let layers = widths
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                ConvLayer {
                    weight: init::kaiming_uniform(&mut rng, (cout, cin, 3, 3), cin * 9, 6f64.sqrt()),
                    bias: Array1::zeros(cout),
                    stride: 2,
                    padding: 1,
                }
            })
            .collect();
        Self::new(layers, None, Preprocess::identity(input_size))
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn pool(&self) -> Option<AvgPool> {
        self.pool
    }

    pub fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    pub fn input_size(&self) -> usize {
        self.preprocess.size
    }

    pub fn channels(&self) -> usize {
        self.layers.last().map_or(3, |l| l.weight.dim().0)
    }

    /// `(W, H)` of the produced feature map.
    pub fn output_extent(&self) -> (usize, usize) {
        let mut e = self.input_size();
        for l in &self.layers {
            e = l.out_extent(e);
        }
        if let Some(p) = self.pool {
            e = p.out_extent(e);
        }
        (e, e)
    }

    /// Input must already be preprocessed to the configured square resolution.
    pub fn encode_image(&self, image: &ImageTensor<T>) -> Result<FeatureMap<T>> {
        let size = self.input_size();
        if image.width() != size || image.height() != size {
            return Err(Error::Resolution {
                got_w: image.width(),
                got_h: image.height(),
                want_w: size,
                want_h: size,
            });
        }
        let mut x = image.data().clone();
        for layer in &self.layers {
            x = layer.forward(&x);
        }
        if let Some(p) = self.pool {
            x = p.forward(&x);
        }
        // (channels, rows=height, cols=width) -> (channels, width, height)
        FeatureMap::new(x.permuted_axes([0, 2, 1]).as_standard_layout().to_owned())
    }

    pub(crate) fn visit_weights(&self, f: &mut WeightVisitor<'_, T>) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("visual.conv{i}.weight"), l.weight.shape(), l.weight.iter().copied().collect());
            f(&format!("visual.conv{i}.bias"), l.bias.shape(), l.bias.to_vec());
        }
    }
}
