//! Seeded synthetic multi-label images.
//!
//! Each category owns a fixed color; an image containing the category shows a
//! square patch of that color over low-amplitude noise. Patches occupy
//! distinct cells of a regular grid, so no object hides another unless there
//! are more objects than cells.
//! The label stream and pixel stream of image `i` come from a ChaCha RNG
//! seeded with `child_seed(seed, i)`, so any single image can be regenerated.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::labels::{DatasetIndex, ImageRef, LabelVector, Sample};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::scalar::Scalar;
use crate::seed;

fn default_mean_positives() -> f64 {
    3.0
}

fn default_image_size() -> usize {
    56
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub num_categories: usize,
    pub seed: u64,
    #[serde(default = "default_mean_positives")]
    pub mean_positives: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

impl Eq for SyntheticSpec {}

impl SyntheticSpec {
    pub fn new(num_images: usize, num_categories: usize, seed: u64) -> Self {
        Self {
            num_images,
            num_categories,
            seed,
            mean_positives: default_mean_positives(),
            image_size: default_image_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_images < 1 {
            return Err(Error::invalid("synthetic dataset needs at least one image"));
        }
        if self.num_categories < 2 {
            return Err(Error::invalid("synthetic dataset needs at least two categories"));
        }
        if !(self.mean_positives > 0.0) {
            return Err(Error::invalid("mean_positives must be positive"));
        }
        if self.image_size < 8 {
            return Err(Error::invalid("synthetic image_size must be at least 8"));
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        (0..self.num_categories).map(|c| format!("class_{c:02}")).collect()
    }

    fn patch_size(&self) -> usize {
        (self.image_size / 4).max(2)
    }

    /// Presence mask and patch corners for image `index`.
    fn layout(&self, index: usize) -> (Vec<bool>, Vec<(usize, usize)>, u64) {
        let mut rng = seed::rng(seed::child_seed(self.seed, index as u64));
        let c = self.num_categories;
        let q = (self.mean_positives / c as f64).min(1.0);
        let mut present: Vec<bool> = (0..c).map(|_| rng.gen_bool(q)).collect();
        if !present.contains(&true) {
            present[rng.gen_range(0..c)] = true;
        }
        let k = self.patch_size();
        let grid = self.image_size / k;
        let mut cells: Vec<usize> = (0..grid * grid).collect();
        cells.shuffle(&mut rng);
        let mut free = cells.into_iter();
        let span = self.image_size - k + 1;
        let corners = present
            .iter()
            .map(|&p| match if p { free.next() } else { None } {
                Some(cell) => ((cell % grid) * k, (cell / grid) * k),
                None => (rng.gen_range(0..span), rng.gen_range(0..span)),
            })
            .collect();
        (present, corners, rng.gen())
    }

    pub fn labels(&self, index: usize) -> LabelVector {
        LabelVector::from_presence(&self.layout(index).0)
    }

    pub fn image<T: Scalar>(&self, index: usize) -> ImageTensor<T> {
        let (present, corners, noise_seed) = self.layout(index);
        let n = self.image_size;
        let mut rng = seed::rng(noise_seed);
        let mut data = Array3::<f64>::zeros((3, n, n));
        data.mapv_inplace(|_| rng.gen_range(0.0..0.25));
        let k = self.patch_size();
        for (c, &(x0, y0)) in corners.iter().enumerate() {
            if !present[c] {
                continue;
            }
            let color = category_color(c, self.num_categories);
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    for ch in 0..3 {
                        data[[ch, y, x]] = color[ch];
                    }
                }
            }
        }
        ImageTensor::new(data.mapv(T::of)).expect("three channels")
    }
}

/// Fully saturated hue wheel, with alternating brightness so that neighbouring
/// hues stay separable for large category counts.
pub fn category_color(c: usize, num_categories: usize) -> [f64; 3] {
    let hue = c as f64 / num_categories as f64 * 6.0;
    let value = if c.is_multiple_of(2) { 1.0 } else { 0.65 };
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r * value, g * value, b * value]
}

/// Index plus decoded images of a synthetic dataset.
pub fn make_synthetic_dataset<T: Scalar>(
    spec: &SyntheticSpec,
) -> Result<(DatasetIndex, Vec<ImageTensor<T>>)> {
    let index = synthetic_index(spec)?;
    let images = (0..spec.num_images).map(|i| spec.image(i)).collect();
    Ok((index, images))
}

/// Labels only; images are regenerated on demand from [`ImageRef::Synthetic`].
pub fn synthetic_index(spec: &SyntheticSpec) -> Result<DatasetIndex> {
    spec.validate()?;
    let samples = (0..spec.num_images)
        .map(|i| Sample {
            image: ImageRef::Synthetic {
                spec: spec.clone(),
                index: i,
            },
            labels: spec.labels(i),
        })
        .collect();
    DatasetIndex::new(samples, spec.category_names())
}
