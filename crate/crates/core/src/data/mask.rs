//! Partial-label masking of fully annotated datasets.

use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::labels::{DatasetIndex, LabelVector};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Every image keeps `round(p * C)` known labels.
    #[default]
    PerImage,
    /// `round(p * N * C)` known labels dataset-wide.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub proportion: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: MaskMode,
}

impl MaskSpec {
    pub fn new(proportion: f64, seed: u64, mode: MaskMode) -> Result<Self> {
        let spec = Self {
            proportion,
            seed,
            mode,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.proportion > 0.0 && self.proportion <= 1.0) {
            return Err(Error::invalid(format!(
                "proportion {} outside (0, 1]",
                self.proportion
            )));
        }
        Ok(())
    }
}

/// `round(x)` with ties going up. The epsilon absorbs representation error
/// such as `0.35 * 10 = 3.4999999999999996`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Number of known entries each image keeps in per-image mode.
pub fn known_per_image(proportion: f64, num_categories: usize) -> usize {
    round_half_up(proportion * num_categories as f64).min(num_categories)
}

/// Randomly hides labels so that the requested proportion stays known.
///
/// Identical `(full, spec)` pairs give identical output; the only randomness
/// is a ChaCha stream seeded from `spec.seed` and consumed in sample order.
pub fn apply_partial_mask(full: &DatasetIndex, spec: &MaskSpec) -> Result<DatasetIndex> {
    spec.validate()?;
    if let Some(i) = full.labels().position(|l| !l.is_fully_annotated()) {
        return Err(Error::InvalidLabels(format!(
            "sample {i} already contains unknown entries; masking needs full annotation"
        )));
    }
    let c = full.num_categories();
    let n = full.len();
    let mut rng = seed::rng(spec.seed);
    let mut rows: Vec<Vec<i8>> = vec![vec![0; c]; n];

    match spec.mode {
        MaskMode::PerImage => {
            let keep = known_per_image(spec.proportion, c);
            for (row, labels) in rows.iter_mut().zip(full.labels()) {
                for j in index::sample(&mut rng, c, keep) {
                    row[j] = labels.get(j);
                }
            }
        }
        MaskMode::Global => {
            let total = n * c;
            let keep = round_half_up(spec.proportion * total as f64).min(total);
            let labels: Vec<&LabelVector> = full.labels().collect();
            for flat in index::sample(&mut rng, total, keep) {
                let (i, j) = (flat / c, flat % c);
                rows[i][j] = labels[i].get(j);
            }
        }
    }

    let rows = rows
        .into_iter()
        .map(LabelVector::new)
        .collect::<Result<Vec<_>>>()?;
    full.with_labels(rows)
}

/// On-disk form of a masked dataset: the mask parameters plus every label row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskManifest {
    pub proportion: f64,
    pub seed: u64,
    pub mode: MaskMode,
    pub rows: Vec<LabelVector>,
}

impl MaskManifest {
    pub fn from_masked(spec: &MaskSpec, masked: &DatasetIndex) -> Self {
        Self {
            proportion: spec.proportion,
            seed: spec.seed,
            mode: spec.mode,
            rows: masked.labels().cloned().collect(),
        }
    }

    pub fn spec(&self) -> MaskSpec {
        MaskSpec {
            proportion: self.proportion,
            seed: self.seed,
            mode: self.mode,
        }
    }

    /// Applies the stored rows to `full`, which must be the dataset they were
    /// generated from.
    pub fn apply_to(&self, full: &DatasetIndex) -> Result<DatasetIndex> {
        for (i, (row, orig)) in self.rows.iter().zip(full.labels()).enumerate() {
            if row.len() != orig.len() {
                return Err(Error::shape(format!(
                    "mask row {i} has {} entries, dataset has {}",
                    row.len(),
                    orig.len()
                )));
            }
            let flips = row
                .values()
                .iter()
                .zip(orig.values())
                .any(|(&m, &o)| m != 0 && m != o);
            if flips {
                return Err(Error::InvalidLabels(format!(
                    "mask row {i} disagrees with the dataset's annotation"
                )));
            }
        }
        full.with_labels(self.rows.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.spec().validate()?;
        Ok(manifest)
    }
}
