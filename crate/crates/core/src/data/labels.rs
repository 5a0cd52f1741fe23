use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-image annotation over `C` categories: `+1` present, `-1` absent, `0` unknown.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct LabelVector(Vec<i8>);

impl LabelVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(-1..=1).contains(*v)) {
            return Err(Error::InvalidLabels(format!(
                "entry {bad} is not one of -1, 0, +1"
            )));
        }
        Ok(Self(values))
    }

    /// Full annotation from a presence mask.
    pub fn from_presence(present: &[bool]) -> Self {
        Self(present.iter().map(|&p| if p { 1 } else { -1 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn get(&self, c: usize) -> i8 {
        self.0[c]
    }

    pub fn is_fully_annotated(&self) -> bool {
        !self.0.contains(&0)
    }

    pub fn known_count(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0).count()
    }

    pub fn positive_count(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }

    pub fn known_fraction(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.known_count() as f64 / self.0.len() as f64
        }
    }
}

impl TryFrom<Vec<i8>> for LabelVector {
    type Error = Error;

    fn try_from(values: Vec<i8>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<LabelVector> for Vec<i8> {
    fn from(labels: LabelVector) -> Self {
        labels.0
    }
}

/// Where the pixels of a sample come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    Path(PathBuf),
    /// Image `index` of the synthetic generator described by `spec`.
    Synthetic {
        spec: super::synthetic::SyntheticSpec,
        index: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: ImageRef,
    pub labels: LabelVector,
}

/// Ordered samples over a fixed, named category list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    samples: Vec<Sample>,
    category_names: Vec<String>,
}

impl DatasetIndex {
    pub fn new(samples: Vec<Sample>, category_names: Vec<String>) -> Result<Self> {
        if category_names.is_empty() {
            return Err(Error::invalid("dataset needs at least one category"));
        }
        let mut seen = HashSet::new();
        for name in &category_names {
            if name.trim().is_empty() {
                return Err(Error::invalid("category names must be nonempty"));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate category name {name:?}")));
            }
        }
        let c = category_names.len();
        for (i, s) in samples.iter().enumerate() {
            if s.labels.len() != c {
                return Err(Error::shape(format!(
                    "sample {i} has {} labels, dataset has {c} categories",
                    s.labels.len()
                )));
            }
        }
        Ok(Self {
            samples,
            category_names,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn category_names(&self) -> &[String] {
        &self.category_names
    }

    pub fn num_categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &LabelVector> {
        self.samples.iter().map(|s| &s.labels)
    }

    pub fn is_fully_annotated(&self) -> bool {
        self.labels().all(LabelVector::is_fully_annotated)
    }

    pub fn known_count(&self) -> usize {
        self.labels().map(LabelVector::known_count).sum()
    }

    pub fn known_fraction(&self) -> f64 {
        let total = self.len() * self.num_categories();
        if total == 0 {
            0.0
        } else {
            self.known_count() as f64 / total as f64
        }
    }

    /// Same images and categories with replaced label rows.
    pub fn with_labels(&self, rows: Vec<LabelVector>) -> Result<Self> {
        if rows.len() != self.samples.len() {
            return Err(Error::shape(format!(
                "{} label rows for {} samples",
                rows.len(),
                self.samples.len()
            )));
        }
        let samples = self
            .samples
            .iter()
            .zip(rows)
            .map(|(s, labels)| Sample {
                image: s.image.clone(),
                labels,
            })
            .collect();
        Self::new(samples, self.category_names.clone())
    }

    /// Fails unless `names` is exactly this dataset's category list, in order.
    pub fn check_categories(&self, names: &[String]) -> Result<()> {
        if self.category_names != names {
            return Err(Error::CategoryMismatch(format!(
                "dataset has {:?}, expected {:?}",
                self.category_names, names
            )));
        }
        Ok(())
    }
}
