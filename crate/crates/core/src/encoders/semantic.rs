//! Category-name word vectors guiding the spatial attention.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::init;
use crate::scalar::Scalar;
use crate::seed;

/// Word-vector representation of one category name.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVector<T> {
    data: Array1<T>,
}

impl<T: Scalar> SemanticVector<T> {
    pub fn new(data: Array1<T>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("semantic vector has non-finite entries"));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array1<T> {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }
}

/// Standard deviation of the hashed fallback vectors, close to the per-entry
/// spread of common pretrained 300-d word vectors.
const FALLBACK_STD: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticSource {
    dim: usize,
    seed: u64,
    table: HashMap<String, Vec<f64>>,
}

impl SemanticSource {
    /// Every word maps to its hashed fallback vector.
    pub fn hashed(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            table: HashMap::new(),
        }
    }

    /// Reads `word v1 ... vD` lines, keeping only the words in `needed`
    /// (lowercased). The dimension is taken from the first line.
    pub fn load_text(path: &Path, needed: &[String], seed: u64) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let wanted: HashSet<String> = needed
            .iter()
            .flat_map(|n| n.split_whitespace().map(str::to_lowercase))
            .collect();
        let mut dim = None;
        let mut table = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<&str> = parts.collect();
            let d = *dim.get_or_insert(values.len());
            if values.len() != d || d == 0 {
                return Err(Error::Annotation {
                    path: path.to_path_buf(),
                    reason: format!("line {} has {} values, expected {d}", lineno + 1, values.len()),
                });
            }
            let key = word.to_lowercase();
            if !wanted.contains(&key) || table.contains_key(&key) {
                continue;
            }
            let parsed = values
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Annotation {
                    path: path.to_path_buf(),
                    reason: format!("line {}: {e}", lineno + 1),
                })?;
            table.insert(key, parsed);
        }
        let dim = dim.ok_or_else(|| Error::Annotation {
            path: path.to_path_buf(),
            reason: "embedding file is empty".into(),
        })?;
        Ok(Self { dim, seed, table })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, word: &str) -> bool {
        self.table.contains_key(&word.to_lowercase())
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let key = word.to_lowercase();
        if let Some(v) = self.table.get(&key) {
            return v.clone();
        }
        let s = seed::hash_seed("semantic", &format!("{}:{key}", self.seed));
        init::gaussian::<f64, _, _>(&mut seed::rng(s), self.dim, FALLBACK_STD).to_vec()
    }

    /// Multi-word names average their word vectors; unknown words fall back to
    /// a deterministic vector seeded by the word.
    pub fn semantic_embedding<T: Scalar>(&self, name: &str) -> Result<SemanticVector<T>> {
        let words: Vec<&str> = name.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::invalid("category name is empty"));
        }
        let mut acc = vec![0.0; self.dim];
        for w in &words {
            if !self.table.is_empty() && !self.contains(w) {
                log::warn!("word {w:?} is not in the embedding table; using hashed fallback");
            }
            for (a, v) in acc.iter_mut().zip(self.word_vector(w)) {
                *a += v;
            }
        }
        let n = words.len() as f64;
        SemanticVector::new(acc.into_iter().map(|v| T::of(v / n)).collect())
    }
}
