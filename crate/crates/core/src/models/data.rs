use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseVector;
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: DenseVector,
    pub y: usize,
}

impl Example {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Self {
            x: DenseVector::from_vec(x),
            y,
        }
    }
}

/// Ordered, non-empty collection of examples with stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    ids: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    /// Ids default to positions.
    pub fn new(examples: Vec<Example>, n_classes: usize) -> Result<Self> {
        let ids = (0..examples.len()).collect();
        Self::with_ids(examples, ids, n_classes)
    }

    pub fn with_ids(examples: Vec<Example>, ids: Vec<usize>, n_classes: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDimension("dataset"));
        }
        if ids.len() != examples.len() {
            return Err(Error::mismatch("dataset ids", examples.len(), ids.len()));
        }
        let dim = examples[0].x.len();
        for e in &examples {
            if e.x.len() != dim {
                return Err(Error::mismatch("dataset feature length", dim, e.x.len()));
            }
            if e.y >= n_classes {
                return Err(Error::invalid(format!(
                    "label {} outside 0..{n_classes}",
                    e.y
                )));
            }
        }
        Ok(Self {
            examples,
            ids,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.examples[0].x.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn get(&self, index: usize) -> &Example {
        &self.examples[index]
    }

    /// Sub-dataset at the given positions (ids are carried over).
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        let examples = positions.iter().map(|&p| self.examples[p].clone()).collect();
        let ids = positions.iter().map(|&p| self.ids[p]).collect();
        Self::with_ids(examples, ids, self.n_classes)
    }

    /// Writes `x0,…,x{D-1},label` with a header row.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for e in &self.examples {
            let mut row: Vec<String> = e.x.iter().map(|v| format!("{v:?}")).collect();
            row.push(e.y.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`Dataset::save_csv`]. The class count is
    /// `max label + 1` unless given.
    pub fn load_csv(path: &Path, n_classes: Option<usize>) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut examples = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse_err = |m: String| Error::Parse {
                path: path.to_path_buf(),
                message: format!("row {}: {m}", line + 1),
            };
            if rec.len() < 2 {
                return Err(parse_err("need at least one feature and a label".into()));
            }
            let mut x = Vec::with_capacity(rec.len() - 1);
            for field in rec.iter().take(rec.len() - 1) {
                x.push(field.trim().parse::<f64>().map_err(|e| parse_err(e.to_string()))?);
            }
            let y = rec[rec.len() - 1]
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(e.to_string()))?;
            examples.push(Example::new(x, y));
        }
        let k = n_classes.unwrap_or_else(|| examples.iter().map(|e| e.y + 1).max().unwrap_or(0));
        Self::new(examples, k.max(2))
    }
}

/// Gaussian class-conditional clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub n_examples: usize,
    /// Scale of the class means; the within-class noise is `N(0, I)`.
    pub separation: f64,
}

impl SyntheticSpec {
    /// Class means are `separation · m_k` with `m_k ~ N(0, I)`; labels are
    /// uniform and `x = mean_y + N(0, I)`.
    pub fn generate(&self, rng: &mut SeededRng) -> Result<Dataset> {
        if self.n_classes < 2 || self.dim == 0 || self.n_examples == 0 {
            return Err(Error::invalid("synthetic dataset needs K ≥ 2, dim ≥ 1, n ≥ 1"));
        }
        let means: Vec<DenseVector> = (0..self.n_classes)
            .map(|_| rng.gaussian_vector(self.dim, 1.0).map(|m| m * self.separation))
            .collect::<Result<_>>()?;
        let mut examples = Vec::with_capacity(self.n_examples);
        for _ in 0..self.n_examples {
            let y = rng.below(self.n_classes);
            let x = &means[y] + rng.gaussian_vector(self.dim, 1.0)?;
            examples.push(Example { x, y });
        }
        Dataset::new(examples, self.n_classes)
    }
}
