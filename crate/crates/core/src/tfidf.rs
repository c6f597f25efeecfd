//! Bag-of-words language model and its damped influence, which tends to a
//! square-root-IDF similarity as the damping vanishes.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::models::softmax;
use crate::rng::SeededRng;

/// Equal-length documents over a fixed vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    documents: Vec<Vec<usize>>,
    vocabulary: Vec<String>,
    doc_len: usize,
}

impl Corpus {
    pub fn new(documents: Vec<Vec<usize>>, vocabulary: Vec<String>) -> Result<Self> {
        let first = documents.first().ok_or(Error::EmptyDimension("corpus"))?;
        let doc_len = first.len();
        if doc_len == 0 {
            return Err(Error::EmptyDimension("document"));
        }
        if vocabulary.is_empty() {
            return Err(Error::EmptyDimension("vocabulary"));
        }
        for (i, d) in documents.iter().enumerate() {
            if d.len() != doc_len {
                return Err(Error::invalid(format!(
                    "document {i} has length {} but documents must all have length {doc_len}",
                    d.len()
                )));
            }
            if let Some(t) = d.iter().find(|&&t| t >= vocabulary.len()) {
                return Err(Error::invalid(format!("document {i} uses term {t} outside the vocabulary")));
            }
        }
        Ok(Self {
            documents,
            vocabulary,
            doc_len,
        })
    }

    /// One document per non-empty line, whitespace-separated tokens. Without
    /// an explicit vocabulary, terms are numbered in order of first appearance.
    pub fn parse(text: &str, vocabulary: Option<Vec<String>>) -> Result<Self> {
        let fixed = vocabulary.is_some();
        let mut vocab = vocabulary.unwrap_or_default();
        let mut index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let mut docs = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut doc = Vec::new();
            for tok in line.split_whitespace() {
                let id = match index.get(tok) {
                    Some(&i) => i,
                    None if fixed => {
                        return Err(Error::invalid(format!("line {}: unknown term {tok:?}", line_no + 1)));
                    }
                    None => {
                        vocab.push(tok.to_string());
                        index.insert(tok.to_string(), vocab.len() - 1);
                        vocab.len() - 1
                    }
                };
                doc.push(id);
            }
            docs.push(doc);
        }
        Self::new(docs, vocab)
    }

    pub fn load(path: &Path, vocabulary: Option<Vec<String>>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, vocabulary).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// `n_docs` documents of length `doc_len`, terms drawn i.i.d. from `p`.
    pub fn sample(p: &DenseVector, n_docs: usize, doc_len: usize, rng: &mut SeededRng) -> Result<Self> {
        if p.is_empty() || n_docs == 0 || doc_len == 0 {
            return Err(Error::EmptyDimension("sampled corpus"));
        }
        let cdf: Vec<f64> = p
            .iter()
            .scan(0.0, |acc, &v| {
                *acc += v;
                Some(*acc)
            })
            .collect();
        let total = *cdf.last().unwrap();
        let docs = (0..n_docs)
            .map(|_| {
                (0..doc_len)
                    .map(|_| {
                        let u = rng.uniform() * total;
                        cdf.partition_point(|&c| c <= u).min(p.len() - 1)
                    })
                    .collect()
            })
            .collect();
        let vocab = (0..p.len()).map(|t| format!("t{t}")).collect();
        Self::new(docs, vocab)
    }

    pub fn documents(&self) -> &[Vec<usize>] {
        &self.documents
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn doc_len(&self) -> usize {
        self.doc_len
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// `TF(·, d) = count(·, d)/|d|`.
    pub fn term_frequencies(&self, doc: usize) -> DenseVector {
        let mut tf = DenseVector::zeros(self.vocab_size());
        for &t in &self.documents[doc] {
            tf[t] += 1.0;
        }
        tf / self.doc_len as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TfIdf {
    /// `vocab × docs`.
    pub tf: DenseMatrix,
    /// Fraction of documents containing each term.
    pub df: DenseVector,
    /// `√(1/DF)`; `None` for terms that never occur.
    pub idf: Vec<Option<f64>>,
}

impl TfIdf {
    pub fn absent_terms(&self) -> Vec<usize> {
        self.idf.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(t, _)| t).collect()
    }

    /// `Σ_t TF(t,d₁) TF(t,d₂)/DF(t)`, skipping absent terms.
    pub fn similarity(&self, d1: usize, d2: usize) -> f64 {
        (0..self.tf.nrows())
            .filter(|&t| self.df[t] > 0.0)
            .map(|t| self.tf[(t, d1)] * self.tf[(t, d2)] / self.df[t])
            .sum()
    }
}

pub fn tfidf_weights(corpus: &Corpus) -> TfIdf {
    let v = corpus.vocab_size();
    let n = corpus.len();
    let mut tf = DenseMatrix::zeros(v, n);
    let mut df = DenseVector::zeros(v);
    for d in 0..n {
        let col = corpus.term_frequencies(d);
        for t in 0..v {
            if col[t] > 0.0 {
                df[t] += 1.0;
            }
        }
        tf.set_column(d, &col);
    }
    df /= n as f64;
    let idf = df.iter().map(|&f| (f > 0.0).then(|| (1.0 / f).sqrt())).collect();
    TfIdf { tf, df, idf }
}

/// Logits `x` and `p = sf(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BowParams {
    pub x: DenseVector,
    pub p: DenseVector,
}

impl BowParams {
    pub fn from_logits(x: DenseVector) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::EmptyDimension("bag-of-words logits"));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("bag-of-words logits".into()));
        }
        let p = softmax(x.as_slice());
        if p.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("term probabilities must be positive"));
        }
        Ok(Self { x, p })
    }

    pub fn from_probabilities(p: &DenseVector) -> Result<Self> {
        if p.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("term probabilities must be positive"));
        }
        let s = p.sum();
        Self::from_logits(p.map(|v| (v / s).ln()))
    }

    /// Additively smoothed term counts, `(count + α)/(total + α·V)`.
    pub fn fit(corpus: &Corpus, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid("smoothing must be positive"));
        }
        let mut counts = DenseVector::repeat(corpus.vocab_size(), alpha);
        for d in corpus.documents() {
            for &t in d {
                counts[t] += 1.0;
            }
        }
        Self::from_probabilities(&counts)
    }

    /// `Diag(p) − ppᵀ`, the Hessian of `−log p(d)` per unit document length.
    pub fn hessian(&self) -> DenseMatrix {
        DenseMatrix::from_diagonal(&self.p) - &self.p * self.p.transpose()
    }
}

/// `∇_x log p(d) = |d|(TF(·, d) − p)`.
pub fn bow_gradient(corpus: &Corpus, doc: usize, params: &BowParams) -> Result<DenseVector> {
    if params.p.len() != corpus.vocab_size() {
        return Err(Error::mismatch("bag-of-words parameters", corpus.vocab_size(), params.p.len()));
    }
    if doc >= corpus.len() {
        return Err(Error::invalid(format!("document {doc} outside 0..{}", corpus.len())));
    }
    Ok((corpus.term_frequencies(doc) - &params.p) * corpus.doc_len() as f64)
}

/// Closed-form `(Diag(p) − ppᵀ + λI)⁻¹ = Diag(p + λ)⁻¹ + (λ Σ_j p_j/(p_j + λ))⁻¹ ddᵀ`
/// with `d = p/(p + λ)`. The rank-one term enters with a plus sign
/// (Sherman–Morrison on a rank-one downdate).
pub fn bow_inverse_hessian(params: &BowParams, lambda_damp: f64) -> Result<DenseMatrix> {
    if !(lambda_damp > 0.0) {
        return Err(Error::invalid(format!("damping must be positive, got {lambda_damp}")));
    }
    let p = &params.p;
    let d = p.map(|v| v / (v + lambda_damp));
    let s = lambda_damp * d.sum();
    let diag = DenseMatrix::from_diagonal(&p.map(|v| 1.0 / (v + lambda_damp)));
    Ok(diag + &d * d.transpose() / s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub d1: usize,
    pub d2: usize,
    /// `g₁ᵀ(H + λ)⁻¹g₂`.
    pub influence_exact: f64,
    /// `|d|²(Σ_t TF₁TF₂/p_t − 1)`, the λ → 0 limit.
    pub tfidf_form: f64,
    /// `Σ_t TF₁TF₂/p_t` without the scale and offset.
    pub plain_form: f64,
    pub abs_diff: f64,
    /// `abs_diff/(λ‖g₁‖‖g₂‖)`.
    pub rate: f64,
}

/// Every unordered pair `d1 ≤ d2`.
pub fn tfidf_equivalence_check(corpus: &Corpus, params: &BowParams, lambda_damp: f64) -> Result<Vec<PairCheck>> {
    if lambda_damp == 0.0 {
        return Err(Error::Singular("the undamped bag-of-words Hessian is singular".into()));
    }
    let m = bow_inverse_hessian(params, lambda_damp)?;
    let n = corpus.len();
    let grads: Vec<DenseVector> = (0..n).map(|d| bow_gradient(corpus, d, params)).collect::<Result<_>>()?;
    let solved: Vec<DenseVector> = grads.par_iter().map(|g| &m * g).collect();
    let tfs: Vec<DenseVector> = (0..n).map(|d| corpus.term_frequencies(d)).collect();
    let len_sq = (corpus.doc_len() as f64).powi(2);
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    Ok(pairs
        .into_par_iter()
        .map(|(i, j)| {
            let exact = grads[i].dot(&solved[j]);
            let plain: f64 = tfs[i]
                .iter()
                .zip(tfs[j].iter())
                .zip(params.p.iter())
                .map(|((a, b), p)| a * b / p)
                .sum();
            let form = len_sq * (plain - 1.0);
            let abs_diff = (exact - form).abs();
            PairCheck {
                d1: i,
                d2: j,
                influence_exact: exact,
                tfidf_form: form,
                plain_form: plain,
                abs_diff,
                rate: abs_diff / (lambda_damp * grads[i].norm() * grads[j].norm()),
            }
        })
        .collect())
}

/// Per-term `(DF, 1 − (1 − p)^|d|, |d| p)`: the empirical document frequency,
/// its expectation and the rare-term approximation.
pub fn document_frequency_model(corpus: &Corpus, params: &BowParams) -> Vec<(f64, f64, f64)> {
    let w = tfidf_weights(corpus);
    let l = corpus.doc_len() as f64;
    params
        .p
        .iter()
        .zip(w.df.iter())
        .map(|(&p, &df)| (df, 1.0 - (1.0 - p).powf(l), l * p))
        .collect()
}

pub fn write_checks(path: &Path, rows: &[PairCheck]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
