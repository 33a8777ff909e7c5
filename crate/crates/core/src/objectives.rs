//! Training objectives.
//!
//! The alignment loss compares, for each row `i` of a batch, the distribution
//! `p_i` of cosine similarities between `a_i` and every `b_j` against the
//! genuine matching distribution `q_i`:
//!
//! ```text
//! L(a→b) = (1/B) Σ_i Σ_j p_ij · log(p_ij / (q_ij + ε))
//! ```
//!
//! `p_i` is a temperature softmax of the similarity row by default
//! ([`SimilarityForm::Softmax`]). The bidirectional loss adds the `b→a`
//! direction against the row-renormalized transpose of `q`, and the
//! three-way loss mixes the image–text, radiomics–text and image–radiomics
//! pairs with weight `λ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::data::Modality;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("alignment needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid match matrix: {0}")]
    InvalidMatch(String),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("batch size mismatch: {0}")]
    BatchMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, LossError>;

/// How a row of cosine similarities becomes a distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityForm {
    /// `softmax(s / τ)`.
    Softmax,
    /// Each shifted score `(1 + s) / 2` divided by the row total.
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Mixing weight of the three-way alignment loss, in `[0, 1]`.
    pub lambda: f64,
    /// Weight of the alignment loss in the total objective.
    pub alpha: f64,
    /// Similarity temperature.
    pub tau: f64,
    /// Smoothing added to `q` inside the log.
    pub epsilon: f64,
    pub similarity: SimilarityForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            alpha: 1.0,
            tau: 0.02,
            epsilon: 1e-8,
            similarity: SimilarityForm::Softmax,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LossError::InvalidWeights(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda = {} not in [0, 1]", self.lambda));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha = {} must be >= 0", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau = {} must be > 0", self.tau));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon = {} must be > 0", self.epsilon));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Each sample matches only its own counterpart: `q = I`.
    #[default]
    Aligned,
    /// Samples with equal labels match, normalized per row.
    Label,
}

/// Row-stochastic matrix of genuine matching probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    q: Tensor,
}

impl MatchMatrix {
    pub fn new(q: Tensor) -> Result<Self> {
        let s = q.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(LossError::InvalidMatch(format!("shape {s:?} is not square")));
        }
        for i in 0..s[0] {
            let row = q.row(i);
            if row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(LossError::InvalidMatch(format!("row {i} has a negative or non-finite entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(LossError::InvalidMatch(format!("row {i} sums to {total}")));
            }
        }
        Ok(Self { q })
    }

    pub fn aligned(n: usize) -> Self {
        Self { q: Tensor::eye(n) }
    }

    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let n = labels.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let same = labels.iter().filter(|&&l| l == labels[i]).count();
            for j in 0..n {
                if labels[j] == labels[i] {
                    data[i * n + j] = 1.0 / same as f64;
                }
            }
        }
        Self::new(Tensor::new(&[n, n], data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.q
    }

    pub fn n(&self) -> usize {
        self.q.shape()[0]
    }

    /// Transpose with each row renormalized to sum to one.
    pub fn transposed(&self) -> Result<Self> {
        let n = self.n();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.q.data()[i * n + j];
            }
        }
        for j in 0..n {
            let row = &mut data[j * n..(j + 1) * n];
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(LossError::InvalidMatch(format!("column {j} has no match")));
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Self::new(Tensor::new(&[n, n], data)?)
    }
}

pub fn build_match_matrix(labels: &[usize], mode: MatchMode) -> Result<MatchMatrix> {
    if labels.len() < 2 {
        return Err(LossError::BatchTooSmall(labels.len()));
    }
    match mode {
        MatchMode::Aligned => Ok(MatchMatrix::aligned(labels.len())),
        MatchMode::Label => MatchMatrix::from_labels(labels),
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::BatchMismatch(format!(
            "logits {shape:?} for {} labels",
            labels.len()
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let mut one_hot = vec![0.0; b * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(LossError::LabelOutOfRange { label: l, classes: c });
        }
        one_hot[i * c + l] = 1.0;
    }
    let log_p = g.log_softmax(logits, 1)?;
    let mask = g.constant(Tensor::new(&[b, c], one_hot)?);
    let picked = g.mul(log_p, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// `[B × B]` cosine similarities between rows of `a` and rows of `b`.
pub fn similarity_matrix(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "similarity_matrix",
            left: sa,
            right: sb,
        }));
    }
    let an = g.l2_normalize(a, 1)?;
    let bn = g.l2_normalize(b, 1)?;
    let bt = g.t(bn)?;
    Ok(g.matmul(an, bt)?)
}

/// KL divergence of the `a→b` similarity distribution from `q`.
pub fn sdm_directional(g: &mut Graph, a: Var, b: Var, q: &MatchMatrix, w: &LossWeights) -> Result<Var> {
    let n = g.shape(a)[0];
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    if q.n() != n {
        return Err(LossError::InvalidMatch(format!("{}×{} for a batch of {n}", q.n(), q.n())));
    }
    let s = similarity_matrix(g, a, b)?;
    if !g.value(s).all_finite() {
        return Err(LossError::NonFinite("similarity matrix".into()));
    }
    let (p, log_p) = match w.similarity {
        SimilarityForm::Softmax => {
            let logits = g.scale(s, 1.0 / w.tau);
            let log_p = g.log_softmax(logits, 1)?;
            (g.exp(log_p), log_p)
        }
        SimilarityForm::Ratio => {
            let half = g.scale(s, 0.5);
            let shifted = g.add_scalar(half, 0.5);
            let p = g.normalize_sum(shifted, 1)?;
            (p, g.log(p)?)
        }
    };
    let log_q = g.constant(q.tensor().map(|v| (v + w.epsilon).ln()));
    let ratio = g.sub(log_p, log_q)?;
    let terms = g.mul(p, ratio)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// `L(a→b) + L(b→a)`; the reverse direction uses `q`'s row-renormalized
/// transpose.
pub fn sdm_bidirectional(g: &mut Graph, a: Var, b: Var, q: &MatchMatrix, w: &LossWeights) -> Result<Var> {
    let forward = sdm_directional(g, a, b, q, w)?;
    let backward = sdm_directional(g, b, a, &q.transposed()?, w)?;
    Ok(g.add(forward, backward)?)
}

pub struct TmffTerms {
    pub image_text: Var,
    pub radiomics_text: Var,
    pub image_radiomics: Var,
    pub loss: Var,
}

/// `λ·(L_it + L_rt)/2 + (1 − λ)·L_ir` over bidirectional SDM losses.
pub fn tmff_loss(
    g: &mut Graph,
    image: Var,
    radiomics: Var,
    text: Var,
    q: &MatchMatrix,
    w: &LossWeights,
) -> Result<TmffTerms> {
    let image_text = sdm_bidirectional(g, image, text, q, w)?;
    let radiomics_text = sdm_bidirectional(g, radiomics, text, q, w)?;
    let image_radiomics = sdm_bidirectional(g, image, radiomics, q, w)?;
    let pair = g.add(image_text, radiomics_text)?;
    let pair = g.scale(pair, w.lambda / 2.0);
    let cross = g.scale(image_radiomics, 1.0 - w.lambda);
    let loss = g.add(pair, cross)?;
    Ok(TmffTerms {
        image_text,
        radiomics_text,
        image_radiomics,
        loss,
    })
}

/// Alignment loss for whichever modalities are present: the three-way mix
/// for all three, plain bidirectional SDM for a pair, nothing otherwise.
pub fn alignment_loss(
    g: &mut Graph,
    aligned: &[(Modality, Var)],
    q: &MatchMatrix,
    w: &LossWeights,
) -> Result<Option<Var>> {
    let find = |m: Modality| aligned.iter().find(|(x, _)| *x == m).map(|(_, v)| *v);
    match aligned.len() {
        0 | 1 => Ok(None),
        2 => Ok(Some(sdm_bidirectional(g, aligned[0].1, aligned[1].1, q, w)?)),
        _ => {
            let (Some(i), Some(r), Some(t)) = (
                find(Modality::Vision),
                find(Modality::Radiomics),
                find(Modality::Clinical),
            ) else {
                return Err(LossError::BatchMismatch("alignment inputs must cover every modality".into()));
            };
            Ok(Some(tmff_loss(g, i, r, t, q, w)?.loss))
        }
    }
}

pub struct LossTerms {
    pub task: Var,
    pub multi: Option<Var>,
    pub total: Var,
}

/// `CE + α·L_multi`. With `α = 0` the alignment term is still evaluated for
/// reporting but is not attached to `total`, so it contributes no gradient.
pub fn total_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    aligned: &[(Modality, Var)],
    q: &MatchMatrix,
    w: &LossWeights,
) -> Result<LossTerms> {
    w.validate()?;
    for (m, v) in aligned {
        if g.shape(*v)[0] != labels.len() {
            return Err(LossError::BatchMismatch(format!(
                "{m} embeddings have {} rows for {} labels",
                g.shape(*v)[0],
                labels.len()
            )));
        }
    }
    let task = cross_entropy(g, logits, labels)?;
    let multi = alignment_loss(g, aligned, q, w)?;
    let total = match multi {
        Some(m) if w.alpha != 0.0 => {
            let weighted = g.scale(m, w.alpha);
            g.add(task, weighted)?
        }
        _ => task,
    };
    Ok(LossTerms { task, multi, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.leaf(Tensor::new(shape, data.to_vec()).unwrap())
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let logits = var(&mut g, &[2, 2], &[0.0, 0.0, 3.0, 3.0]);
        let ce = cross_entropy(&mut g, logits, &[0, 1]).unwrap();
        assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let logits = var(&mut g, &[2, 2], &[50.0, 0.0, 0.0, 50.0]);
        let ce = cross_entropy(&mut g, logits, &[0, 1]).unwrap();
        assert!(g.value(ce).item().abs() <= 1e-12);

        assert!(matches!(
            cross_entropy(&mut g, logits, &[0, 2]),
            Err(LossError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_one_hot() {
        let mut g = Graph::new();
        let data = [0.2, -1.3, 0.7, 2.0, 0.0, -0.5];
        let logits = var(&mut g, &[3, 2], &data);
        let labels = [1, 0, 1];
        let ce = cross_entropy(&mut g, logits, &labels).unwrap();
        let grads = g.backward(ce).unwrap();
        let grad = grads.get(logits).unwrap();
        for i in 0..3 {
            let (a, b) = (data[2 * i], data[2 * i + 1]);
            let p1 = 1.0 / (1.0 + (a - b).exp());
            let expected = [1.0 - p1 - f64::from(labels[i] == 0), p1 - f64::from(labels[i] == 1)];
            for (c, e) in expected.iter().enumerate() {
                assert!((grad.get(&[i, c]) - e / 3.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn similarity_basics() {
        let mut g = Graph::new();
        let a = var(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let s = similarity_matrix(&mut g, a, a).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0, 0.0, 1.0]);

        let x = var(&mut g, &[2, 3], &[1.0, 2.0, -1.0, 0.5, 0.1, 3.0]);
        let y = var(&mut g, &[2, 3], &[0.3, -2.0, 1.0, 1.5, 0.2, 0.1]);
        let scaled = var(&mut g, &[2, 3], &[7.0, 14.0, -7.0, 0.5, 0.1, 3.0]);
        let s1 = similarity_matrix(&mut g, x, y).unwrap();
        let s2 = similarity_matrix(&mut g, scaled, y).unwrap();
        assert!(g.value(s1).max_abs_diff(g.value(s2)) < 1e-15);
        assert!(g.value(s1).data().iter().all(|v| v.abs() <= 1.0));
        let z = var(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert!(similarity_matrix(&mut g, x, z).is_err());
    }

    #[test]
    fn match_matrices() {
        assert_eq!(build_match_matrix(&[0, 1, 1], MatchMode::Aligned).unwrap().tensor(), &Tensor::eye(3));
        let q = build_match_matrix(&[0, 0, 1], MatchMode::Label).unwrap();
        assert_eq!(q.tensor().row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(q.tensor().row(2), &[0.0, 0.0, 1.0]);
        assert!(build_match_matrix(&[0], MatchMode::Aligned).is_err());
        let bad = Tensor::new(&[2, 2], vec![0.5, 0.4, 0.0, 1.0]).unwrap();
        assert!(MatchMatrix::new(bad).is_err());
        let skew = MatchMatrix::new(Tensor::new(&[2, 2], vec![0.5, 0.5, 0.0, 1.0]).unwrap()).unwrap();
        let t = skew.transposed().unwrap();
        assert_eq!(t.tensor().data(), &[1.0, 0.0, 1.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        for w in [
            LossWeights {
                lambda: 1.5,
                ..Default::default()
            },
            LossWeights {
                tau: 0.0,
                ..Default::default()
            },
            LossWeights {
                alpha: -1.0,
                ..Default::default()
            },
            LossWeights {
                epsilon: 0.0,
                ..Default::default()
            },
        ] {
            assert!(w.validate().is_err());
        }
    }

    #[test]
    fn directional_needs_two_rows() {
        let mut g = Graph::new();
        let a = var(&mut g, &[1, 2], &[1.0, 2.0]);
        let err = sdm_directional(&mut g, a, a, &MatchMatrix::aligned(1), &LossWeights::default());
        assert!(matches!(err, Err(LossError::BatchTooSmall(1))));
    }

    #[test]
    fn ratio_form_is_a_distribution() {
        let mut g = Graph::new();
        let a = var(&mut g, &[3, 2], &[1.0, 0.2, -0.3, 1.0, 0.5, 0.5]);
        let b = var(&mut g, &[3, 2], &[0.1, 1.0, 1.0, 0.0, -1.0, 0.4]);
        let w = LossWeights {
            similarity: SimilarityForm::Ratio,
            ..Default::default()
        };
        let l = sdm_directional(&mut g, a, b, &MatchMatrix::aligned(3), &w).unwrap();
        assert!(g.value(l).item().is_finite());
        assert!(g.value(l).item() >= -1e-6);
    }
}
