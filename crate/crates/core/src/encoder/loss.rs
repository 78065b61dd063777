//! Temperature-scaled cosine logits and the masked InfoNCE objective.

use crate::error::{Error, Result};
use crate::numeric::array::log_softmax_in_place;
use crate::numeric::{Array, Tape, Var};

/// Embeddings of one batch together with their style labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub embeddings: Array,
    pub labels: Vec<String>,
}

impl LabeledBatch {
    pub fn new(embeddings: Array, labels: Vec<String>) -> Result<Self> {
        if embeddings.shape().len() != 2 || embeddings.rows() != labels.len() || labels.is_empty() {
            return Err(Error::invalid(format!(
                "batch of {:?} embeddings with {} labels",
                embeddings.shape(),
                labels.len()
            )));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |t, x| t + x * x).sqrt()
}

/// (a·b) / (τ‖a‖‖b‖).
pub fn scaled_cosine(a: &[f64], b: &[f64], tau: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "scaled_cosine",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(Error::Collapsed(format!("embedding norms {na:e}, {nb:e}")));
    }
    let dot = a.iter().zip(b).fold(0.0, |t, (x, y)| t + x * y);
    Ok(dot / (tau * na * nb))
}

/// Plain cosine similarity; see [`scaled_cosine`].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    scaled_cosine(a, b, 1.0)
}

/// Row-wise log-softmax of a similarity matrix.
pub fn log_probabilities(similarities: &Array) -> Array {
    let mut out = similarities.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        log_softmax_in_place(row);
    }
    out
}

/// ℓ_ij = log softmax_j d(e_i, e'_j).
pub fn logits_matrix(e: &Array, e_prime: &Array, tau: f64) -> Result<Array> {
    if e.shape().len() != 2 || e_prime.shape().len() != 2 || e.shape() != e_prime.shape() {
        return Err(Error::Shape {
            op: "logits_matrix",
            lhs: e.shape().to_vec(),
            rhs: e_prime.shape().to_vec(),
        });
    }
    let b = e.rows();
    let mut d = Array::zeros(&[b, b]);
    for i in 0..b {
        for j in 0..b {
            d.set(i, j, scaled_cosine(e.row_slice(i), e_prime.row_slice(j), tau)?);
        }
    }
    Ok(log_probabilities(&d))
}

/// M_ij = 1 iff labels[i] == labels'[j].
pub fn positive_mask<L: PartialEq>(labels: &[L], labels_prime: &[L]) -> Array {
    let mut m = Array::zeros(&[labels.len().max(1), labels_prime.len().max(1)]);
    for (i, a) in labels.iter().enumerate() {
        for (j, b) in labels_prime.iter().enumerate() {
            if a == b {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfoNceOutcome {
    pub loss: f64,
    /// Rows with no positive, left out of the batch average.
    pub skipped_rows: usize,
}

/// Constant weights W with loss = −Σ W ⊙ ℓ: row i gets M_ij / (Σ_j M_ij · valid rows).
fn loss_weights(mask: &Array) -> Result<(Array, usize)> {
    let (rows, cols) = (mask.rows(), mask.cols());
    let row_sums: Vec<f64> = (0..rows).map(|r| mask.row_slice(r).iter().sum()).collect();
    let valid = row_sums.iter().filter(|s| **s > 0.0).count();
    if valid == 0 {
        return Err(Error::DegenerateBatch("no row has a positive pair".into()));
    }
    let mut w = Array::zeros(&[rows, cols]);
    for r in 0..rows {
        if row_sums[r] == 0.0 {
            continue;
        }
        for c in 0..cols {
            w.set(r, c, mask.get(r, c) / (row_sums[r] * valid as f64));
        }
    }
    Ok((w, rows - valid))
}

/// Masked InfoNCE: mean over rows with at least one positive of
/// −(Σ_j M_ij ℓ_ij) / (Σ_j M_ij).
pub fn infonce_loss(logits: &Array, mask: &Array) -> Result<InfoNceOutcome> {
    if logits.shape() != mask.shape() {
        return Err(Error::Shape {
            op: "infonce_loss",
            lhs: logits.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    if mask.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::invalid("mask must be binary"));
    }
    let (w, skipped_rows) = loss_weights(mask)?;
    let loss = -w.data().iter().zip(logits.data()).fold(0.0, |t, (a, b)| t + a * b);
    if !loss.is_finite() {
        return Err(Error::NonFinite("infonce loss".into()));
    }
    Ok(InfoNceOutcome { loss, skipped_rows })
}

/// Differentiable InfoNCE between two embedding batches held on `tape`.
pub fn infonce_on_tape(tape: &mut Tape, e: Var, e_prime: Var, mask: &Array, tau: f64) -> Result<(Var, usize)> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let (rows, cols) = (tape.value(e).rows(), tape.value(e_prime).rows());
    if mask.shape() != [rows, cols] {
        return Err(Error::Shape {
            op: "infonce_on_tape",
            lhs: vec![rows, cols],
            rhs: mask.shape().to_vec(),
        });
    }
    let a = tape.normalize_rows(e)?;
    let b = tape.normalize_rows(e_prime)?;
    let bt = tape.transpose(b)?;
    let cos = tape.matmul(a, bt)?;
    let d = tape.scale(cos, 1.0 / tau);
    let logits = tape.log_softmax_rows(d)?;
    let (w, skipped) = loss_weights(mask)?;
    let w = tape.constant(w);
    let weighted = tape.mul(logits, w)?;
    let total = tape.sum(weighted);
    Ok((tape.scale(total, -1.0), skipped))
}
