//! Nearest-neighbour style retrieval over held-out images.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::reference::cosine_similarity;
use crate::data::LoadedTriplet;
use crate::encoder::StyleEncoder;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Leave-one-out top-1 accuracy.
    pub accuracy: f64,
    pub same_style_cosine: f64,
    pub cross_style_cosine: f64,
    /// `same_style_cosine − cross_style_cosine`.
    pub margin: f64,
    pub images: usize,
    pub styles: usize,
    /// Styles left out for having fewer than two images.
    pub excluded_styles: Vec<String>,
}

/// Each image queries all other eligible images; a hit is a nearest
/// neighbour (cosine, lowest index on ties) with the same label.
pub fn retrieval_report(embeddings: &[Vec<f64>], labels: &[String]) -> Result<RetrievalReport> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid(format!("{} embeddings with {} labels", embeddings.len(), labels.len())));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    let excluded_styles: Vec<String> = counts.iter().filter(|(_, &n)| n < 2).map(|(l, _)| l.to_string()).collect();
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| counts[labels[i].as_str()] >= 2).collect();
    let styles = counts.values().filter(|&&n| n >= 2).count();
    if styles < 2 {
        return Err(Error::invalid("retrieval needs at least two styles with two images each"));
    }
    let n = keep.len();
    let mut cos = vec![0.0; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let c = cosine_similarity(&embeddings[keep[a]], &embeddings[keep[b]]);
            cos[a * n + b] = c;
            cos[b * n + a] = c;
        }
    }
    let mut hits = 0;
    let (mut same, mut same_n, mut cross, mut cross_n) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..n {
        let mut best: Option<usize> = None;
        for b in 0..n {
            if b != a && best.is_none_or(|k| cos[a * n + b] > cos[a * n + k]) {
                best = Some(b);
            }
        }
        if let Some(b) = best {
            if labels[keep[a]] == labels[keep[b]] {
                hits += 1;
            }
        }
        for b in a + 1..n {
            if labels[keep[a]] == labels[keep[b]] {
                same += cos[a * n + b];
                same_n += 1;
            } else {
                cross += cos[a * n + b];
                cross_n += 1;
            }
        }
    }
    let same = same / same_n as f64;
    let cross = cross / cross_n as f64;
    Ok(RetrievalReport {
        accuracy: hits as f64 / n as f64,
        same_style_cosine: same,
        cross_style_cosine: cross,
        margin: same - cross,
        images: n,
        styles,
        excluded_styles,
    })
}

/// Retrieval over the stylized images of `triplets` embedded by `encoder`.
pub fn encoder_retrieval(encoder: &StyleEncoder, triplets: &[LoadedTriplet]) -> Result<RetrievalReport> {
    let images: Vec<_> = triplets.iter().map(|t| t.stylized.clone()).collect();
    let emb: Vec<Vec<f64>> = encoder.embed_images(&images)?.into_iter().map(|e| e.0).collect();
    let labels: Vec<String> = triplets.iter().map(|t| t.record.style_id.clone()).collect();
    retrieval_report(&emb, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_oracle_is_perfect() {
        let labels: Vec<String> = ["a", "a", "b", "b", "c", "c", "d"].iter().map(|s| s.to_string()).collect();
        let emb: Vec<Vec<f64>> = labels
            .iter()
            .map(|l| {
                let k = (l.as_bytes()[0] - b'a') as usize;
                (0..4).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
            })
            .collect();
        let r = retrieval_report(&emb, &labels).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.margin, 1.0);
        assert_eq!(r.images, 6);
        assert_eq!(r.excluded_styles, vec!["d"]);
    }

    #[test]
    fn single_style_rejected() {
        let labels = vec!["a".to_string(), "a".to_string()];
        assert!(retrieval_report(&[vec![1.0], vec![2.0]], &labels).is_err());
    }
}
