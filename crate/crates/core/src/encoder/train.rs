//! Contrastive training of the style encoder on paired, stratified batches.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{extract_features, feature_matrix, ExtractorSpec};
use super::loss::{cosine, infonce_on_tape, positive_mask};
use super::model::StyleEncoder;
use crate::error::{Error, Result};
use crate::numeric::{Array, Optimizer, OptimizerConfig, OptimizerKind, Tape};
use crate::raster::Raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    /// Run the collapse check every this many steps (and after the last one).
    pub collapse_check_every: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            steps: 600,
            optimizer: OptimizerKind::Adam,
            collapse_check_every: 100,
        }
    }
}

impl EncoderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("stage1 lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("stage1 batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.collapse_check_every == 0 {
            return Err(Error::Config("collapse_check_every must be positive".into()));
        }
        Ok(())
    }
}

/// Feature rows with one style label each.
#[derive(Clone, Debug)]
pub struct LabeledCorpus {
    pub features: Array,
    pub labels: Vec<String>,
}

impl LabeledCorpus {
    pub fn from_images(images: &[Raster], labels: Vec<String>, spec: &ExtractorSpec) -> Result<Self> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::invalid(format!("{} images with {} labels", images.len(), labels.len())));
        }
        let stacks = images.iter().map(|im| extract_features(im, spec)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features: feature_matrix(&stacks)?,
            labels,
        })
    }

    /// Row indices per label, in first-seen label order and ascending rows.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.labels.iter().enumerate() {
            if !by.contains_key(l.as_str()) {
                order.push(l.clone());
            }
            by.entry(l.as_str()).or_default().push(i);
        }
        order
            .into_iter()
            .map(|l| {
                let rows = by.remove(l.as_str()).unwrap_or_default();
                (l, rows)
            })
            .collect()
    }

    fn rows(&self, idx: &[usize]) -> Array {
        let w = self.features.cols();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.features.row_slice(i));
        }
        Array::new(vec![idx.len(), w], data).expect("finite features")
    }
}

#[derive(Clone, Debug)]
pub struct TrainedEncoder {
    pub encoder: StyleEncoder,
    pub losses: Vec<f64>,
    /// Rows that had no positive across all steps.
    pub skipped_rows: usize,
}

/// Draws paired batches: slot i of both batches holds two distinct images of
/// the same style, so every row has at least one positive.
pub struct StratifiedSampler {
    groups: Vec<(String, Vec<usize>)>,
    rng: ChaCha8Rng,
}

impl StratifiedSampler {
    pub fn new(corpus: &LabeledCorpus, seed: u64) -> Result<Self> {
        let groups: Vec<_> = corpus.groups().into_iter().filter(|(_, rows)| rows.len() >= 2).collect();
        if groups.len() < 2 {
            return Err(Error::invalid("training needs at least 2 styles with at least 2 images each"));
        }
        Ok(Self {
            groups,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self, batch: usize) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        let (mut left, mut right) = (Vec::with_capacity(batch), Vec::with_capacity(batch));
        while left.len() < batch {
            order.shuffle(&mut self.rng);
            for &g in &order {
                if left.len() == batch {
                    break;
                }
                let pair: Vec<usize> = self.groups[g].1.choose_multiple(&mut self.rng, 2).copied().collect();
                left.push(pair[0]);
                right.push(pair[1]);
            }
        }
        (left, right)
    }
}

fn check_collapse(encoder: &StyleEncoder, corpus: &LabeledCorpus) -> Result<()> {
    let reps: Vec<usize> = corpus.groups().iter().map(|(_, rows)| rows[0]).collect();
    if reps.len() < 2 {
        return Ok(());
    }
    let e = encoder.embed_matrix(&corpus.rows(&reps))?;
    let mut min_cos = f64::INFINITY;
    for i in 0..reps.len() {
        for j in i + 1..reps.len() {
            min_cos = min_cos.min(cosine(e.row_slice(i), e.row_slice(j))?);
        }
    }
    if min_cos > 0.999 {
        return Err(Error::Collapsed(format!(
            "all cross-style cosines exceed 0.999 (minimum {min_cos:.6})"
        )));
    }
    Ok(())
}

/// Trains Φ in place; `steps == 0` leaves the initialization untouched.
pub fn train_encoder(mut encoder: StyleEncoder, corpus: &LabeledCorpus, cfg: &EncoderTrainConfig, seed: u64) -> Result<TrainedEncoder> {
    cfg.validate()?;
    let mut sampler = StratifiedSampler::new(corpus, seed)?;
    let mut opt = Optimizer::new(OptimizerConfig::new(cfg.optimizer, cfg.lr));
    let tau = encoder.config().tau;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut skipped_rows = 0;
    for step in 0..cfg.steps {
        let (left, right) = sampler.sample(cfg.batch_size);
        let labels_l: Vec<&str> = left.iter().map(|&i| corpus.labels[i].as_str()).collect();
        let labels_r: Vec<&str> = right.iter().map(|&i| corpus.labels[i].as_str()).collect();
        let mask = positive_mask(&labels_l, &labels_r);

        let mut tape = Tape::new();
        let bound = encoder.store().bind(&mut tape);
        let xl = tape.constant(corpus.rows(&left));
        let xr = tape.constant(corpus.rows(&right));
        let el = encoder.forward(&mut tape, &bound, xl)?;
        let er = encoder.forward(&mut tape, &bound, xr)?;
        let (loss, skipped) = infonce_on_tape(&mut tape, el, er, &mask, tau)?;
        skipped_rows += skipped;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("encoder loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        opt.step(encoder.store_mut(), &bound, &grads);
        losses.push(value);
        if (step + 1) % cfg.collapse_check_every == 0 || step + 1 == cfg.steps {
            check_collapse(&encoder, corpus)?;
            debug!("encoder step {} loss {value:.5}", step + 1);
        }
    }
    if let Some(last) = losses.last() {
        info!("encoder trained for {} steps, final loss {last:.5}", cfg.steps);
    }
    Ok(TrainedEncoder {
        encoder,
        losses,
        skipped_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::model::EncoderConfig;

    fn corpus() -> LabeledCorpus {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..6u8 {
            images.push(Raster::filled(16, 16, [200, 20 + i * 5, 20]));
            labels.push("red".to_string());
            images.push(Raster::filled(16, 16, [20, 20 + i * 5, 200]));
            labels.push("blue".to_string());
        }
        LabeledCorpus::from_images(&images, labels, &ExtractorSpec::default()).unwrap()
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let enc = StyleEncoder::new(EncoderConfig::default(), 1).unwrap();
        let cfg = EncoderTrainConfig {
            steps: 0,
            ..EncoderTrainConfig::default()
        };
        let out = train_encoder(enc.clone(), &corpus(), &cfg, 5).unwrap();
        assert_eq!(out.encoder.store(), enc.store());
        assert!(out.losses.is_empty());
    }

    #[test]
    fn sampler_pairs_share_labels() {
        let c = corpus();
        let mut s = StratifiedSampler::new(&c, 3).unwrap();
        let (l, r) = s.sample(7);
        assert_eq!(l.len(), 7);
        for (a, b) in l.iter().zip(&r) {
            assert_ne!(a, b);
            assert_eq!(c.labels[*a], c.labels[*b]);
        }
    }

    #[test]
    fn single_style_rejected() {
        let images = vec![Raster::filled(16, 16, [1, 2, 3]); 3];
        let c = LabeledCorpus::from_images(&images, vec!["a".into(); 3], &ExtractorSpec::default()).unwrap();
        assert!(StratifiedSampler::new(&c, 0).is_err());
    }

    #[test]
    fn paper_scale_hyperparameters_validate() {
        let cfg = EncoderTrainConfig {
            lr: 1e-5,
            batch_size: 128,
            steps: 3500,
            optimizer: OptimizerKind::AdaBelief,
            collapse_check_every: 100,
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = EncoderTrainConfig {
            steps: 5,
            batch_size: 4,
            ..EncoderTrainConfig::default()
        };
        let run = || {
            let enc = StyleEncoder::new(EncoderConfig::default(), 2).unwrap();
            train_encoder(enc, &corpus(), &cfg, 9).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.encoder.store(), b.encoder.store());
    }
}
