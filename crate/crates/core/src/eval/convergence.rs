//! Stage-2 convergence with a frozen pretrained encoder versus a randomly
//! initialized trainable one.

use serde::{Deserialize, Serialize};

use crate::data::derive_seed;
use crate::dit::{attach_moe, train_stylizer, EncoderMode, StyleDit, StylizerExample, StylizerRun, StylizerTrainConfig};
use crate::encoder::StyleEncoder;
use crate::error::{Error, Result};
use crate::moe::MoeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    /// One loss curve per seed.
    pub curves: Vec<Vec<f64>>,
    /// Divergence events per seed.
    pub divergences: Vec<usize>,
    /// Routing-collapse warnings per seed.
    pub collapse_warnings: Vec<usize>,
}

impl ArmResult {
    pub fn total_divergences(&self) -> usize {
        self.divergences.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianAt {
    pub iteration: usize,
    pub frozen: Option<f64>,
    pub random: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub seeds: Vec<u64>,
    /// Trailing iterations averaged into each reported loss.
    pub window: usize,
    pub frozen: ArmResult,
    pub random: ArmResult,
    pub medians: Vec<MedianAt>,
}

/// Mean loss over the `window` iterations ending at `iteration` (1-based),
/// or `None` if the curve is shorter.
pub fn loss_at(curve: &[f64], iteration: usize, window: usize) -> Option<f64> {
    if iteration == 0 || iteration > curve.len() {
        return None;
    }
    let w = window.clamp(1, iteration);
    let s = &curve[iteration - w..iteration];
    Some(s.iter().sum::<f64>() / w as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// One stage-2 run: MoE attached to `base` with a seed-derived init, then
/// trained with `encoder` in `mode`.
pub fn run_arm(
    base: &StyleDit,
    moe: &MoeConfig,
    encoder: StyleEncoder,
    mode: EncoderMode,
    examples: &[StylizerExample],
    cfg: &StylizerTrainConfig,
    seed: u64,
) -> Result<StylizerRun> {
    let model = attach_moe(base.clone(), moe, encoder.config().embedding_dim, derive_seed(seed, &[1]))?;
    let cfg = StylizerTrainConfig {
        encoder_mode: mode,
        ..cfg.clone()
    };
    train_stylizer(model, encoder, examples, &cfg, derive_seed(seed, &[2]))
}

/// Both arms share the base model, MoE init, data order and noise for each
/// seed; only the encoder differs.
#[allow(clippy::too_many_arguments)]
pub fn convergence_ab(
    base: &StyleDit,
    moe: &MoeConfig,
    pretrained: &StyleEncoder,
    examples: &[StylizerExample],
    cfg: &StylizerTrainConfig,
    seeds: &[u64],
    checkpoints: &[usize],
    window: usize,
) -> Result<ConvergenceReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("convergence comparison needs at least one seed"));
    }
    let mut frozen = ArmResult {
        name: "frozen_pretrained".into(),
        curves: vec![],
        divergences: vec![],
        collapse_warnings: vec![],
    };
    let mut random = ArmResult {
        name: "random_trainable".into(),
        curves: vec![],
        divergences: vec![],
        collapse_warnings: vec![],
    };
    for &seed in seeds {
        let a = run_arm(base, moe, pretrained.clone(), EncoderMode::Frozen, examples, cfg, seed)?;
        let fresh = StyleEncoder::new(pretrained.config().clone(), derive_seed(seed, &[3]))?;
        let b = run_arm(base, moe, fresh, EncoderMode::Trainable, examples, cfg, seed)?;
        for (arm, run) in [(&mut frozen, a), (&mut random, b)] {
            arm.divergences.push(run.divergences.len());
            arm.collapse_warnings.push(run.warnings.len());
            arm.curves.push(run.losses);
        }
    }
    let at = |arm: &ArmResult, it: usize| {
        let v: Vec<f64> = arm.curves.iter().filter_map(|c| loss_at(c, it, window)).collect();
        if v.len() == arm.curves.len() {
            median(&v)
        } else {
            None
        }
    };
    let medians = checkpoints
        .iter()
        .map(|&it| MedianAt {
            iteration: it,
            frozen: at(&frozen, it),
            random: at(&random, it),
        })
        .collect();
    Ok(ConvergenceReport {
        seeds: seeds.to_vec(),
        window,
        frozen,
        random,
        medians,
    })
}
