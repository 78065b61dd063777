//! Expert-overlap analysis: do similar styles share experts?

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::reference::cosine_similarity;
use crate::data::LoadedTriplet;
use crate::dit::StyleDit;
use crate::encoder::StyleEncoder;
use crate::error::{Error, Result};

/// `|a ∩ b| / |a ∪ b|` over expert index sets.
pub fn expert_overlap_iou(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("expert sets must be nonempty"));
    }
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    Ok(a.intersection(&b).count() as f64 / a.union(&b).count() as f64)
}

/// Indices of the most and least similar pool members to the anchor. Ties
/// go to the lowest index on both sides.
pub fn pick_similar_dissimilar<T>(anchor: &T, pool: &[T], sim: impl Fn(&T, &T) -> f64) -> Result<(usize, usize)> {
    if pool.len() < 2 {
        return Err(Error::invalid(format!("comparison pool needs at least 2 members, got {}", pool.len())));
    }
    let s: Vec<f64> = pool.iter().map(|p| sim(anchor, p)).collect();
    if s.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("pool similarity".into()));
    }
    let mut hi = 0;
    let mut lo = 0;
    for (i, &v) in s.iter().enumerate().skip(1) {
        if v > s[hi] {
            hi = i;
        }
        if v < s[lo] {
            lo = i;
        }
    }
    Ok((hi, lo))
}

/// Early, mid and late index ranges over `n` layers; sizes differ by at
/// most one and earlier stages take the extra layers.
pub fn stage_partition(n: usize) -> [Range<usize>; 3] {
    let base = n / 3;
    let extra = n % 3;
    let a = base + usize::from(extra > 0);
    let b = a + base + usize::from(extra > 1);
    [0..a, a..b, b..n]
}

pub const STAGE_NAMES: [&str; 3] = ["early", "mid", "late"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMean {
    pub stage: String,
    pub layers: Vec<usize>,
    /// `None` for a stage with no layers.
    pub similar: Option<f64>,
    pub dissimilar: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub layers: Vec<String>,
    pub per_layer_similar: Vec<f64>,
    pub per_layer_dissimilar: Vec<f64>,
    pub stages: Vec<StageMean>,
    pub overall_similar: f64,
    pub overall_dissimilar: f64,
    pub samples: usize,
    pub skipped: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Assembles the report from per-layer means.
pub fn summarize(layers: Vec<String>, sim: Vec<f64>, dissim: Vec<f64>, samples: usize, skipped: usize) -> IouReport {
    let stages = stage_partition(layers.len())
        .into_iter()
        .zip(STAGE_NAMES)
        .map(|(r, name)| StageMean {
            stage: name.to_string(),
            layers: r.clone().collect(),
            similar: mean(&sim[r.clone()]),
            dissimilar: mean(&dissim[r]),
        })
        .collect();
    IouReport {
        overall_similar: mean(&sim).unwrap_or(0.0),
        overall_dissimilar: mean(&dissim).unwrap_or(0.0),
        layers,
        per_layer_similar: sim,
        per_layer_dissimilar: dissim,
        stages,
        samples,
        skipped,
    }
}

/// Samples `samples` anchors uniformly over the stylized images. For each,
/// the pool is every image with the same content and another style; the
/// most and least similar pool members (encoder cosine) are routed next to
/// the anchor and per-layer expert IoUs are averaged. Anchors without a
/// pool of two are skipped and counted.
pub fn staged_iou_report(model: &StyleDit, encoder: &StyleEncoder, triplets: &[LoadedTriplet], samples: usize, seed: u64) -> Result<IouReport> {
    let layers = model.moe_layer_names();
    if layers.is_empty() {
        return Err(Error::invalid("routing analysis needs a model with MoE sites"));
    }
    if triplets.is_empty() {
        return Err(Error::invalid("routing analysis needs at least one triplet"));
    }
    let embeddings: Vec<Vec<f64>> = encoder
        .embed_images(&triplets.iter().map(|t| t.stylized.clone()).collect::<Vec<_>>())?
        .into_iter()
        .map(|e| e.0)
        .collect();
    let mut by_content: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in triplets.iter().enumerate() {
        by_content.entry(t.record.content_index).or_default().push(i);
    }
    let mut routes = BTreeMap::new();
    let mut experts = |i: usize| -> Result<Vec<Vec<usize>>> {
        if let Some(r) = routes.get(&i) {
            return Ok(Clone::clone(r));
        }
        let r: Vec<Vec<usize>> = model.route_embedding(&embeddings[i])?.into_iter().map(|d| d.indices).collect();
        routes.insert(i, r.clone());
        Ok(r)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum_sim = vec![0.0; layers.len()];
    let mut sum_dis = vec![0.0; layers.len()];
    let mut used = 0;
    let mut skipped = 0;
    for _ in 0..samples {
        let a = rng.gen_range(0..triplets.len());
        let pool: Vec<usize> = by_content[&triplets[a].record.content_index]
            .iter()
            .copied()
            .filter(|&j| triplets[j].record.style_id != triplets[a].record.style_id)
            .collect();
        if pool.len() < 2 {
            skipped += 1;
            continue;
        }
        let (hi, lo) = pick_similar_dissimilar(&a, &pool, |&x, &y| cosine_similarity(&embeddings[x], &embeddings[y]))?;
        let ea = experts(a)?;
        let es = experts(pool[hi])?;
        let ed = experts(pool[lo])?;
        for l in 0..layers.len() {
            sum_sim[l] += expert_overlap_iou(&ea[l], &es[l])?;
            sum_dis[l] += expert_overlap_iou(&ea[l], &ed[l])?;
        }
        used += 1;
    }
    let n = used.max(1) as f64;
    Ok(summarize(
        layers,
        sum_sim.iter().map(|s| s / n).collect(),
        sum_dis.iter().map(|s| s / n).collect(),
        used,
        skipped,
    ))
}
