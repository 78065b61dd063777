//! The operations behind each CLI subcommand. Every function takes the
//! resolved [`RunConfig`] and writes its artifacts to the given paths.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{base_checkpoint, encoder_checkpoint, load_dit, load_encoder, stylizer_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::judge::{FilterOutcome, Judge, MockFilterJudge, RemoteJudge};
use crate::data::pipeline::MANIFEST_FILE;
use crate::data::{curate, gen_data, load_triplets, LoadedTriplet, Split};
use crate::dit::{attach_moe, pretrain_base, sample, train_stylizer, StyleDit, StylizerExample, DEFAULT_SAMPLER_STEPS};
use crate::encoder::{train_encoder, ExtractorSpec, LabeledCorpus, StyleEncoder};
use crate::error::{Error, Result};
use crate::eval::{convergence_ab, encoder_retrieval, render_iou_table, score_pairs, staged_iou_report, write_records, MockSemanticJudge};
use crate::raster::Raster;

/// `mock` or `remote:URL`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum JudgeChoice {
    Mock,
    Remote(String),
}

impl std::str::FromStr for JudgeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(JudgeChoice::Mock),
            _ => match s.strip_prefix("remote:") {
                Some(url) if !url.is_empty() => Ok(JudgeChoice::Remote(url.to_string())),
                _ => Err(Error::Config(format!("judge must be `mock` or `remote:URL`, got {s:?}"))),
            },
        }
    }
}

fn remote_judge(url: &str, cfg: &RunConfig) -> RemoteJudge {
    let mut j = RemoteJudge::new(url);
    j.timeout = Duration::from_secs(cfg.judge.timeout_secs);
    j.retries = cfg.judge.retries;
    j
}

fn log_resolved(cfg: &RunConfig, seed: u64) -> Result<serde_json::Value> {
    let v = serde_json::to_value(cfg)?;
    info!("resolved config (seed {seed}): {v}");
    Ok(v)
}

fn with_run_config(mut ckpt: Checkpoint, cfg: &serde_json::Value) -> Checkpoint {
    ckpt.meta.run_config = Some(cfg.clone());
    ckpt
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

#[derive(Serialize)]
struct LossRecord {
    iteration: usize,
    loss: f64,
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let records: Vec<LossRecord> = losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRecord { iteration: i + 1, loss })
        .collect();
    write_records(path, &records)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

/// Returns the manifest path.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, seed: u64, encoder: Option<&Path>) -> Result<PathBuf> {
    log_resolved(cfg, seed)?;
    let enc = encoder.map(|p| Checkpoint::load(p).and_then(|c| load_encoder(&c))).transpose()?;
    gen_data(&cfg.data, out, seed, enc.as_ref())?;
    Ok(out.join(MANIFEST_FILE))
}

pub fn cmd_curate(cfg: &RunConfig, manifest: &Path, judge: &JudgeChoice) -> Result<(FilterOutcome, PathBuf)> {
    log_resolved(cfg, cfg.seed)?;
    match judge {
        JudgeChoice::Mock => {
            let j = MockFilterJudge {
                min_iou: cfg.judge.min_iou,
                max_style_distance: cfg.judge.max_style_distance,
            };
            curate(manifest, &j, cfg.judge.max_in_flight)
        }
        JudgeChoice::Remote(url) => curate(manifest, &remote_judge(url, cfg), cfg.judge.max_in_flight),
    }
}

/// Stylized images of `triplets` labelled by style.
pub fn style_corpus(triplets: &[LoadedTriplet], spec: &ExtractorSpec) -> Result<LabeledCorpus> {
    let images: Vec<Raster> = triplets.iter().map(|t| t.stylized.clone()).collect();
    let labels = triplets.iter().map(|t| t.record.style_id.clone()).collect();
    LabeledCorpus::from_images(&images, labels, spec)
}

/// Trains Φ on the training split; `steps` overrides the config.
pub fn cmd_train_encoder(cfg: &RunConfig, manifest: &Path, out: &Path, seed: u64, steps: Option<usize>) -> Result<StyleEncoder> {
    let mut cfg = cfg.clone();
    if let Some(s) = steps {
        cfg.stage1.steps = s;
    }
    let resolved = log_resolved(&cfg, seed)?;
    let train = load_triplets(manifest, Some(Split::Train))?;
    let corpus = style_corpus(&train, &cfg.encoder.extractor)?;
    let init = StyleEncoder::new(cfg.encoder.clone(), seed)?;
    let run = train_encoder(init, &corpus, &cfg.stage1, seed)?;
    ensure_parent(out)?;
    with_run_config(encoder_checkpoint(&run.encoder, seed, cfg.stage1.steps as u64), &resolved).save(out)?;
    write_losses(&sibling(out, ".losses.jsonl"), &run.losses)?;
    Ok(run.encoder)
}

/// Distinct content scenes of `triplets` as base-pretraining examples.
pub fn content_examples(triplets: &[LoadedTriplet], model: &StyleDit) -> Result<Vec<(crate::numeric::Array, usize)>> {
    let geo = model.config().geometry();
    let mut seen = BTreeSet::new();
    triplets
        .iter()
        .filter(|t| seen.insert(t.record.content_index))
        .map(|t| Ok((geo.raster_to_patches(&t.content)?, t.record.category)))
        .collect()
}

pub fn stylizer_examples(triplets: &[LoadedTriplet], model: &StyleDit) -> Result<Vec<StylizerExample>> {
    let geo = model.config().geometry();
    triplets.iter().map(|t| t.to_stylizer_example(&geo)).collect()
}

/// Base model pretrained on the content scenes of the training split.
pub fn pretrained_base(cfg: &RunConfig, train: &[LoadedTriplet], seed: u64) -> Result<StyleDit> {
    let model = StyleDit::new(cfg.dit.clone(), crate::data::derive_seed(seed, &[100]))?;
    let contents = content_examples(train, &model)?;
    let (model, _) = pretrain_base(model, &contents, &cfg.base, crate::data::derive_seed(seed, &[101]))?;
    Ok(model)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StylizerSummary {
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub divergences: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Pretrains the base model (or loads `base`), attaches MoE sites and
/// trains them with the encoder from `encoder`.
pub fn cmd_train_stylizer(
    cfg: &RunConfig,
    manifest: &Path,
    encoder: &Path,
    out: &Path,
    seed: u64,
    iterations: Option<usize>,
    base: Option<&Path>,
) -> Result<StylizerSummary> {
    let mut cfg = cfg.clone();
    if let Some(n) = iterations {
        cfg.stage2.iterations = n;
    }
    let resolved = log_resolved(&cfg, seed)?;
    let enc = load_encoder(&Checkpoint::load(encoder)?)?;
    let train = load_triplets(manifest, Some(Split::Train))?;
    let base_model = match base {
        Some(p) => load_dit(&Checkpoint::load(p)?)?,
        None => {
            let m = pretrained_base(&cfg, &train, seed)?;
            ensure_parent(out)?;
            with_run_config(base_checkpoint(&m, seed, cfg.base.steps as u64)?, &resolved).save(&sibling(out, ".base.sxpt"))?;
            m
        }
    };
    let examples = stylizer_examples(&train, &base_model)?;
    let model = attach_moe(base_model, &cfg.moe, enc.config().embedding_dim, crate::data::derive_seed(seed, &[102]))?;
    let run = train_stylizer(model, enc, &examples, &cfg.stage2, crate::data::derive_seed(seed, &[103]))?;
    ensure_parent(out)?;
    with_run_config(stylizer_checkpoint(&run.model, &run.encoder, seed, cfg.stage2.iterations as u64)?, &resolved).save(out)?;
    write_losses(&sibling(out, ".losses.jsonl"), &run.losses)?;
    write_records(&sibling(out, ".routes.jsonl"), &run.trace)?;
    Ok(StylizerSummary {
        iterations: cfg.stage2.iterations,
        final_loss: run.losses.last().copied(),
        divergences: run.divergences,
        warnings: run.warnings,
    })
}

/// Samples one stylization of `content` in the style of `style`.
pub fn stylize_image(model: &StyleDit, encoder: &StyleEncoder, content: &Raster, style: &Raster, category: usize, steps: usize, seed: u64) -> Result<Raster> {
    let geo = model.config().geometry();
    let z_c = geo.raster_to_patches(content)?;
    let e_s = encoder.embed_image(style)?.as_row();
    let (x, _) = sample(model, &z_c, category, Some((&e_s, "reference")), steps, seed)?;
    geo.patches_to_raster(&x.map(|v| v.clamp(-1.0, 1.0)))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_stylize(model: &Path, content: &Path, style: &Path, category: usize, out: &Path, steps: Option<usize>, seed: u64) -> Result<()> {
    let ckpt = Checkpoint::load(model)?;
    let dit = load_dit(&ckpt)?;
    let enc = load_encoder(&ckpt)?;
    let img = stylize_image(
        &dit,
        &enc,
        &Raster::load_png(content)?,
        &Raster::load_png(style)?,
        category,
        steps.unwrap_or(DEFAULT_SAMPLER_STEPS),
        seed,
    )?;
    ensure_parent(out)?;
    img.save_png(out)
}

fn split_filter(split: Option<&str>) -> Result<Option<Split>> {
    match split {
        None | Some("all") => Ok(None),
        Some("train") => Ok(Some(Split::Train)),
        Some("test") => Ok(Some(Split::Test)),
        Some(s) => Err(Error::Config(format!("split must be all, train or test, got {s:?}"))),
    }
}

/// Writes `<out>/iou_report.txt` and `<out>/iou_report.jsonl`.
pub fn cmd_eval_iou(cfg: &RunConfig, model: &Path, manifest: &Path, samples: usize, out: &Path, seed: u64, split: Option<&str>) -> Result<crate::eval::IouReport> {
    log_resolved(cfg, seed)?;
    let ckpt = Checkpoint::load(model)?;
    let dit = load_dit(&ckpt)?;
    let enc = load_encoder(&ckpt)?;
    let triplets = load_triplets(manifest, split_filter(split)?)?;
    let report = staged_iou_report(&dit, &enc, &triplets, samples, seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("iou_report.txt"), render_iou_table(&report))?;
    write_records(&out.join("iou_report.jsonl"), std::slice::from_ref(&report))?;
    Ok(report)
}

/// Retrieval over the test split by default; writes a one-record JSON Lines file.
pub fn cmd_eval_retrieval(encoder: &Path, manifest: &Path, out: &Path, split: Option<&str>) -> Result<crate::eval::RetrievalReport> {
    let enc = load_encoder(&Checkpoint::load(encoder)?)?;
    let triplets = load_triplets(manifest, split_filter(split.or(Some("test")))?)?;
    let report = encoder_retrieval(&enc, &triplets)?;
    ensure_parent(out)?;
    write_records(out, std::slice::from_ref(&report))?;
    Ok(report)
}

/// Stylizes up to `limit` test triplets with their references and scores
/// each output against the reference.
pub fn cmd_eval_semantic(cfg: &RunConfig, model: &Path, manifest: &Path, judge: &JudgeChoice, limit: usize, out: &Path, seed: u64) -> Result<crate::eval::SemanticScoreReport> {
    log_resolved(cfg, seed)?;
    let ckpt = Checkpoint::load(model)?;
    let dit = load_dit(&ckpt)?;
    let enc = load_encoder(&ckpt)?;
    let triplets = load_triplets(manifest, Some(Split::Test))?;
    let pairs = triplets
        .iter()
        .take(limit)
        .enumerate()
        .map(|(i, t)| {
            let s = crate::data::derive_seed(seed, &[i as u64]);
            Ok((t.style.clone(), stylize_image(&dit, &enc, &t.content, &t.style, t.record.category, DEFAULT_SAMPLER_STEPS, s)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = match judge {
        JudgeChoice::Mock => {
            let mut j = MockSemanticJudge::new(enc);
            j.max_distance = cfg.eval.semantic_max_distance;
            score_pairs(&pairs, &j as &dyn Judge)
        }
        JudgeChoice::Remote(url) => score_pairs(&pairs, &remote_judge(url, cfg)),
    };
    ensure_parent(out)?;
    write_records(out, std::slice::from_ref(&report))?;
    Ok(report)
}

pub fn cmd_ablate_convergence(
    cfg: &RunConfig,
    manifest: &Path,
    encoder: &Path,
    out: &Path,
    seed: u64,
    iterations: Option<usize>,
) -> Result<crate::eval::ConvergenceReport> {
    let mut cfg = cfg.clone();
    if let Some(n) = iterations {
        cfg.stage2.iterations = n;
    }
    log_resolved(&cfg, seed)?;
    let enc = load_encoder(&Checkpoint::load(encoder)?)?;
    let train = load_triplets(manifest, Some(Split::Train))?;
    let base = pretrained_base(&cfg, &train, seed)?;
    let examples = stylizer_examples(&train, &base)?;
    let report = convergence_ab(
        &base,
        &cfg.moe,
        &enc,
        &examples,
        &cfg.stage2,
        &cfg.eval.ablation_seeds,
        &cfg.eval.checkpoints,
        cfg.eval.loss_window,
    )?;
    ensure_parent(out)?;
    write_records(out, std::slice::from_ref(&report))?;
    Ok(report)
}

/// Machine-readable failure record printed by the CLI.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub error: String,
    pub message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        Self {
            error: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}
