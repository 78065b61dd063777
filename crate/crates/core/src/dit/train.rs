//! Base pretraining and stage-2 expert training.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flow::{flow_loss_on_tape, gaussian_from, FlowExample};
use super::model::{StyleCondition, StyleDit};
use crate::encoder::StyleEncoder;
use crate::error::{Error, Result};
use crate::moe::RouteRecord;
use crate::numeric::{Array, Optimizer, OptimizerConfig, OptimizerKind, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 4,
            steps: 150,
        }
    }
}

fn check_common(lr: f64, batch_size: usize, what: &str) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("{what} lr must be positive, got {lr}")));
    }
    if batch_size == 0 {
        return Err(Error::Config(format!("{what} batch_size must be positive")));
    }
    Ok(())
}

/// Trains the plain model to reproduce content images from noise with the
/// content as control. Must run before MoE sites are attached.
pub fn pretrain_base(mut model: StyleDit, contents: &[(Array, usize)], cfg: &BaseTrainConfig, seed: u64) -> Result<(StyleDit, Vec<f64>)> {
    check_common(cfg.lr, cfg.batch_size, "base")?;
    if model.moe().is_some() {
        return Err(Error::invalid("base pretraining runs before MoE attachment"));
    }
    if contents.is_empty() && cfg.steps > 0 {
        return Err(Error::invalid("base pretraining needs at least one content image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam, cfg.lr));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let bound = model.store().bind(&mut tape);
        let mut total = None;
        for _ in 0..cfg.batch_size {
            let (patches, category) = &contents[rng.gen_range(0..contents.len())];
            let t: f64 = rng.gen();
            let noise = gaussian_from(patches.shape(), &mut rng);
            let ex = FlowExample {
                target: patches,
                content: patches,
                category: *category,
            };
            let l = flow_loss_on_tape(&model, &mut tape, &bound, &ex, None, &noise, t, None)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let loss = tape.scale(total.expect("batch_size > 0"), 1.0 / cfg.batch_size as f64);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("base loss at step {step}")));
        }
        let grads = tape.backward(loss)?;
        opt.step(model.store_mut(), &bound, &grads);
        losses.push(value);
    }
    if let Some(l) = losses.last() {
        info!("base model pretrained for {} steps, final loss {l:.5}", cfg.steps);
    }
    Ok((model, losses))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Pretrained encoder, weights fixed.
    #[default]
    Frozen,
    /// Encoder weights updated jointly with the experts.
    Trainable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StylizerTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub encoder_mode: EncoderMode,
    /// Iterations per routing-collapse window.
    pub collapse_window: usize,
    /// Share of routing events at one site that trips the collapse warning.
    pub collapse_share: f64,
}

impl Default for StylizerTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 2,
            iterations: 400,
            optimizer: OptimizerKind::Adam,
            encoder_mode: EncoderMode::Frozen,
            collapse_window: 500,
            collapse_share: 0.95,
        }
    }
}

impl StylizerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.lr, self.batch_size, "stage2")?;
        if self.collapse_window == 0 || !(0.0..=1.0).contains(&self.collapse_share) {
            return Err(Error::Config("collapse_window must be positive and collapse_share in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One triplet in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct StylizerExample {
    /// Content patches `z_c`.
    pub content: Array,
    /// Stylized target patches `x₀`.
    pub target: Array,
    /// Surrogate features of the style reference, `[1, feature_width]`.
    pub style_features: Array,
    pub category: usize,
    pub style_id: String,
}

#[derive(Clone, Debug)]
pub struct StylizerRun {
    pub model: StyleDit,
    pub encoder: StyleEncoder,
    /// Flow loss per iteration (without the balance penalty).
    pub losses: Vec<f64>,
    /// Iterations whose loss or gradients were non-finite; their updates were skipped.
    pub divergences: Vec<usize>,
    pub warnings: Vec<String>,
    /// Final routing of each training style (first example of the style).
    pub trace: Vec<RouteRecord>,
}

struct CollapseMonitor {
    window: usize,
    share: f64,
    /// Per site: per expert selection counts, plus routing events.
    counts: Vec<Vec<usize>>,
    events: usize,
}

impl CollapseMonitor {
    fn new(sites: usize, experts: usize, window: usize, share: f64) -> Self {
        Self {
            window,
            share,
            counts: vec![vec![0; experts]; sites],
            events: 0,
        }
    }

    fn record(&mut self, routed: &[RouteRecord]) {
        for (site, r) in routed.iter().enumerate() {
            for &i in &r.indices {
                self.counts[site][i] += 1;
            }
        }
        self.events += 1;
    }

    fn end_iteration(&mut self, iteration: usize, names: &[String], warnings: &mut Vec<String>) {
        if !(iteration + 1).is_multiple_of(self.window) || self.events == 0 {
            return;
        }
        for (site, counts) in self.counts.iter().enumerate() {
            let (expert, top) = counts.iter().enumerate().max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i))).expect("experts");
            let share = *top as f64 / self.events as f64;
            if share > self.share {
                let msg = format!(
                    "routing collapse at {}: expert {expert} chosen in {:.1}% of events over iterations {}..{}",
                    names[site],
                    100.0 * share,
                    iteration + 1 - self.window,
                    iteration + 1
                );
                warn!("{msg}");
                warnings.push(msg);
            }
        }
        for c in &mut self.counts {
            c.iter_mut().for_each(|v| *v = 0);
        }
        self.events = 0;
    }
}

/// Trains the expert and router parameters of `model` on `examples`.
///
/// Base weights stay frozen. With [`EncoderMode::Trainable`] the encoder is
/// updated jointly; otherwise style embeddings are computed once.
pub fn train_stylizer(
    mut model: StyleDit,
    mut encoder: StyleEncoder,
    examples: &[StylizerExample],
    cfg: &StylizerTrainConfig,
    seed: u64,
) -> Result<StylizerRun> {
    cfg.validate()?;
    let moe = model.moe().ok_or_else(|| Error::invalid("stylizer training needs attached MoE sites"))?;
    if moe.embedding_dim != encoder.config().embedding_dim {
        return Err(Error::Config(format!(
            "router expects {}-d embeddings, encoder produces {}",
            moe.embedding_dim,
            encoder.config().embedding_dim
        )));
    }
    if examples.is_empty() && cfg.iterations > 0 {
        return Err(Error::invalid("stylizer training needs at least one triplet"));
    }
    let trainable_encoder = cfg.encoder_mode == EncoderMode::Trainable;
    encoder.store_mut().set_all_trainable(trainable_encoder);
    let frozen_embeddings = if trainable_encoder {
        Vec::new()
    } else {
        embed_all(&encoder, examples)?
    };

    let names = model.moe_layer_names();
    let balance_weight = moe.config.balance_weight;
    let mut monitor = CollapseMonitor::new(names.len(), moe.config.num_experts, cfg.collapse_window, cfg.collapse_share);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(OptimizerConfig::new(cfg.optimizer, cfg.lr));
    let mut enc_opt = Optimizer::new(OptimizerConfig::new(cfg.optimizer, cfg.lr));
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut divergences = Vec::new();
    let mut warnings = Vec::new();

    for it in 0..cfg.iterations {
        let mut tape = Tape::new();
        let bound = model.store().bind(&mut tape);
        let enc_bound = encoder.store().bind(&mut tape);
        let mut total = None;
        let mut site_probs: Vec<Vec<Var>> = vec![Vec::new(); names.len()];
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..examples.len());
            let ex = &examples[idx];
            let t: f64 = rng.gen();
            let noise = gaussian_from(ex.target.shape(), &mut rng);
            let embedding = if trainable_encoder {
                let x = tape.constant(ex.style_features.clone());
                encoder.forward(&mut tape, &enc_bound, x)?
            } else {
                tape.constant(frozen_embeddings[idx].clone())
            };
            let flow = FlowExample {
                target: &ex.target,
                content: &ex.content,
                category: ex.category,
            };
            let style = StyleCondition {
                embedding,
                style_id: &ex.style_id,
            };
            if balance_weight > 0.0 {
                for (site, r) in model.route_sites(&mut tape, &bound, embedding)?.into_iter().enumerate() {
                    let p = tape.softmax_rows(r.logits)?;
                    site_probs[site].push(p);
                }
            }
            let mut routed = Vec::new();
            let l = flow_loss_on_tape(&model, &mut tape, &bound, &flow, Some(style), &noise, t, Some(&mut routed))?;
            monitor.record(&routed);
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let loss = tape.scale(total.expect("batch_size > 0"), 1.0 / cfg.batch_size as f64);
        let value = tape.scalar(loss);
        losses.push(value);
        let loss = if balance_weight > 0.0 {
            let penalty = balance_penalty(&mut tape, &site_probs)?;
            let penalty = tape.scale(penalty, balance_weight);
            tape.add(loss, penalty)?
        } else {
            loss
        };
        let value = tape.scalar(loss);
        let grads = if value.is_finite() { Some(tape.backward(loss)?) } else { None };
        match grads {
            Some(g) if g.all_finite() => {
                opt.step(model.store_mut(), &bound, &g);
                if trainable_encoder {
                    enc_opt.step(encoder.store_mut(), &enc_bound, &g);
                }
            }
            _ => {
                warn!("stylizer diverged at iteration {it} (loss {value}); update skipped");
                divergences.push(it);
            }
        }
        monitor.end_iteration(it, &names, &mut warnings);
        if (it + 1) % 100 == 0 {
            debug!("stylizer iteration {} loss {value:.5}", it + 1);
        }
    }
    if let Some(l) = losses.last() {
        info!("stylizer trained for {} iterations, final loss {l:.5}", cfg.iterations);
    }
    let trace = style_trace(&model, &encoder, examples)?;
    Ok(StylizerRun {
        model,
        encoder,
        losses,
        divergences,
        warnings,
        trace,
    })
}

/// Mean over sites of `N_e · Σ_i p̄_i²`, where `p̄` is the batch-mean router
/// distribution; it equals 1 when routing is uniform.
fn balance_penalty(tape: &mut Tape, site_probs: &[Vec<Var>]) -> Result<Var> {
    let mut total = None;
    for probs in site_probs {
        let n = tape.value(probs[0]).cols() as f64;
        let stacked = tape.concat_rows(probs)?;
        let avg = tape.constant(Array::full(&[1, probs.len()], 1.0 / probs.len() as f64));
        let mean = tape.matmul(avg, stacked)?;
        let sq = tape.mul(mean, mean)?;
        let s = tape.sum(sq);
        let s = tape.scale(s, n);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("no MoE sites to balance"))?;
    Ok(tape.scale(total, 1.0 / site_probs.len() as f64))
}

fn embed_all(encoder: &StyleEncoder, examples: &[StylizerExample]) -> Result<Vec<Array>> {
    examples
        .iter()
        .map(|ex| encoder.embed_matrix(&ex.style_features))
        .collect()
}

fn style_trace(model: &StyleDit, encoder: &StyleEncoder, examples: &[StylizerExample]) -> Result<Vec<RouteRecord>> {
    let mut first: BTreeMap<&str, &StylizerExample> = BTreeMap::new();
    for ex in examples {
        first.entry(ex.style_id.as_str()).or_insert(ex);
    }
    let mut out = Vec::new();
    for (id, ex) in first {
        let e = encoder.embed_matrix(&ex.style_features)?;
        let mut tape = Tape::new();
        let bound = model.store().bind_with(&mut tape, &[]);
        let ev = tape.constant(e);
        let routed = model.route_sites(&mut tape, &bound, ev)?;
        out.extend(model.trace_records(&routed, id));
    }
    Ok(out)
}
