//! Desk-scale diffusion transformer with optional MoE-LoRA sites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::attend;
use super::tokens::PatchGeometry;
use crate::error::{Error, Result};
use crate::moe::{route, MoeConfig, MoeSite, RouteRecord, RoutedSite, RouterDecision, SITE_KINDS};
use crate::numeric::params::uniform_fan_in;
use crate::numeric::{Array, Bound, ParamId, ParamStore, Tape, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    /// Number of content categories (condition vocabulary).
    pub vocab: usize,
    pub ffn_mult: usize,
    pub time_dim: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            width: 64,
            heads: 4,
            patch: 4,
            image_size: 16,
            vocab: 6,
            ffn_mult: 2,
            time_dim: 16,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        PatchGeometry::new(self.image_size, self.patch)?;
        if self.blocks == 0 || self.width == 0 || self.vocab == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time_dim must be a positive even number".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> PatchGeometry {
        PatchGeometry::new(self.image_size, self.patch).expect("validated config")
    }

    /// Fully qualified names of every linear site, in forward order.
    pub fn linear_names(&self) -> Vec<String> {
        (0..self.blocks)
            .flat_map(|b| SITE_KINDS.iter().map(move |k| format!("blocks.{b}.{k}")))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    weight: ParamId,
    bias: ParamId,
}

/// MoE sites attached to a model, one per instrumented linear.
#[derive(Clone, Debug)]
pub struct MoeAttachment {
    pub config: MoeConfig,
    pub embedding_dim: usize,
    pub sites: Vec<MoeSite>,
    /// For each linear (in `linear_names` order), the index into `sites`.
    site_of_linear: Vec<Option<usize>>,
}

/// Inputs of one denoising evaluation.
#[derive(Clone, Debug)]
pub struct DitInput {
    /// `[num_patches, patch_dim]`
    pub noisy: Array,
    /// `[num_patches, patch_dim]`
    pub content: Array,
    pub category: usize,
    pub t: f64,
}

/// Style conditioning for one forward: the embedding node and its label.
#[derive(Clone, Copy, Debug)]
pub struct StyleCondition<'a> {
    pub embedding: Var,
    pub style_id: &'a str,
}

#[derive(Clone, Debug)]
pub struct StyleDit {
    config: DitConfig,
    store: ParamStore,
    patch_embed: LinearIds,
    pos: ParamId,
    type_noisy: ParamId,
    type_content: ParamId,
    cond_table: ParamId,
    time_proj: LinearIds,
    linears: Vec<LinearIds>,
    head: LinearIds,
    moe: Option<MoeAttachment>,
}

impl StyleDit {
    pub fn new(config: DitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let geo = config.geometry();
        let w = config.width;
        let linear = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| -> Result<LinearIds> {
            let weight = store.add(format!("{name}.weight"), uniform_fan_in(&[fan_in, fan_out], fan_in, rng), true)?;
            let bias = store.add(format!("{name}.bias"), Array::zeros(&[1, fan_out]), true)?;
            Ok(LinearIds { weight, bias })
        };
        let patch_embed = linear(&mut store, "patch_embed", geo.patch_dim(), w, &mut rng)?;
        let pos = store.add("pos_embed", uniform_fan_in(&[geo.num_patches(), w], w, &mut rng), true)?;
        let type_noisy = store.add("type.noisy", uniform_fan_in(&[1, w], w, &mut rng), true)?;
        let type_content = store.add("type.content", uniform_fan_in(&[1, w], w, &mut rng), true)?;
        let cond_table = store.add("cond.table", uniform_fan_in(&[config.vocab, w], w, &mut rng), true)?;
        let time_proj = linear(&mut store, "time_proj", config.time_dim, w, &mut rng)?;
        let hidden = w * config.ffn_mult;
        let mut linears = Vec::new();
        for name in config.linear_names() {
            let (fan_in, fan_out) = if name.ends_with("ffn.fc1") {
                (w, hidden)
            } else if name.ends_with("ffn.fc2") {
                (hidden, w)
            } else {
                (w, w)
            };
            linears.push(linear(&mut store, &name, fan_in, fan_out, &mut rng)?);
        }
        let head = linear(&mut store, "head", w, geo.patch_dim(), &mut rng)?;
        Ok(Self {
            config,
            store,
            patch_embed,
            pos,
            type_noisy,
            type_content,
            cond_table,
            time_proj,
            linears,
            head,
            moe: None,
        })
    }

    pub fn config(&self) -> &DitConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn moe(&self) -> Option<&MoeAttachment> {
        self.moe.as_ref()
    }

    /// `(d_in, d_out)` of every linear site in forward order.
    pub fn linear_dims(&self) -> Vec<(String, usize, usize)> {
        self.config
            .linear_names()
            .into_iter()
            .zip(&self.linears)
            .map(|(n, ids)| {
                let s = self.store.get(ids.weight).shape();
                (n, s[0], s[1])
            })
            .collect()
    }

    /// Resolves site kinds and qualified names to linear indices, in forward order.
    pub fn resolve_sites(&self, sites: &[String]) -> Result<Vec<usize>> {
        let names = self.config.linear_names();
        let mut chosen = vec![false; names.len()];
        for s in sites {
            let mut matched = false;
            for (i, n) in names.iter().enumerate() {
                if n == s || n.split_once('.').and_then(|(_, rest)| rest.split_once('.')).map(|(_, kind)| kind) == Some(s.as_str()) {
                    chosen[i] = true;
                    matched = true;
                }
            }
            if !matched {
                return Err(Error::Config(format!("unknown MoE site {s}")));
            }
        }
        Ok((0..names.len()).filter(|&i| chosen[i]).collect())
    }

    /// MoE sites in forward order (the "layers" of routing analyses).
    pub fn moe_layer_names(&self) -> Vec<String> {
        self.moe.as_ref().map(|m| m.sites.iter().map(|s| s.name.clone()).collect()).unwrap_or_default()
    }

    fn input_block(&self, tape: &mut Tape, bound: &Bound, patches: &Array, type_id: ParamId) -> Result<Var> {
        let x = tape.constant(patches.clone());
        let h = tape.matmul(x, bound[self.patch_embed.weight])?;
        let h = tape.add_row(h, bound[self.patch_embed.bias])?;
        let h = tape.add(h, bound[self.pos])?;
        tape.add_row(h, bound[type_id])
    }

    /// Routes every MoE site from one style embedding.
    pub fn route_sites(&self, tape: &mut Tape, bound: &Bound, embedding: Var) -> Result<Vec<RoutedSite>> {
        let moe = self.moe.as_ref().ok_or_else(|| Error::invalid("model has no MoE sites"))?;
        moe.sites
            .iter()
            .map(|s| s.route(tape, bound, embedding, moe.config.top_k))
            .collect()
    }

    /// Routing decision of every MoE site for `e_s`, without a tape.
    pub fn route_embedding(&self, e_s: &[f64]) -> Result<Vec<RouterDecision>> {
        let moe = self.moe.as_ref().ok_or_else(|| Error::invalid("model has no MoE sites"))?;
        moe.sites
            .iter()
            .map(|s| route(e_s, &s.router(&self.store), moe.config.top_k))
            .collect()
    }

    fn linear(&self, tape: &mut Tape, bound: &Bound, index: usize, x: Var, routed: Option<&[RoutedSite]>) -> Result<Var> {
        let ids = self.linears[index];
        let base = tape.matmul(x, bound[ids.weight])?;
        let base = tape.add_row(base, bound[ids.bias])?;
        match (routed, &self.moe) {
            (Some(routed), Some(moe)) => match moe.site_of_linear[index] {
                Some(s) => moe.sites[s].apply(tape, bound, x, base, &routed[s], moe.config.scaling()),
                None => Ok(base),
            },
            _ => Ok(base),
        }
    }

    /// Predicted velocity `[num_patches, patch_dim]` for the noisy block.
    ///
    /// With `style` set and MoE attached, every site is routed from the
    /// style embedding; the decisions are appended to `trace` when given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &DitInput,
        style: Option<StyleCondition<'_>>,
        trace: Option<&mut Vec<RouteRecord>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let geo = cfg.geometry();
        if input.noisy.shape() != [geo.num_patches(), geo.patch_dim()] || input.content.shape() != input.noisy.shape() {
            return Err(Error::Shape {
                op: "dit_forward",
                lhs: input.noisy.shape().to_vec(),
                rhs: vec![geo.num_patches(), geo.patch_dim()],
            });
        }
        if input.category >= cfg.vocab {
            return Err(Error::invalid(format!("category {} outside vocabulary of {}", input.category, cfg.vocab)));
        }
        if !(0.0..=1.0).contains(&input.t) {
            return Err(Error::invalid(format!("timestep {} outside [0, 1]", input.t)));
        }

        let routed = match (style, &self.moe) {
            (Some(cond), Some(_)) => {
                let r = self.route_sites(tape, bound, cond.embedding)?;
                if let Some(trace) = trace {
                    trace.extend(self.trace_records(&r, cond.style_id));
                }
                Some(r)
            }
            _ => None,
        };
        let routed = routed.as_deref();

        let z_t = self.input_block(tape, bound, &input.noisy, self.type_noisy)?;
        let z_c = self.input_block(tape, bound, &input.content, self.type_content)?;
        let cat = tape.gather_rows(bound[self.cond_table], &[input.category])?;
        let time = tape.constant(Array::row(&timestep_features(input.t, cfg.time_dim)));
        let time = tape.matmul(time, bound[self.time_proj.weight])?;
        let time = tape.add_row(time, bound[self.time_proj.bias])?;
        let mut x = tape.concat_rows(&[cat, time, z_t, z_c])?;
        let c_len = 2;
        let n_patch = geo.num_patches();

        for b in 0..cfg.blocks {
            let base = b * SITE_KINDS.len();
            let n = tape.layer_norm_rows(x, LN_EPS)?;
            let q = self.linear(tape, bound, base, n, routed)?;
            let k = self.linear(tape, bound, base + 1, n, routed)?;
            let v = self.linear(tape, bound, base + 2, n, routed)?;
            let (a, _) = attend(tape, q, k, v, cfg.heads)?;
            let o = self.linear(tape, bound, base + 3, a, routed)?;
            x = tape.add(x, o)?;
            let n = tape.layer_norm_rows(x, LN_EPS)?;
            let f = self.linear(tape, bound, base + 4, n, routed)?;
            let f = tape.gelu(f);
            let f = self.linear(tape, bound, base + 5, f, routed)?;
            x = tape.add(x, f)?;
        }
        let x = tape.layer_norm_rows(x, LN_EPS)?;
        let x = tape.slice_rows(x, c_len, c_len + n_patch)?;
        let out = tape.matmul(x, bound[self.head.weight])?;
        tape.add_row(out, bound[self.head.bias])
    }

    pub fn trace_records(&self, routed: &[RoutedSite], style_id: &str) -> Vec<RouteRecord> {
        let names = self.moe_layer_names();
        routed
            .iter()
            .enumerate()
            .map(|(layer, r)| RouteRecord {
                layer,
                site: names[layer].clone(),
                style_id: style_id.to_string(),
                indices: r.decision.indices.clone(),
                weights: r.decision.weights.clone(),
            })
            .collect()
    }

    /// Ids of every MoE parameter (experts, shared experts, routers).
    pub fn moe_param_ids(&self) -> Vec<ParamId> {
        self.moe
            .as_ref()
            .map(|m| m.sites.iter().flat_map(|s| s.param_ids()).collect())
            .unwrap_or_default()
    }
}

/// Instruments `model` with MoE sites; base weights become frozen. An empty
/// site list leaves the forward computation unchanged.
pub fn attach_moe(mut model: StyleDit, cfg: &MoeConfig, embedding_dim: usize, seed: u64) -> Result<StyleDit> {
    cfg.validate()?;
    if model.moe.is_some() {
        return Err(Error::invalid("model already carries MoE sites"));
    }
    if embedding_dim == 0 {
        return Err(Error::Config("embedding_dim must be positive".into()));
    }
    let chosen = model.resolve_sites(&cfg.sites)?;
    model.store.set_all_trainable(false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = model.linear_dims();
    let mut sites = Vec::new();
    let mut site_of_linear = vec![None; dims.len()];
    for &i in &chosen {
        let (name, d_in, d_out) = &dims[i];
        site_of_linear[i] = Some(sites.len());
        sites.push(MoeSite::create(&mut model.store, name, *d_in, *d_out, embedding_dim, cfg, &mut rng)?);
    }
    model.moe = Some(MoeAttachment {
        config: cfg.clone(),
        embedding_dim,
        sites,
        site_of_linear,
    });
    Ok(model)
}

/// Sinusoidal features of `t·1000`: sines then cosines over geometric frequencies.
pub fn timestep_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let scaled = t * 1000.0;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    freqs
        .iter()
        .map(|f| (scaled * f).sin())
        .chain(freqs.iter().map(|f| (scaled * f).cos()))
        .collect()
}
