//! Style-routed mixture of LoRA experts attached to a linear site.
//!
//! A site computes `h' = l(h) + (α/r)·(B_s A_s + Σ_i w_i B_i A_i)·h`, where the
//! weights come from a top-k softmax over the router logits `g(e_s)` and
//! are zero for experts outside the top k. Token rows are processed as
//! row vectors, so the correction is applied as `h·Aᵀ·Bᵀ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::array::softmax_in_place;
use crate::numeric::params::uniform_fan_in;
use crate::numeric::tape::gelu;
use crate::numeric::{Array, Bound, ParamId, ParamStore, Tape, Var};

/// Site kinds available in every transformer block.
pub const SITE_KINDS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.out", "ffn.fc1", "ffn.fc2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Site kinds (applied to every block) or fully qualified site names.
    pub sites: Vec<String>,
    /// Width of an optional GELU hidden layer in each router; 0 keeps it affine.
    pub router_hidden: usize,
    /// Weight of the optional load-balancing penalty; 0 disables it.
    pub balance_weight: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 16,
            top_k: 2,
            rank: 8,
            alpha: 8.0,
            sites: SITE_KINDS.iter().map(|s| s.to_string()).collect(),
            router_hidden: 0,
            balance_weight: 0.0,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= k <= num_experts, got k={} with {} experts",
                self.top_k, self.num_experts
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.balance_weight >= 0.0) || !self.balance_weight.is_finite() {
            return Err(Error::Config(format!("balance_weight must be non-negative, got {}", self.balance_weight)));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// The selected experts and their mixing weights, in selection order.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl RouterDecision {
    /// Weight of every expert, zero for the unselected ones.
    pub fn dense(&self, num_experts: usize) -> Vec<f64> {
        let mut w = vec![0.0; num_experts];
        for (&i, &v) in self.indices.iter().zip(&self.weights) {
            w[i] = v;
        }
        w
    }
}

/// Indices of the k largest values; ties go to the lower index, and -0 ties with +0.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    // Adding +0 turns -0 into +0 so total_cmp sees them as equal.
    let key = |i: usize| logits[i] + 0.0;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Top-k selection followed by a softmax over the surviving logits.
pub fn route_logits(logits: &[f64], k: usize) -> Result<RouterDecision> {
    if k == 0 || k > logits.len() {
        return Err(Error::invalid(format!("cannot select top {k} of {} experts", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("router logits".into()));
    }
    let indices = top_k_indices(logits, k);
    let mut weights: Vec<f64> = indices.iter().map(|&i| logits[i]).collect();
    softmax_in_place(&mut weights);
    Ok(RouterDecision { indices, weights })
}

/// Router `g(e) = x·W + b` with `x = e`, or `x = gelu(e·W₁ + b₁)` when a
/// hidden layer is present. `W: [input, N_e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub hidden: Option<(Array, Array)>,
    pub weight: Array,
    pub bias: Array,
}

impl Router {
    pub fn num_experts(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, e_s: &[f64]) -> Result<Vec<f64>> {
        match &self.hidden {
            Some((w1, b1)) => {
                let h: Vec<f64> = affine(e_s, w1, b1)?.into_iter().map(gelu).collect();
                affine(&h, &self.weight, &self.bias)
            }
            None => affine(e_s, &self.weight, &self.bias),
        }
    }
}

fn affine(x: &[f64], weight: &Array, bias: &Array) -> Result<Vec<f64>> {
    if x.len() != weight.rows() {
        return Err(Error::Shape {
            op: "router",
            lhs: vec![x.len()],
            rhs: weight.shape().to_vec(),
        });
    }
    let mut out = bias.data().to_vec();
    for (i, &v) in x.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(weight.row_slice(i)) {
            *o += v * w;
        }
    }
    Ok(out)
}

pub fn route(e_s: &[f64], router: &Router, k: usize) -> Result<RouterDecision> {
    if e_s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("style embedding".into()));
    }
    route_logits(&router.logits(e_s)?, k)
}

/// One low-rank update `B·A` with `A: [r, d_in]`, `B: [d_out, r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraExpert {
    pub a: Array,
    pub b: Array,
}

impl LoraExpert {
    fn check(&self, d_in: usize, d_out: usize, rank: usize) -> Result<()> {
        if self.a.shape() != [rank, d_in] || self.b.shape() != [d_out, rank] {
            return Err(Error::Shape {
                op: "lora_expert",
                lhs: self.a.shape().to_vec(),
                rhs: self.b.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `h·Aᵀ·Bᵀ` for token rows `h: [T, d_in]`.
    fn apply(&self, h: &Array) -> Result<Array> {
        h.matmul(&self.a.transpose()?)?.matmul(&self.b.transpose()?)
    }
}

/// Array-level forward of one site for token rows `h: [T, d_in]`.
pub fn moe_forward(
    h: &Array,
    base_out: &Array,
    decision: &RouterDecision,
    experts: &[LoraExpert],
    shared: &LoraExpert,
    alpha: f64,
    rank: usize,
) -> Result<Array> {
    let (d_in, d_out) = (h.cols(), base_out.cols());
    if h.rows() != base_out.rows() {
        return Err(Error::Shape {
            op: "moe_forward",
            lhs: h.shape().to_vec(),
            rhs: base_out.shape().to_vec(),
        });
    }
    shared.check(d_in, d_out, rank)?;
    for e in experts {
        e.check(d_in, d_out, rank)?;
    }
    if decision.indices.len() != decision.weights.len() || decision.indices.iter().any(|&i| i >= experts.len()) {
        return Err(Error::invalid("router decision does not match the expert list"));
    }
    let mut correction = shared.apply(h)?;
    for (&i, &w) in decision.indices.iter().zip(&decision.weights) {
        correction = correction.add(&experts[i].apply(h)?.scale(w))?;
    }
    base_out.add(&correction.scale(alpha / rank as f64))
}

/// Parameter ids of one expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertIds {
    pub a: ParamId,
    pub b: ParamId,
}

/// Routed LoRA experts, a shared expert and a router for one linear site.
#[derive(Clone, Debug)]
pub struct MoeSite {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub experts: Vec<ExpertIds>,
    pub shared: ExpertIds,
    pub router_hidden: Option<(ParamId, ParamId)>,
    pub router_weight: ParamId,
    pub router_bias: ParamId,
}

/// Routing of one site for one style embedding.
#[derive(Clone, Debug)]
pub struct RoutedSite {
    pub decision: RouterDecision,
    /// `[1, k]` weights on the tape, in decision order.
    pub weights: Var,
    /// `[1, N_e]` logits on the tape.
    pub logits: Var,
}

impl MoeSite {
    /// Adds trainable parameters for a site. `A` ~ U(±1/√d_in), `B` = 0, router
    /// weights ~ U(±1/√fan_in), router bias = 0.
    pub fn create(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        embedding_dim: usize,
        cfg: &MoeConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        fn expert(store: &mut ParamStore, name: String, r: usize, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<ExpertIds> {
            let a = store.add(format!("{name}.A"), uniform_fan_in(&[r, d_in], d_in, rng), true)?;
            let b = store.add(format!("{name}.B"), Array::zeros(&[d_out, r]), true)?;
            Ok(ExpertIds { a, b })
        }
        let r = cfg.rank;
        let experts = (0..cfg.num_experts)
            .map(|i| expert(store, format!("{name}.expert{i}"), r, d_in, d_out, rng))
            .collect::<Result<Vec<_>>>()?;
        let shared = expert(store, format!("{name}.shared"), r, d_in, d_out, rng)?;
        let router_hidden = match cfg.router_hidden {
            0 => None,
            h => Some((
                store.add(format!("{name}.router.hidden.weight"), uniform_fan_in(&[embedding_dim, h], embedding_dim, rng), true)?,
                store.add(format!("{name}.router.hidden.bias"), uniform_fan_in(&[1, h], embedding_dim, rng), true)?,
            )),
        };
        let router_in = if cfg.router_hidden > 0 { cfg.router_hidden } else { embedding_dim };
        let router_weight = store.add(
            format!("{name}.router.weight"),
            uniform_fan_in(&[router_in, cfg.num_experts], router_in, rng),
            true,
        )?;
        let router_bias = store.add(
            format!("{name}.router.bias"),
            Array::zeros(&[1, cfg.num_experts]),
            true,
        )?;
        Ok(Self {
            name: name.to_string(),
            d_in,
            d_out,
            experts,
            shared,
            router_hidden,
            router_weight,
            router_bias,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.experts.iter().flat_map(|e| [e.a, e.b]).collect();
        ids.extend([self.shared.a, self.shared.b]);
        if let Some((w, b)) = self.router_hidden {
            ids.extend([w, b]);
        }
        ids.extend([self.router_weight, self.router_bias]);
        ids
    }

    pub fn router(&self, store: &ParamStore) -> Router {
        Router {
            hidden: self.router_hidden.map(|(w, b)| (store.get(w).clone(), store.get(b).clone())),
            weight: store.get(self.router_weight).clone(),
            bias: store.get(self.router_bias).clone(),
        }
    }

    /// Router logits on the tape, top-k selection on their values, and a
    /// softmax over the survivors. Non-selected experts receive no gradient.
    pub fn route(&self, tape: &mut Tape, bound: &Bound, e_s: Var, k: usize) -> Result<RoutedSite> {
        let x = match self.router_hidden {
            Some((w, b)) => {
                let h = tape.matmul(e_s, bound[w])?;
                let h = tape.add_row(h, bound[b])?;
                tape.gelu(h)
            }
            None => e_s,
        };
        let logits = tape.matmul(x, bound[self.router_weight])?;
        let logits = tape.add_row(logits, bound[self.router_bias])?;
        let decision = route_logits(tape.value(logits).data(), k)?;
        let picked = tape.gather_cols(logits, &decision.indices)?;
        let weights = tape.softmax_rows(picked)?;
        let decision = RouterDecision {
            indices: decision.indices,
            weights: tape.value(weights).data().to_vec(),
        };
        Ok(RoutedSite { decision, weights, logits })
    }

    fn expert_delta(tape: &mut Tape, bound: &Bound, ids: ExpertIds, h: Var) -> Result<Var> {
        let at = tape.transpose(bound[ids.a])?;
        let bt = tape.transpose(bound[ids.b])?;
        let low = tape.matmul(h, at)?;
        tape.matmul(low, bt)
    }

    /// `base_out + (α/r)(h·A_sᵀB_sᵀ + Σ_j w_j h·A_jᵀB_jᵀ)` over the selected experts.
    pub fn apply(&self, tape: &mut Tape, bound: &Bound, h: Var, base_out: Var, routed: &RoutedSite, scaling: f64) -> Result<Var> {
        let mut correction = Self::expert_delta(tape, bound, self.shared, h)?;
        for (j, &i) in routed.decision.indices.iter().enumerate() {
            let delta = Self::expert_delta(tape, bound, self.experts[i], h)?;
            let w = tape.slice_cols(routed.weights, j, j + 1)?;
            let weighted = tape.scale_by(delta, w)?;
            correction = tape.add(correction, weighted)?;
        }
        let correction = tape.scale(correction, scaling);
        tape.add(base_out, correction)
    }
}

/// Trainable parameters added by experts, shared experts and routers over
/// sites given as `(d_in, d_out)`.
pub fn expert_param_count(cfg: &MoeConfig, sites: &[(usize, usize)], embedding_dim: usize) -> usize {
    sites
        .iter()
        .map(|&(d_in, d_out)| {
            let lora = cfg.rank * (d_in + d_out);
            let router = match cfg.router_hidden {
                0 => embedding_dim * cfg.num_experts + cfg.num_experts,
                h => embedding_dim * h + h + h * cfg.num_experts + cfg.num_experts,
            };
            cfg.num_experts * lora + lora + router
        })
        .sum()
}

/// Parameters of a single rank-r LoRA over the same sites.
pub fn single_lora_param_count(rank: usize, sites: &[(usize, usize)]) -> usize {
    sites.iter().map(|&(d_in, d_out)| rank * (d_in + d_out)).sum()
}

/// One routing event, written as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub layer: usize,
    pub site: String,
    pub style_id: String,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}
