//! Gradient-check fixtures shared by the integration and acceptance suites.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylemoe::dit::flow::{flow_loss_on_tape, gaussian};
use stylemoe::dit::{attach_moe, DitConfig, FlowExample, StyleCondition, StyleDit};
use stylemoe::encoder::loss::infonce_on_tape;
use stylemoe::encoder::{positive_mask, EncoderConfig, ExtractorSpec, StyleEncoder};
use stylemoe::moe::{moe_forward, route, route_logits, LoraExpert, MoeConfig, MoeSite, Router};
use stylemoe::numeric::{grad_check, Array, GradCheckReport, ParamStore};

pub fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// InfoNCE over Φ(x) and Φ(x′) for a B=4 batch, checked against every Φ parameter.
pub fn infonce_phi_check(seed: u64, eps: f64) -> GradCheckReport {
    let cfg = EncoderConfig {
        input_width: 6,
        hidden_dims: vec![5],
        embedding_dim: 4,
        tau: 0.1,
        extractor: ExtractorSpec::default(),
    };
    let encoder = StyleEncoder::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = random(&mut rng, &[4, 6], 1.0);
    let xp = random(&mut rng, &[4, 6], 1.0);
    let mask = positive_mask(&["a", "b", "a", "c"], &["b", "a", "a", "d"]);
    let ids: Vec<_> = encoder.store().ids().collect();
    let params: Vec<Array> = ids.iter().map(|&id| encoder.store().get(id).clone()).collect();
    grad_check(
        |tape, vars| {
            let overrides: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
            let bound = encoder.store().bind_with(tape, &overrides);
            let xv = tape.constant(x.clone());
            let xpv = tape.constant(xp.clone());
            let e = encoder.forward(tape, &bound, xv)?;
            let ep = encoder.forward(tape, &bound, xpv)?;
            Ok(infonce_on_tape(tape, e, ep, &mask, cfg.tau)?.0)
        },
        &params,
        eps,
    )
    .unwrap()
}

/// A weighted sum of one MoE site's output, checked against experts, the
/// shared expert and the router.
pub fn moe_site_check(seed: u64, eps: f64) -> GradCheckReport {
    let cfg = MoeConfig {
        num_experts: 5,
        top_k: 2,
        rank: 2,
        alpha: 3.0,
        ..MoeConfig::default()
    };
    let (d_in, d_out, emb) = (3, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let site = MoeSite::create(&mut store, "s", d_in, d_out, emb, &cfg, &mut rng).unwrap();
    for e in site.experts.iter().chain([&site.shared]) {
        *store.get_mut(e.b) = random(&mut rng, &[d_out, cfg.rank], 1.0);
    }
    *store.get_mut(site.router_bias) = random(&mut rng, &[1, cfg.num_experts], 1.0);
    let e_s = random(&mut rng, &[1, emb], 1.0);
    let h = random(&mut rng, &[3, d_in], 1.0);
    let base = random(&mut rng, &[3, d_out], 1.0);
    let coef = random(&mut rng, &[3, d_out], 1.0);
    let ids = site.param_ids();
    let params: Vec<Array> = ids.iter().map(|&id| store.get(id).clone()).collect();
    grad_check(
        |tape, vars| {
            let overrides: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
            let bound = store.bind_with(tape, &overrides);
            let ev = tape.constant(e_s.clone());
            let routed = site.route(tape, &bound, ev, cfg.top_k)?;
            let hv = tape.constant(h.clone());
            let bv = tape.constant(base.clone());
            let out = site.apply(tape, &bound, hv, bv, &routed, cfg.scaling())?;
            let c = tape.constant(coef.clone());
            let weighted = tape.mul(out, c)?;
            Ok(tape.mean(weighted))
        },
        &params,
        eps,
    )
    .unwrap()
}

/// Rectified-flow loss of a small DiT with attached MoE sites, checked against
/// every MoE parameter. MoE values are drawn from U(±1) so the adapters carry
/// an O(1) share of the loss; at ε = 1e-6 the difference quotient has ~1e-10
/// of absolute roundoff, which swamps gradients much smaller than that.
pub fn flow_moe_check(seed: u64, eps: f64) -> GradCheckReport {
    let cfg = DitConfig {
        blocks: 1,
        width: 4,
        heads: 1,
        patch: 2,
        image_size: 4,
        vocab: 3,
        ffn_mult: 1,
        time_dim: 4,
    };
    let moe = MoeConfig {
        num_experts: 4,
        top_k: 2,
        rank: 2,
        alpha: 2.0,
        ..MoeConfig::default()
    };
    let mut model = attach_moe(StyleDit::new(cfg.clone(), seed).unwrap(), &moe, 5, seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    for id in model.moe_param_ids() {
        let shape = model.store().get(id).shape().to_vec();
        *model.store_mut().get_mut(id) = random(&mut rng, &shape, 1.0);
    }
    let g = cfg.geometry();
    let target = random(&mut rng, &[g.num_patches(), g.patch_dim()], 1.0);
    let content = random(&mut rng, &[g.num_patches(), g.patch_dim()], 1.0);
    let e = random(&mut rng, &[1, 5], 1.0);
    let noise = gaussian(target.shape(), seed);
    let ids = model.moe_param_ids();
    let params: Vec<Array> = ids.iter().map(|&id| model.store().get(id).clone()).collect();
    grad_check(
        |tape, vars| {
            let overrides: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
            let bound = model.store().bind_with(tape, &overrides);
            let ex = FlowExample {
                target: &target,
                content: &content,
                category: 1,
            };
            let style = StyleCondition {
                embedding: tape.constant(e.clone()),
                style_id: "s",
            };
            flow_loss_on_tape(&model, tape, &bound, &ex, Some(style), &noise, 0.6, None)
        },
        &params,
        eps,
    )
    .unwrap()
}

/// Indices of the k largest values by exhaustive rank counting; ties rank the
/// lower index first.
pub fn brute_force_top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let rank = |i: usize| {
        (0..logits.len())
            .filter(|&j| logits[j] > logits[i] || (logits[j] == logits[i] && j < i))
            .count()
    };
    let mut picked: Vec<(usize, usize)> = (0..logits.len()).map(|i| (rank(i), i)).filter(|(r, _)| *r < k).collect();
    picked.sort();
    picked.into_iter().map(|(_, i)| i).collect()
}

fn random_router(rng: &mut impl Rng, emb: usize, n: usize, integer: bool) -> Router {
    let mut weight = random(rng, &[emb, n], 1.0);
    let mut bias = random(rng, &[1, n], 1.0);
    if integer {
        // Small integers make exact ties common.
        for v in weight.data_mut().iter_mut().chain(bias.data_mut().iter_mut()) {
            *v = (*v * 2.0).round();
        }
    }
    Router { hidden: None, weight, bias }
}

fn random_expert(rng: &mut impl Rng, d_in: usize, d_out: usize, r: usize) -> LoraExpert {
    LoraExpert {
        a: random(rng, &[r, d_in], 1.0),
        b: random(rng, &[d_out, r], 1.0),
    }
}

/// One randomized routing trial; returns a description of every violated
/// property.
pub fn routing_trial(rng: &mut impl Rng) -> Vec<String> {
    let mut bad = Vec::new();
    let n = rng.gen_range(1..=12);
    let k = rng.gen_range(1..=n);
    let emb = rng.gen_range(1..=6);
    let integer = rng.gen_bool(0.5);
    let router = random_router(rng, emb, n, integer);
    let e_s: Vec<f64> = if integer {
        (0..emb).map(|_| rng.gen_range(-2i32..=2) as f64).collect()
    } else {
        (0..emb).map(|_| rng.gen_range(-2.0..2.0)).collect()
    };
    let logits = router.logits(&e_s).unwrap();
    let d = route(&e_s, &router, k).unwrap();

    let sum: f64 = d.weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        bad.push(format!("weights sum to {sum}"));
    }
    if d.weights.iter().any(|w| !(*w > 0.0)) {
        bad.push(format!("non-positive weight in {:?}", d.weights));
    }
    let mut distinct = d.indices.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if d.indices.len() != k || distinct.len() != k {
        bad.push(format!("indices {:?} are not {k} distinct experts", d.indices));
    }
    let oracle = brute_force_top_k(&logits, k);
    let mut chosen = d.indices.clone();
    chosen.sort_unstable();
    let mut want = oracle.clone();
    want.sort_unstable();
    if chosen != want {
        bad.push(format!("selected {:?}, brute force {:?} for logits {logits:?}", d.indices, oracle));
    }

    // The offset goes on the logits themselves; folding it into the bias
    // would regroup the sum and break exact ties through rounding.
    let c = if integer { rng.gen_range(-50i32..=50) as f64 } else { rng.gen_range(-50.0..50.0) };
    let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
    let ds = route_logits(&shifted, k).unwrap();
    let max_dw = d.weights.iter().zip(&ds.weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if ds.indices != d.indices || max_dw > 1e-12 {
        bad.push(format!("offset {c} changed the decision: {:?} vs {:?}", d, ds));
    }

    // Equivariance is checked on continuous logits; with exact ties the
    // lowest-index rule is deliberately order dependent.
    if !integer {
        let (d_in, d_out, r) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=3));
        let experts: Vec<LoraExpert> = (0..n).map(|_| random_expert(rng, d_in, d_out, r)).collect();
        let shared = random_expert(rng, d_in, d_out, r);
        let h = random(rng, &[2, d_in], 1.0);
        let base = random(rng, &[2, d_out], 1.0);
        let alpha = rng.gen_range(0.5..4.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let pw = Array::new(
            vec![emb, n],
            (0..emb).flat_map(|row| perm.iter().map(move |&p| (row, p))).map(|(row, p)| router.weight.get(row, p)).collect(),
        )
        .unwrap();
        let pb = Array::row(&perm.iter().map(|&p| router.bias.get(0, p)).collect::<Vec<_>>());
        let permuted = Router { hidden: None, weight: pw, bias: pb };
        let dp = route(&e_s, &permuted, k).unwrap();
        let mapped: Vec<usize> = dp.indices.iter().map(|&j| perm[j]).collect();
        let max_dw = d.weights.iter().zip(&dp.weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if mapped != d.indices || max_dw > 1e-12 {
            bad.push(format!("permutation {perm:?} maps {:?} to {:?}", d.indices, dp.indices));
        }
        let pexperts: Vec<LoraExpert> = perm.iter().map(|&p| experts[p].clone()).collect();
        let out = moe_forward(&h, &base, &d, &experts, &shared, alpha, r).unwrap();
        let pout = moe_forward(&h, &base, &dp, &pexperts, &shared, alpha, r).unwrap();
        let diff = out.max_abs_diff(&pout);
        if diff > 1e-12 {
            bad.push(format!("moe_forward changed by {diff:e} under expert permutation"));
        }
    }
    bad
}

/// Trainable element count of MoE sites built in a fresh store.
pub fn enumerate_moe_params(cfg: &MoeConfig, sites: &[(usize, usize)], emb: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, &(d_in, d_out)) in sites.iter().enumerate() {
        MoeSite::create(&mut store, &format!("site{i}"), d_in, d_out, emb, cfg, &mut rng).unwrap();
    }
    store.ids().filter(|&id| store.is_trainable(id)).map(|id| store.get(id).len()).sum()
}

/// Re-derives every style reference of a generated manifest with an
/// exhaustive similarity table over each style set's stylized images and
/// returns (sets checked, mismatches).
pub fn reference_oracle(manifest_path: &std::path::Path) -> (usize, Vec<String>) {
    use stylemoe::data::Manifest;
    use stylemoe::encoder::extract_features;
    use stylemoe::raster::Raster;
    let manifest = Manifest::load(manifest_path).unwrap();
    let base = manifest_path.parent().unwrap();
    let mut mismatches = Vec::new();
    let styles: Vec<String> = manifest.style_ids().into_iter().map(String::from).collect();
    for style in &styles {
        let mut records: Vec<_> = manifest.records.iter().filter(|r| &r.style_id == style).collect();
        records.sort_by_key(|r| r.content_index);
        let feats: Vec<Vec<f64>> = records
            .iter()
            .map(|r| {
                let img = Raster::load_png(&base.join(&r.stylized_path)).unwrap();
                extract_features(&img, &ExtractorSpec { size: img.width() }).unwrap().concat()
            })
            .collect();
        let n = feats.len();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na <= 1e-12 || nb <= 1e-12 {
                0.0
            } else {
                dot / (na * nb)
            }
        };
        let table: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cos(&feats[i], &feats[j])).collect()).collect();
        for i in 0..n {
            let best = (0..n)
                .filter(|&j| j != i)
                .fold(None, |acc: Option<usize>, j| match acc {
                    Some(b) if table[i][b] >= table[i][j] => Some(b),
                    _ => Some(j),
                })
                .unwrap();
            let want = &records[best].stylized_path;
            if &records[i].style_path != want {
                mismatches.push(format!("{}: {} vs oracle {}", records[i].id, records[i].style_path, want));
            }
        }
    }
    (styles.len(), mismatches)
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn tree_bytes(dir: &std::path::Path) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Judge responses with the score the prefix rule assigns: 1 iff the text
/// starts with the exact bytes `YES`.
pub const CANNED_RESPONSES: [(&str, u8); 20] = [
    ("YES", 1),
    ("YES.", 1),
    ("YES: both images use cross-hatched strokes.", 1),
    ("YES, the texture and line quality match.", 1),
    ("YES\nThe rendering is the same.", 1),
    ("YESSS absolutely", 1),
    ("YES - same halftone dots", 1),
    ("NO", 0),
    ("NO: only the palette matches.", 0),
    ("NO. Different brushwork.", 0),
    ("no", 0),
    ("yes", 0),
    ("Yes, they match.", 0),
    (" YES with a leading space", 0),
    ("", 0),
    ("The answer is YES.", 0),
    ("NO, although one might say YES", 0),
    ("**YES**", 0),
    ("NOT SURE", 0),
    ("Y E S", 0),
];
