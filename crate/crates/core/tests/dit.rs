use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylemoe::dit::flow::{flow_loss_on_tape, gaussian};
use stylemoe::dit::{
    assemble_tokens, attach_moe, flow_loss, mm_attention, mm_attention_with_weights, sample, train_stylizer, AttentionBlock,
    DitConfig, DitInput, FlowExample, FlowState, StyleCondition, StyleDit, StylizerExample, StylizerTrainConfig,
};
use stylemoe::encoder::{EncoderConfig, StyleEncoder};
use stylemoe::moe::MoeConfig;
use stylemoe::numeric::{grad_check, Array, ParamId, Tape};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn tiny_config() -> DitConfig {
    DitConfig {
        blocks: 1,
        width: 8,
        heads: 2,
        patch: 4,
        image_size: 8,
        vocab: 3,
        ffn_mult: 2,
        time_dim: 4,
    }
}

fn tiny_moe() -> MoeConfig {
    MoeConfig {
        num_experts: 4,
        top_k: 2,
        rank: 2,
        alpha: 2.0,
        ..MoeConfig::default()
    }
}

fn block(rng: &mut ChaCha8Rng, width: usize, heads: usize) -> AttentionBlock {
    AttentionBlock {
        w_q: random(rng, &[width, width], 1.0),
        w_k: random(rng, &[width, width], 1.0),
        w_v: random(rng, &[width, width], 1.0),
        heads,
    }
}

#[test]
fn single_token_attends_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = block(&mut rng, 4, 2);
    let tok = random(&mut rng, &[1, 4], 1.0);
    let seq = assemble_tokens(None, &tok, None).unwrap();
    let out = mm_attention(&seq, &b).unwrap();
    assert_eq!(out.len(), 1);
    assert!(out.tokens.max_abs_diff(&tok.matmul(&b.w_v).unwrap()) < 1e-12);
}

#[test]
fn identical_tokens_give_identical_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = block(&mut rng, 6, 3);
    let tok = random(&mut rng, &[1, 6], 1.0);
    let seq = assemble_tokens(None, &tok, Some(&tok)).unwrap();
    let out = mm_attention(&seq, &b).unwrap();
    assert_eq!(out.tokens.row_slice(0), out.tokens.row_slice(1));
}

#[test]
fn three_tokens_match_scalar_evaluation() {
    let z = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let wq = [[1.0, 0.5], [0.0, 1.0]];
    let wk = [[0.5, 0.0], [1.0, -1.0]];
    let wv = [[2.0, 0.0], [0.0, 3.0]];
    let b = AttentionBlock {
        w_q: Array::from_rows(&[&wq[0], &wq[1]]).unwrap(),
        w_k: Array::from_rows(&[&wk[0], &wk[1]]).unwrap(),
        w_v: Array::from_rows(&[&wv[0], &wv[1]]).unwrap(),
        heads: 1,
    };
    let proj = |w: &[[f64; 2]; 2], x: &[f64; 2]| [x[0] * w[0][0] + x[1] * w[1][0], x[0] * w[0][1] + x[1] * w[1][1]];
    let mut expected = [[0.0; 2]; 3];
    for i in 0..3 {
        let q = proj(&wq, &z[i]);
        let scores: Vec<f64> = (0..3)
            .map(|j| {
                let k = proj(&wk, &z[j]);
                (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()
            })
            .collect();
        let denom: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..3 {
            let v = proj(&wv, &z[j]);
            let p = scores[j].exp() / denom;
            expected[i][0] += p * v[0];
            expected[i][1] += p * v[1];
        }
    }
    let zt = Array::from_rows(&[&z[0], &z[1]]).unwrap();
    let zc = Array::from_rows(&[&z[2]]).unwrap();
    let seq = assemble_tokens(None, &zt, Some(&zc)).unwrap();
    let out = mm_attention(&seq, &b).unwrap();
    for i in 0..3 {
        for c in 0..2 {
            assert!((out.tokens.get(i, c) - expected[i][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = block(&mut rng, 8, 4);
        let c = random(&mut rng, &[2, 8], 2.0);
        let zt = random(&mut rng, &[5, 8], 2.0);
        let zc = random(&mut rng, &[5, 8], 2.0);
        let seq = assemble_tokens(Some(&c), &zt, Some(&zc)).unwrap();
        let (out, probs) = mm_attention_with_weights(&seq, &b).unwrap();
        assert_eq!(out.tokens.shape(), seq.tokens.shape());
        assert_eq!(out.boundaries(), seq.boundaries());
        assert_eq!(probs.len(), 4);
        for p in &probs {
            for r in 0..p.rows() {
                let s: f64 = p.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn attention_rejects_width_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = block(&mut rng, 4, 2);
    let seq = assemble_tokens(None, &random(&mut rng, &[2, 6], 1.0), None).unwrap();
    assert!(mm_attention(&seq, &b).is_err());
}

fn input(rng: &mut ChaCha8Rng, cfg: &DitConfig, t: f64) -> DitInput {
    let g = cfg.geometry();
    DitInput {
        noisy: random(rng, &[g.num_patches(), g.patch_dim()], 1.0),
        content: random(rng, &[g.num_patches(), g.patch_dim()], 1.0),
        category: 1,
        t,
    }
}

fn forward_value(model: &StyleDit, inp: &DitInput, e_s: Option<&Array>) -> Array {
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape);
    let style = e_s.map(|e| StyleCondition {
        embedding: tape.constant(e.clone()),
        style_id: "s",
    });
    let out = model.forward(&mut tape, &bound, inp, style, None).unwrap();
    tape.value(out).clone()
}

#[test]
fn zero_initialized_sites_leave_forward_bit_identical() {
    let cfg = DitConfig::default();
    let base = StyleDit::new(cfg.clone(), 4).unwrap();
    let moe = attach_moe(base.clone(), &MoeConfig::default(), 64, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inp = input(&mut rng, &cfg, 0.3);
    let e = random(&mut rng, &[1, 64], 1.0);
    assert_eq!(forward_value(&base, &inp, None).data(), forward_value(&moe, &inp, Some(&e)).data());
}

#[test]
fn attaching_freezes_base_and_validates_sites() {
    let base = StyleDit::new(tiny_config(), 0).unwrap();
    let total = base.store().len();
    let moe = attach_moe(base.clone(), &tiny_moe(), 5, 1).unwrap();
    let trainable: Vec<ParamId> = moe.store().ids().filter(|&id| moe.store().is_trainable(id)).collect();
    assert_eq!(trainable, moe.moe_param_ids());
    assert_eq!(moe.store().len() - total, moe.moe_param_ids().len());
    assert_eq!(moe.moe_layer_names().len(), 6);

    let subset = MoeConfig {
        sites: vec!["attn.q".into(), "blocks.0.ffn.fc2".into()],
        ..tiny_moe()
    };
    let m = attach_moe(base.clone(), &subset, 5, 1).unwrap();
    assert_eq!(m.moe_layer_names(), vec!["blocks.0.attn.q", "blocks.0.ffn.fc2"]);

    let bad = MoeConfig {
        sites: vec!["attn.z".into()],
        ..tiny_moe()
    };
    assert!(attach_moe(base, &bad, 5, 1).is_err());
}

#[test]
fn forward_rejects_bad_inputs() {
    let cfg = tiny_config();
    let model = StyleDit::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape);
    let mut inp = input(&mut rng, &cfg, 0.5);
    inp.category = 3;
    assert!(model.forward(&mut tape, &bound, &inp, None, None).is_err());
    inp.category = 0;
    inp.t = 1.5;
    assert!(model.forward(&mut tape, &bound, &inp, None, None).is_err());
    assert!(StyleDit::new(DitConfig { image_size: 10, ..cfg }, 0).is_err());
}

#[test]
fn flow_state_follows_interpolant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = random(&mut rng, &[3, 4], 1.0);
    let eps = random(&mut rng, &[3, 4], 1.0);
    let s = FlowState::new(&x0, &eps, 0.0).unwrap();
    assert_eq!(s.x_t, x0);
    assert_eq!(s.target, eps.sub(&x0).unwrap());
    let s = FlowState::new(&x0, &eps, 1.0).unwrap();
    assert_eq!(s.x_t, eps);
    let s = FlowState::new(&x0, &eps, 0.25).unwrap();
    assert!((s.x_t.get(1, 2) - (0.75 * x0.get(1, 2) + 0.25 * eps.get(1, 2))).abs() < 1e-15);
    assert!(FlowState::new(&x0, &eps, -0.1).is_err());
}

#[test]
fn flow_loss_is_deterministic() {
    let cfg = tiny_config();
    let model = attach_moe(StyleDit::new(cfg.clone(), 1).unwrap(), &tiny_moe(), 5, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inp = input(&mut rng, &cfg, 0.5);
    let e = random(&mut rng, &[1, 5], 1.0);
    let ex = FlowExample {
        target: &inp.noisy,
        content: &inp.content,
        category: 2,
    };
    let a = flow_loss(&model, &ex, Some(&e), 0.4, 11).unwrap();
    let b = flow_loss(&model, &ex, Some(&e), 0.4, 11).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_ne!(a, flow_loss(&model, &ex, Some(&e), 0.4, 12).unwrap());
}

/// Gives every B matrix random values so gradients reach A as well.
fn randomize_experts(model: &mut StyleDit, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.moe_param_ids() {
        let shape = model.store().get(id).shape().to_vec();
        *model.store_mut().get_mut(id) = random(&mut rng, &shape, 0.5);
    }
}

// With an O(1) loss, one ulp of difference between the two evaluations is
// ~1e-10 in the quotient at eps = 1e-6, so the step is widened here.
#[test]
fn flow_loss_gradients_match_finite_differences() {
    let cfg = DitConfig {
        width: 4,
        heads: 1,
        patch: 2,
        image_size: 4,
        ffn_mult: 1,
        ..tiny_config()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut model = attach_moe(StyleDit::new(cfg.clone(), seed).unwrap(), &tiny_moe(), 5, seed + 1).unwrap();
        randomize_experts(&mut model, seed + 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let inp = input(&mut rng, &cfg, 0.5);
        let e = random(&mut rng, &[1, 5], 1.0);
        let noise = gaussian(inp.noisy.shape(), seed);
        let ids = model.moe_param_ids();
        let params: Vec<Array> = ids.iter().map(|&id| model.store().get(id).clone()).collect();
        let report = grad_check(
            |tape, vars| {
                let overrides: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
                let bound = model.store().bind_with(tape, &overrides);
                let ex = FlowExample {
                    target: &inp.noisy,
                    content: &inp.content,
                    category: 0,
                };
                let style = StyleCondition {
                    embedding: tape.constant(e.clone()),
                    style_id: "s",
                };
                flow_loss_on_tape(&model, tape, &bound, &ex, Some(style), &noise, 0.6, None)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "seed {seed}: {report:?}");
        worst = worst.max(report.max_rel_error);
    }
    eprintln!("flow loss worst relative error {worst:.3e}");
}

fn examples(cfg: &DitConfig, n: usize) -> Vec<StylizerExample> {
    let g = cfg.geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    (0..n)
        .map(|i| StylizerExample {
            content: random(&mut rng, &[g.num_patches(), g.patch_dim()], 1.0),
            target: random(&mut rng, &[g.num_patches(), g.patch_dim()], 1.0),
            style_features: random(&mut rng, &[1, 29], 1.0),
            category: i % cfg.vocab,
            style_id: format!("style{}", i % 2),
        })
        .collect()
}

#[test]
fn untrained_stylizer_samples_like_the_base_model() {
    let cfg = tiny_config();
    let base = StyleDit::new(cfg.clone(), 3).unwrap();
    let model = attach_moe(base.clone(), &tiny_moe(), 64, 4).unwrap();
    let encoder = StyleEncoder::new(EncoderConfig::default(), 5).unwrap();
    let run = train_stylizer(
        model,
        encoder,
        &examples(&cfg, 4),
        &StylizerTrainConfig {
            iterations: 0,
            ..StylizerTrainConfig::default()
        },
        1,
    )
    .unwrap();
    assert!(run.losses.is_empty());
    let ex = &examples(&cfg, 1)[0];
    let e = run.encoder.embed_matrix(&ex.style_features).unwrap();
    let (styled, trace) = sample(&run.model, &ex.content, 1, Some((&e, "style0")), 20, 9).unwrap();
    let (plain, none) = sample(&base, &ex.content, 1, None, 20, 9).unwrap();
    assert_eq!(styled.data(), plain.data());
    assert_eq!(trace.len(), 6);
    assert!(none.is_empty());
    let (again, _) = sample(&run.model, &ex.content, 1, Some((&e, "style0")), 20, 9).unwrap();
    assert_eq!(again.data(), styled.data());
}

#[test]
fn stylizer_training_updates_only_experts_and_is_deterministic() {
    let cfg = tiny_config();
    let run = || {
        let model = attach_moe(StyleDit::new(cfg.clone(), 3).unwrap(), &tiny_moe(), 64, 4).unwrap();
        let encoder = StyleEncoder::new(EncoderConfig::default(), 5).unwrap();
        let tc = StylizerTrainConfig {
            iterations: 6,
            collapse_window: 3,
            ..StylizerTrainConfig::default()
        };
        train_stylizer(model, encoder, &examples(&cfg, 4), &tc, 2).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.losses.len(), 6);
    assert!(a.divergences.is_empty());
    let start = attach_moe(StyleDit::new(cfg.clone(), 3).unwrap(), &tiny_moe(), 64, 4).unwrap();
    let moe_ids = start.moe_param_ids();
    for id in start.store().ids() {
        let changed = start.store().get(id) != a.model.store().get(id);
        if !moe_ids.contains(&id) {
            assert!(!changed, "{} moved", start.store().name(id));
        }
    }
    assert!(moe_ids.iter().any(|&id| start.store().get(id) != a.model.store().get(id)));
    assert_eq!(a.trace.len(), 2 * 6);
}

#[test]
fn desk_iteration_cost() {
    let cfg = DitConfig::default();
    let model = attach_moe(StyleDit::new(cfg.clone(), 3).unwrap(), &MoeConfig::default(), 64, 4).unwrap();
    let encoder = StyleEncoder::new(EncoderConfig::default(), 5).unwrap();
    let tc = StylizerTrainConfig {
        iterations: 10,
        batch_size: 2,
        ..StylizerTrainConfig::default()
    };
    let start = Instant::now();
    train_stylizer(model, encoder, &examples(&cfg, 4), &tc, 2).unwrap();
    eprintln!("desk stylizer: {:.1} ms per iteration", start.elapsed().as_secs_f64() * 100.0);
}
