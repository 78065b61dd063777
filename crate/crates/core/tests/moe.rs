mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylemoe::moe::{expert_param_count, moe_forward, route_logits, LoraExpert, MoeConfig, MoeSite, RouterDecision};
use stylemoe::numeric::{Array, ParamStore, Tape};

#[test]
fn randomized_routing_trials_hold_every_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..2000 {
        let bad = common::routing_trial(&mut rng);
        assert!(bad.is_empty(), "trial {trial}: {bad:?}");
    }
}

proptest! {
    #[test]
    fn route_matches_brute_force(
        logits in prop::collection::vec(prop_oneof![(-3i32..=3).prop_map(f64::from), -3.0f64..3.0], 1..10),
        kseed in 0usize..100,
    ) {
        let k = 1 + kseed % logits.len();
        let d = route_logits(&logits, k).unwrap();
        prop_assert_eq!(&d.indices, &common::brute_force_top_k(&logits, k));
        prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn correction_is_linear_in_h(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = |rng: &mut ChaCha8Rng| LoraExpert { a: common::random(rng, &[2, 3], 1.0), b: common::random(rng, &[4, 2], 1.0) };
        let experts = vec![e(&mut rng), e(&mut rng), e(&mut rng)];
        let shared = e(&mut rng);
        let d = RouterDecision { indices: vec![2, 0], weights: vec![0.7, 0.3] };
        let zero = Array::zeros(&[1, 4]);
        let h1 = common::random(&mut rng, &[1, 3], 1.0);
        let h2 = common::random(&mut rng, &[1, 3], 1.0);
        let f = |h: &Array| moe_forward(h, &zero, &d, &experts, &shared, 2.0, 2).unwrap();
        let combo = h1.scale(a).add(&h2.scale(b)).unwrap();
        let want = f(&h1).scale(a).add(&f(&h2).scale(b)).unwrap();
        prop_assert!(f(&combo).max_abs_diff(&want) <= 1e-12);
    }
}

#[test]
fn zero_lora_site_is_identity_on_the_tape() {
    let cfg = MoeConfig {
        num_experts: 4,
        top_k: 2,
        rank: 2,
        ..MoeConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let site = MoeSite::create(&mut store, "s", 3, 5, 4, &cfg, &mut rng).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let e = tape.constant(common::random(&mut rng, &[1, 4], 1.0));
    let routed = site.route(&mut tape, &bound, e, 2).unwrap();
    let h = tape.constant(common::random(&mut rng, &[6, 3], 1.0));
    let base = common::random(&mut rng, &[6, 5], 1.0);
    let bv = tape.constant(base.clone());
    let out = site.apply(&mut tape, &bound, h, bv, &routed, cfg.scaling()).unwrap();
    assert_eq!(tape.value(out), &base);
}

#[test]
fn site_gradients_match_finite_differences() {
    for seed in 0..5 {
        let r = common::moe_site_check(seed, 1e-6);
        assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn routing_is_repeatable() {
    let cfg = MoeConfig {
        num_experts: 6,
        top_k: 3,
        rank: 2,
        ..MoeConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let site = MoeSite::create(&mut store, "s", 2, 2, 5, &cfg, &mut rng).unwrap();
    let e_s = common::random(&mut rng, &[1, 5], 1.0);
    let run = || {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let e = tape.constant(e_s.clone());
        site.route(&mut tape, &bound, e, 3).unwrap().decision
    };
    let first = run();
    for _ in 0..5 {
        assert_eq!(run(), first);
    }
}

#[test]
fn parameter_count_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..20 {
        let n = rng.gen_range(1..6);
        let cfg = MoeConfig {
            num_experts: n,
            top_k: rng.gen_range(1..=n),
            rank: rng.gen_range(1..4),
            router_hidden: if i % 3 == 0 { rng.gen_range(1..5) } else { 0 },
            ..MoeConfig::default()
        };
        let sites: Vec<(usize, usize)> = (0..rng.gen_range(0..4)).map(|_| (rng.gen_range(1..9), rng.gen_range(1..9))).collect();
        let emb = rng.gen_range(1..7);
        assert_eq!(expert_param_count(&cfg, &sites, emb), common::enumerate_moe_params(&cfg, &sites, emb, i));
    }
}
