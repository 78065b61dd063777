mod common;

use proptest::prelude::*;
use stylemoe::data::{gen_data, load_triplets, DataConfig, Judge, JudgeRequest};
use stylemoe::dit::{attach_moe, DitConfig, EncoderMode, StyleDit, StylizerTrainConfig};
use stylemoe::encoder::{EncoderConfig, StyleEncoder};
use stylemoe::eval::{
    aggregate, expert_overlap_iou, median, pick_similar_dissimilar, render_iou_table, retrieval_report, run_arm, score_pairs,
    score_response, semantic_score, staged_iou_report, summarize, MockSemanticJudge,
};
use stylemoe::eval::overlap::stage_partition;
use stylemoe::moe::MoeConfig;
use stylemoe::numeric::Array;
use stylemoe::raster::Raster;
use stylemoe::{Error, Result};

#[test]
fn iou_examples() {
    assert_eq!(expert_overlap_iou(&[1, 3, 5, 7], &[1, 3, 8, 9]).unwrap(), 2.0 / 6.0);
    assert_eq!(expert_overlap_iou(&[2, 4], &[4, 2]).unwrap(), 1.0);
    assert_eq!(expert_overlap_iou(&[0], &[1]).unwrap(), 0.0);
    assert!(expert_overlap_iou(&[], &[1]).is_err());
}

#[test]
fn pick_examples() {
    let sim = |a: &f64, b: &f64| -(a - b).abs();
    assert_eq!(pick_similar_dissimilar(&0.0, &[3.0, 1.0], sim).unwrap(), (1, 0));
    assert_eq!(pick_similar_dissimilar(&0.0, &[2.0, 2.0, 2.0], sim).unwrap(), (0, 0));
    assert!(pick_similar_dissimilar(&0.0, &[1.0], sim).is_err());
}

#[test]
fn six_layers_split_into_thirds_of_two() {
    let parts = stage_partition(6);
    assert_eq!(parts.map(|r| r.len()), [2, 2, 2]);
    assert_eq!(stage_partition(12).map(|r| r.len()), [4, 4, 4]);
    assert_eq!(stage_partition(7).map(|r| r.len()), [3, 2, 2]);
    assert_eq!(stage_partition(8).map(|r| r.len()), [3, 3, 2]);
}

proptest! {
    #[test]
    fn pick_matches_sorted_pool(pool in prop::collection::vec(-100i32..100, 2..10)) {
        let sims: Vec<f64> = pool.iter().map(|&v| v as f64).collect();
        let (hi, lo) = pick_similar_dissimilar(&usize::MAX, &(0..sims.len()).collect::<Vec<_>>(), |_, j| sims[*j]).unwrap();
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
        prop_assert_eq!(hi, order[0]);
        let mut rev: Vec<usize> = (0..sims.len()).collect();
        rev.sort_by(|&a, &b| sims[a].partial_cmp(&sims[b]).unwrap().then(a.cmp(&b)));
        prop_assert_eq!(lo, rev[0]);
        prop_assert!(sims[hi] >= sims[lo]);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(
        a in prop::collection::btree_set(0usize..16, 1..6),
        b in prop::collection::btree_set(0usize..16, 1..6),
    ) {
        let a: Vec<usize> = a.into_iter().collect();
        let b: Vec<usize> = b.into_iter().collect();
        let x = expert_overlap_iou(&a, &b).unwrap();
        prop_assert_eq!(x, expert_overlap_iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(expert_overlap_iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn stage_means_are_plain_means(values in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20)) {
        let layers: Vec<String> = (0..values.len()).map(|i| format!("l{i}")).collect();
        let sim: Vec<f64> = values.iter().map(|v| v.0).collect();
        let dis: Vec<f64> = values.iter().map(|v| v.1).collect();
        let r = summarize(layers, sim.clone(), dis.clone(), 1, 0);
        for st in &r.stages {
            if st.layers.is_empty() {
                prop_assert!(st.similar.is_none());
                continue;
            }
            let m = st.layers.iter().map(|&i| sim[i]).sum::<f64>() / st.layers.len() as f64;
            let d = st.layers.iter().map(|&i| dis[i]).sum::<f64>() / st.layers.len() as f64;
            prop_assert!((st.similar.unwrap() - m).abs() <= 1e-12);
            prop_assert!((st.dissimilar.unwrap() - d).abs() <= 1e-12);
        }
        prop_assert!((r.overall_similar - sim.iter().sum::<f64>() / sim.len() as f64).abs() <= 1e-12);
    }

    #[test]
    fn semantic_score_depends_only_on_the_text(text in ".{0,20}") {
        struct Canned(String);
        impl Judge for Canned {
            fn respond(&self, _: &JudgeRequest) -> Result<String> {
                Ok(self.0.clone())
            }
        }
        let a = Raster::filled(4, 4, [0, 0, 0]);
        let b = Raster::filled(4, 4, [255, 9, 9]);
        let s1 = semantic_score(&a, &b, &Canned(text.clone())).unwrap();
        let s2 = semantic_score(&b, &a, &Canned(text.clone())).unwrap();
        prop_assert_eq!(s1, s2);
        prop_assert_eq!(s1, u8::from(text.starts_with("YES")));
    }
}

#[test]
fn canned_responses_parse_without_misses() {
    for (text, want) in common::CANNED_RESPONSES {
        assert_eq!(score_response(text), want, "{text:?}");
    }
}

#[test]
fn aggregate_mean_and_unscored() {
    assert_eq!(aggregate(&[Some(1), Some(0), Some(1), Some(1)]).mean, 0.75);
    let r = aggregate(&[Some(1), None, Some(0)]);
    assert_eq!((r.mean, r.unscored), (0.5, 1));
}

#[test]
fn judge_failures_are_unscored() {
    struct Down;
    impl Judge for Down {
        fn respond(&self, _: &JudgeRequest) -> Result<String> {
            Err(Error::Judge("offline".into()))
        }
    }
    let img = Raster::filled(16, 16, [10, 20, 30]);
    let r = score_pairs(&[(img.clone(), img)], &Down);
    assert_eq!((r.unscored, r.mean), (1, 0.0));
}

#[test]
fn mock_semantic_judge_on_identical_and_distant_images() {
    // One-dimensional embedding red mean minus blue mean: a red and a blue
    // image land at cosine -1, the largest possible distance.
    let cfg = EncoderConfig {
        hidden_dims: vec![],
        embedding_dim: 1,
        ..EncoderConfig::default()
    };
    let mut enc = StyleEncoder::new(cfg, 1).unwrap();
    let (w, b) = enc.layer_ids()[0];
    let mut weight = Array::zeros(&[29, 1]);
    weight.set(0, 0, 1.0);
    weight.set(2, 0, -1.0);
    *enc.store_mut().get_mut(w) = weight;
    *enc.store_mut().get_mut(b) = Array::zeros(&[1, 1]);
    let judge = MockSemanticJudge::new(enc);
    let red = Raster::filled(16, 16, [220, 20, 20]);
    let blue = Raster::filled(16, 16, [20, 20, 220]);
    assert_eq!(semantic_score(&red, &red, &judge).unwrap(), 1);
    assert_eq!(semantic_score(&red, &blue, &judge).unwrap(), 0);
}

#[test]
fn one_hot_oracle_retrieves_perfectly() {
    let labels: Vec<String> = ["a", "a", "b", "b", "c", "c"].iter().map(|s| s.to_string()).collect();
    let emb: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| ["a", "b", "c"].iter().map(|k| f64::from(u8::from(l == k))).collect())
        .collect();
    let r = retrieval_report(&emb, &labels).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert!((r.margin - 1.0).abs() < 1e-12);
}

#[test]
fn singleton_styles_are_excluded() {
    let labels: Vec<String> = ["a", "a", "b", "b", "z"].iter().map(|s| s.to_string()).collect();
    let emb = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9], vec![1.0, 1.0]];
    let r = retrieval_report(&emb, &labels).unwrap();
    assert_eq!(r.excluded_styles, vec!["z".to_string()]);
    assert_eq!(r.images, 4);
}

fn small_dit() -> DitConfig {
    DitConfig {
        blocks: 1,
        width: 8,
        heads: 2,
        ..DitConfig::default()
    }
}

fn small_moe() -> MoeConfig {
    MoeConfig {
        num_experts: 4,
        top_k: 2,
        rank: 2,
        ..MoeConfig::default()
    }
}

#[test]
fn untrained_model_report_is_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DataConfig {
        families: vec!["sepia".into(), "halftone".into(), "mosaic".into()],
        contents: 4,
        ..DataConfig::default()
    };
    gen_data(&cfg, dir.path(), 1, None).unwrap();
    let triplets = load_triplets(&dir.path().join("manifest.jsonl"), None).unwrap();
    let enc = StyleEncoder::new(EncoderConfig::default(), 2).unwrap();
    let model = attach_moe(StyleDit::new(small_dit(), 3).unwrap(), &small_moe(), 64, 4).unwrap();
    let r = staged_iou_report(&model, &enc, &triplets, 20, 5).unwrap();
    assert_eq!(r.layers.len(), 6);
    assert_eq!(r.samples + r.skipped, 20);
    assert!((0.0..=1.0).contains(&r.overall_similar) && (0.0..=1.0).contains(&r.overall_dissimilar));
    let again = staged_iou_report(&model, &enc, &triplets, 20, 5).unwrap();
    assert_eq!(r, again);
    let table = render_iou_table(&r);
    for stage in ["early", "mid", "late"] {
        assert!(table.contains(stage), "{table}");
    }
    eprintln!("untrained: similar {:.3} dissimilar {:.3}", r.overall_similar, r.overall_dissimilar);
}

#[test]
fn identical_arms_give_identical_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DataConfig {
        families: vec!["sepia".into(), "halftone".into()],
        contents: 3,
        ..DataConfig::default()
    };
    gen_data(&cfg, dir.path(), 1, None).unwrap();
    let dit = small_dit();
    let geometry = dit.geometry();
    let examples: Vec<_> = load_triplets(&dir.path().join("manifest.jsonl"), None)
        .unwrap()
        .iter()
        .map(|t| t.to_stylizer_example(&geometry).unwrap())
        .collect();
    let base = StyleDit::new(dit, 7).unwrap();
    let enc = StyleEncoder::new(EncoderConfig::default(), 8).unwrap();
    let train = StylizerTrainConfig {
        iterations: 15,
        ..StylizerTrainConfig::default()
    };
    let a = run_arm(&base, &small_moe(), enc.clone(), EncoderMode::Frozen, &examples, &train, 9).unwrap();
    let b = run_arm(&base, &small_moe(), enc, EncoderMode::Frozen, &examples, &train, 9).unwrap();
    assert_eq!(a.losses.len(), 15);
    assert_eq!(a.losses, b.losses);
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
}
