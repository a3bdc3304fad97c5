use super::*;
use crate::pipeline::{fuse_check, sample_windows, split_corpus, bundled_tokens};
use crate::tmodel::logits;

fn calib(seed: u64, n: usize, len: usize) -> Vec<TokenBatch> {
    sample_windows(split_corpus(&bundled_tokens()).0, n, len, seed).unwrap()
}

fn toy(seed: u64) -> Checkpoint {
    Checkpoint::random_init(&ModelConfig::toy(), seed).unwrap()
}

#[test]
fn constant_stream_has_rank_one() {
    let cfg = ModelConfig::toy();
    let mut ck = Checkpoint::zeros(&cfg).unwrap();
    let emb = ck.tensors.get_mut("embed").unwrap();
    for r in 0..emb.rows() {
        for (c, v) in emb.row_mut(r).iter_mut().enumerate() {
            *v = (c as f64 + 1.0).sin();
        }
    }
    let p = rank_profile(&ck, &calib(0, 4, 16), DEFAULT_TAU).unwrap();
    assert_eq!(p.ranks, vec![1; cfg.layers]);
    assert_eq!(p.label, "dense");
}

#[test]
fn full_energy_gives_the_gram_rank() {
    let ck = toy(0);
    let c = calib(0, 8, 32);
    let full = rank_profile(&ck, &c, 1.0).unwrap();
    let trace = capture_trace(&ck, &c, &CaptureOptions::default(), Hooks::default()).unwrap();
    for (l, &r) in full.ranks.iter().enumerate() {
        let v = sym_eig(&trace.layer(l).unwrap().block_output.gram.gram).unwrap().values;
        let numeric = v.iter().filter(|&&x| x > 1e-10 * v[0]).count();
        assert!(r >= numeric && r <= ck.config.hidden, "layer {l}: {r} vs {numeric}");
    }
    let part = rank_profile(&ck, &c, DEFAULT_TAU).unwrap();
    assert!(part.ranks.iter().zip(&full.ranks).all(|(a, b)| a <= b));
}

#[test]
fn dense_profile_is_stable_across_calibration_draws() {
    let ck = toy(1);
    let profiles: Vec<RankProfile> =
        (0..3).map(|s| rank_profile(&ck, &calib(s, 32, 64), DEFAULT_TAU).unwrap()).collect();
    for p in &profiles[1..] {
        for (a, b) in p.ranks.iter().zip(&profiles[0].ranks) {
            assert!(a.abs_diff(*b) <= 1, "{:?} vs {:?}", p.ranks, profiles[0].ranks);
        }
    }
}

#[test]
fn zero_probe_is_the_dense_model() {
    let ck = toy(2);
    let c = calib(0, 8, 32);
    let probe = inter_pca_probe(&ck, &c, 0.0, &[0, 1]).unwrap();
    assert!(probe.maps.iter().all(Option::is_none));
    assert_eq!(probe.logits(&ck, &c[0]).unwrap(), logits(&ck, &c[0]).unwrap());
    assert_eq!(probe.profile(&ck, &c, DEFAULT_TAU).unwrap().ranks, rank_profile(&ck, &c, DEFAULT_TAU).unwrap().ranks);
    assert!(inter_pca_probe(&ck, &c, 0.5, &[2]).is_err());
}

#[test]
fn probed_layer_output_is_rank_limited() {
    let ck = toy(3);
    let before = ck.clone();
    let c = calib(1, 8, 32);
    let probe = inter_pca_probe(&ck, &c, 0.5, &[0]).unwrap();
    let p = probe.profile(&ck, &c, 1.0).unwrap();
    assert!(p.ranks[0] <= 16, "{:?}", p.ranks);
    // The probe leaves the weights alone.
    assert_eq!(ck, before);
}

#[test]
fn baselines_are_deterministic_and_sized() {
    let ck = toy(4);
    let c = calib(0, 8, 32);
    for kind in [BaselineKind::Random, BaselineKind::Magnitude] {
        let spec = BaselineSpec { kind, sparsity: 0.3, seed: 7 };
        let (a, log) = baseline_prune(&ck, &c, &spec).unwrap();
        let (b, _) = baseline_prune(&ck, &c, &spec).unwrap();
        assert_eq!(a, b);
        let r = 1.0 - a.prunable_params() as f64 / ck.prunable_params() as f64;
        assert!((r - 0.3).abs() <= 0.003, "{kind:?}: {r}");
        // Deletion is exact algebra too.
        assert!(fuse_check(&ck, &a, &log, 2, 0).unwrap() < 1e-4);
    }
    let (same, _) = baseline_prune(&ck, &c, &BaselineSpec { kind: BaselineKind::Random, sparsity: 0.0, seed: 0 }).unwrap();
    assert_eq!(same, ck);
    let (r1, _) = baseline_prune(&ck, &c, &BaselineSpec { kind: BaselineKind::Random, sparsity: 0.3, seed: 1 }).unwrap();
    let (r2, _) = baseline_prune(&ck, &c, &BaselineSpec { kind: BaselineKind::Random, sparsity: 0.3, seed: 2 }).unwrap();
    assert_ne!(r1, r2);
}

#[test]
fn magnitude_baseline_without_rope_or_with_gqa() {
    let c = calib(0, 4, 32);
    for cfg in [
        ModelConfig { rope_enabled: false, ..ModelConfig::toy() },
        ModelConfig { kv_groups: 2, ..ModelConfig::toy() },
    ] {
        let ck = Checkpoint::random_init(&cfg, 5).unwrap();
        let spec = BaselineSpec { kind: BaselineKind::Magnitude, sparsity: 0.4, seed: 0 };
        let (p, log) = baseline_prune(&ck, &c, &spec).unwrap();
        p.validate().unwrap();
        assert!(fuse_check(&ck, &p, &log, 1, 0).unwrap() < 1e-4);
    }
}

#[test]
fn report_tables_have_the_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let empty = EvalReport::default();
    emit_report(&empty, dir.path().join("empty")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("empty.csv")).unwrap();
    assert_eq!(csv.trim(), "layer,metric,variant,value");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("empty.json")).unwrap()).unwrap();
    assert!(json["profiles"].as_array().unwrap().is_empty());

    let report = EvalReport {
        profiles: vec![
            RankProfile { label: "dense".into(), ranks: vec![10, 12, 14] },
            RankProfile { label: "intra_pruned".into(), ranks: vec![10, 11, 14] },
            RankProfile { label: "inter_probe".into(), ranks: vec![8, 9, 13] },
        ],
        ppl: [("dense".to_string(), 12.5)].into(),
        params: [("dense".to_string(), 20480)].into(),
    };
    emit_report(&report, dir.path().join("sub/full")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("sub/full.csv")).unwrap();
    // layers × variants × metrics, plus the header.
    assert_eq!(text.lines().count(), 3 * 3 * 2 + 1);
    assert!(text.contains("2,rank_delta,inter_probe,-1.0"));
    let back: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sub/full.json")).unwrap()).unwrap();
    assert_eq!(back, report);
    assert_eq!(report.profiles[2].perturbation(&report.profiles[0], 1), 4);
}
