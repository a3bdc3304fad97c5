use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::linalg::DenseMatrix;

fn small_config(rope: bool) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        kv_groups: 2,
        head_dim: 4,
        inter: 16,
        vocab: 16,
        rope_theta: 10000.0,
        rope_enabled: rope,
    }
}

fn uniform(v: f64, n: usize, layers: usize) -> Vec<Vec<f64>> {
    vec![vec![v; n]; layers]
}

#[test]
fn diagonal_gram_gives_signed_permutation() {
    let mut g = GramAccumulator::zero(4);
    g.gram = DenseMatrix::diag(&[1.0, 5.0, 3.0, 2.0]);
    let q = block_basis(&g, 2).unwrap().to_dense();
    for i in 0..4 {
        let nz: Vec<f64> = q.row(i).iter().copied().filter(|v| v.abs() > 1e-12).collect();
        assert_eq!(nz.len(), 1);
        assert!((nz[0].abs() - 1.0).abs() < 1e-12);
    }
    // Blocks never mix channels across the boundary.
    assert_eq!(q.submatrix(0, 2, 2, 2).max_abs(), 0.0);
}

#[test]
fn single_block_matches_dense_pca_and_is_orthonormal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = DenseMatrix::from_fn(40, 6, |_, _| rng.random_range(-1.0..1.0));
    let g = GramAccumulator::from_rows(&x);
    let dense = sym_eig(&g.gram).unwrap().vectors;
    let q = block_basis(&g, 6).unwrap().to_dense();
    assert!(q.max_abs_diff(&dense) < 1e-12);
    let qb = block_basis(&g, 4).unwrap().to_dense();
    assert!(qb.t_mul(&qb).max_abs_diff(&DenseMatrix::identity(6)) < 1e-8);
}

fn bases_identity(dims: &[(usize, usize)]) -> Vec<LayerBases> {
    dims.iter()
        .map(|&(h, f)| LayerBases {
            mha: BlockDiagonal::from_blocks(vec![DenseMatrix::identity(h)]),
            ffn: BlockDiagonal::from_blocks(vec![DenseMatrix::identity(f)]),
        })
        .collect()
}

#[test]
fn identity_rotation_squares_gradients() {
    let g = MaskGradients { g_h: vec![vec![1.0, -2.0]], g_f: vec![vec![3.0]] };
    let imp = correct_importance(&g, &bases_identity(&[(2, 1)])).unwrap();
    assert_eq!(imp.i_h, vec![vec![1.0, 4.0]]);
    assert_eq!(imp.i_f, vec![vec![9.0]]);
}

#[test]
fn permutation_permutes_and_rotation_preserves_total() {
    let g = MaskGradients { g_h: vec![vec![1.0, -2.0, 0.5]], g_f: vec![vec![1.0, 1.0]] };
    let perm = DenseMatrix::from_rows(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let rot = DenseMatrix::from_rows(&[[s, -s], [s, s]]);
    let bases = vec![LayerBases {
        mha: BlockDiagonal::from_blocks(vec![perm]),
        ffn: BlockDiagonal::from_blocks(vec![rot]),
    }];
    let imp = correct_importance(&g, &bases).unwrap();
    assert_eq!(imp.i_h[0], vec![4.0, 0.25, 1.0]);
    assert!((imp.i_f[0].iter().sum::<f64>() - 2.0).abs() < 1e-12);
    assert!((imp.i_f[0][0] - 2.0).abs() < 1e-12);
    let bad = bases_identity(&[(2, 2)]);
    assert!(correct_importance(&g, &bad).is_err());
}

#[test]
fn threshold_example_two_layers() {
    let imp = vec![vec![1.0, 9.0], vec![2.0, 8.0]];
    assert_eq!(select_removals(&imp, 2, 0.8, "mha").unwrap(), vec![1, 1]);
}

#[test]
fn brute_force_selection_is_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let layers = rng.random_range(1..=3);
        let imp: Vec<Vec<f64>> =
            (0..layers).map(|_| (0..rng.random_range(1..=5)).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let flat: Vec<(usize, f64)> =
            imp.iter().enumerate().flat_map(|(l, v)| v.iter().map(move |&x| (l, x))).collect();
        let n = flat.len();
        assert!(n <= 16);
        let cap = 0.6;
        let k = rng.random_range(0..=n / 2);
        let limits: Vec<usize> = imp.iter().map(|v| (cap * v.len() as f64 + 1e-9).floor() as usize).collect();
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let mut per = vec![0; layers];
            let mut kept = 0.0;
            for (i, &(l, x)) in flat.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    per[l] += 1;
                } else {
                    kept += x;
                }
            }
            if per.iter().zip(&limits).all(|(a, b)| a <= b) {
                best = best.max(kept);
            }
        }
        match select_removals(&imp, k, cap, "g") {
            Ok(rem) => {
                // Retained importance of the greedy pick.
                let mut kept = 0.0;
                for (v, &r) in imp.iter().zip(&rem) {
                    let mut s = v.clone();
                    s.sort_by(f64::total_cmp);
                    kept += s[r..].iter().sum::<f64>();
                }
                assert!((kept - best).abs() < 1e-12, "greedy {kept} vs best {best}");
            }
            Err(_) => assert_eq!(best, f64::NEG_INFINITY),
        }
    }
}

#[test]
fn scaling_importances_keeps_the_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let imp = UnitImportance {
        i_h: (0..3).map(|_| (0..8).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
        i_f: (0..3).map(|_| (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
    };
    let scaled = UnitImportance {
        i_h: imp.i_h.iter().map(|v| v.iter().map(|x| x * 37.5).collect()).collect(),
        i_f: imp.i_f.iter().map(|v| v.iter().map(|x| x * 37.5).collect()).collect(),
    };
    let c = UnitCosts::for_config(&small_config(true));
    assert_eq!(allocate_ratios(&imp, c, 0.3, 1.0, 0.8).unwrap(), allocate_ratios(&scaled, c, 0.3, 1.0, 0.8).unwrap());
}

#[test]
fn symmetric_importances_give_uniform_ratios() {
    let c = UnitCosts::for_config(&small_config(true));
    let imp = UnitImportance { i_h: uniform(1.0, 8, 2), i_f: uniform(1.0, 16, 2) };
    let plan = allocate_ratios(&imp, c, 0.25, 1.0, 0.8).unwrap();
    for l in &plan.layers {
        assert!((l.s_h - 0.25).abs() < 1e-12 && (l.s_f - 0.25).abs() < 1e-12, "{l:?}");
    }
}

#[test]
fn zero_bias_moves_everything_to_attention() {
    let cfg = small_config(true);
    let c = UnitCosts::for_config(&cfg);
    let imp = UnitImportance { i_h: uniform(1.0, 8, 2), i_f: uniform(1.0, 16, 2) };
    let plan = allocate_ratios(&imp, c, 0.2, 0.0, 0.8).unwrap();
    assert!(plan.layers.iter().all(|l| l.s_f == 0.0));
    assert!(plan.layers.iter().all(|l| l.s_h > 0.2));
    assert!((plan.realized_sparsity - 0.2).abs() <= 0.01 * 0.2);
    assert_eq!(plan.r_f, 0.0);
}

#[test]
fn realized_sparsity_on_the_grid() {
    let cfg = ModelConfig::toy();
    let c = UnitCosts::for_config(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let imp = UnitImportance {
        i_h: (0..cfg.layers).map(|_| (0..32).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
        i_f: (0..cfg.layers).map(|_| (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
    };
    for r in [0.2, 0.3, 0.4] {
        for lb in [0.8, 1.0] {
            let plan = allocate_ratios(&imp, c, r, lb, 0.8).unwrap();
            assert!((plan.realized_sparsity - r).abs() <= 0.01 * r, "r={r} λ={lb}: {}", plan.realized_sparsity);
            assert!(plan.layers.iter().all(|l| l.s_h <= 0.8 && l.s_f <= 0.8));
        }
    }
}

#[test]
fn cap_spills_and_reports_infeasibility() {
    let imp = vec![vec![0.0; 4], vec![1.0; 4]];
    assert_eq!(select_removals(&imp, 5, 0.75, "g").unwrap(), vec![3, 2]);
    let err = select_removals(&imp, 7, 0.75, "g").unwrap_err();
    assert!(matches!(err, Error::Infeasible(ref m) if m.contains("binding layer 0")), "{err}");
    let c = UnitCosts { mha: 1.0, ffn: 1.0 };
    let u = UnitImportance { i_h: uniform(1.0, 4, 1), i_f: uniform(1.0, 4, 1) };
    assert!(matches!(allocate_ratios(&u, c, 0.5, 2.0, 0.8), Err(Error::Infeasible(_))));
    assert!(matches!(allocate_ratios(&u, c, 1.2, 1.0, 0.8), Err(Error::Config(_))));
}

#[test]
fn targets_round_toward_retention() {
    let cfg = small_config(true);
    let plan = |s_h: f64| RatioPlan {
        r: 0.5,
        lambda_b: 1.0,
        cap: 0.8,
        r_h: s_h,
        r_f: 0.0,
        layers: vec![LayerRatio { s_h, s_f: 0.0 }; 2],
        realized_sparsity: 0.0,
    };
    assert_eq!(plan_to_targets(&plan(0.5), &cfg).unwrap()[0].mha, 4);
    // Six channels over two heads would need p = 3; RoPE forces p = 4.
    let t = plan_to_targets(&plan(0.25), &cfg).unwrap();
    assert_eq!(t[0].mha, 8);
    // The retained surplus is paid for by the FFN.
    assert!(t[0].ffn < cfg.inter);
}

#[test]
fn targets_track_the_plan_in_parameters() {
    let cfg = ModelConfig { layers: 4, ..ModelConfig::toy() };
    let c = UnitCosts::for_config(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let imp = UnitImportance {
            i_h: (0..4).map(|_| (0..32).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
            i_f: (0..4).map(|_| (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
        };
        let r = rng.random_range(0.15..0.45);
        let plan = allocate_ratios(&imp, c, r, 1.0, 0.8).unwrap();
        let targets = plan_to_targets(&plan, &cfg).unwrap();
        let total = 4.0 * (32.0 * c.mha + 64.0 * c.ffn);
        let kept: f64 = targets.iter().map(|t| t.mha as f64 * c.mha + t.ffn as f64 * c.ffn).sum();
        let realized = 1.0 - kept / total;
        assert!((realized - plan.realized_sparsity).abs() <= 0.01 * r, "{realized} vs {}", plan.realized_sparsity);
    }
}

#[test]
fn plan_round_trips_through_json() {
    let c = UnitCosts::for_config(&small_config(false));
    let imp = UnitImportance { i_h: uniform(1.0, 8, 2), i_f: uniform(2.0, 16, 2) };
    let plan = allocate_ratios(&imp, c, 0.3, 0.8, 0.8).unwrap();
    let back: RatioPlan = serde_json::from_str(&serde_json::to_string(&plan).unwrap()).unwrap();
    assert_eq!(back, plan);
}
