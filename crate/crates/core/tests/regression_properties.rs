mod common;

use approx::assert_abs_diff_eq;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use read_core::regression::{
    self, evaluate, gbt_fit, kfold, ridge_fit, split_80_20, DistrictTiles, EvalConfig, GbtParams, Node,
    RegressorKind,
};

#[test]
fn single_depth_one_tree_is_the_best_stump() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let (n, p) = (rng.gen_range(8..60), rng.gen_range(1..5));
        let x = Array2::from_shape_fn((n, p), |_| rng.gen_range(-3.0..3.0f64).round() / 2.0 + rng.gen_range(0.0..0.01));
        let y = Array1::from_shape_fn(n, |i| if x[[i, 0]] > 0.0 { 2.0 } else { -1.0 } + rng.gen_range(-1.0..1.0));
        let model = gbt_fit(x.view(), y.view(), GbtParams { trees: 1, max_depth: 1, learning_rate: 1.0 }).unwrap();

        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        let (f, thr, lm, rm, _) = common::best_stump(&rows, y.as_slice().unwrap()).unwrap();
        match &model.trees[0].nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(*feature, f);
                assert_abs_diff_eq!(*threshold, thr, epsilon = 1e-12);
            }
            leaf => panic!("expected a split, got {leaf:?}"),
        }
        for (i, row) in x.rows().into_iter().enumerate() {
            let want = if x[[i, f]] <= thr { lm } else { rm };
            assert_abs_diff_eq!(model.predict_row(row), want, epsilon = 1e-10);
        }
    }
}

#[test]
fn ridge_with_no_penalty_recovers_exact_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = Array2::from_shape_fn((50, 4), |_| rng.gen_range(-1.0..1.0));
    let y = x.dot(&ndarray::arr1(&[1.5, -2.0, 0.0, 0.25])) + 3.0;
    let m = ridge_fit(x.view(), y.view(), 1e-12).unwrap();
    for (row, target) in x.rows().into_iter().zip(&y) {
        assert_abs_diff_eq!(m.predict_row(row), *target, epsilon = 1e-8);
    }
}

#[test]
fn splits_partition_the_rows() {
    let (train, test) = split_80_20(101, 9).unwrap();
    assert_eq!(test.len(), 20);
    let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
    all.sort();
    assert_eq!(all, (0..101).collect::<Vec<_>>());
    assert_ne!(split_80_20(101, 10).unwrap().1, test);

    let folds = kfold(23, 4).unwrap();
    let mut seen = vec![0; 23];
    for (tr, va) in &folds {
        assert_eq!(tr.len() + va.len(), 23);
        va.iter().for_each(|&i| seen[i] += 1);
    }
    assert!(seen.iter().all(|&c| c == 1));
}

fn random_districts(rng: &mut ChaCha8Rng, n: usize) -> Vec<DistrictTiles> {
    (0..n)
        .map(|i| DistrictTiles {
            district_id: format!("d{i}"),
            embeddings: Array2::from_shape_fn((rng.gen_range(5..15), 6), |_| StandardNormal.sample(rng)),
        })
        .collect()
}

#[test]
fn unrelated_targets_give_no_skill() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let districts = random_districts(&mut rng, 80);
    let y: Vec<f64> = (0..80).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut cfg = EvalConfig::new(RegressorKind::Ridge);
    cfg.trials = 5;
    cfg.ks = vec![1, 2, 3];
    let report = evaluate(&districts, &y, "noise", "READ", &cfg).unwrap();
    assert!(report.r2_mean <= 0.1, "R² {} on unrelated targets", report.r2_mean);
}

#[test]
fn planted_signal_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let districts = random_districts(&mut rng, 80);
    let y: Vec<f64> = districts
        .iter()
        .map(|d| 2.0 * d.embeddings.column(0).mean().unwrap() + (d.embeddings.nrows() as f64).ln())
        .collect();
    let mut cfg = EvalConfig::new(RegressorKind::Ridge);
    cfg.trials = 5;
    cfg.transductive_pca = false;
    let report = evaluate(&districts, &y, "signal", "READ", &cfg).unwrap();
    assert!(report.r2_mean >= 0.8, "R² {}", report.r2_mean);
    assert_eq!(report.trials.len(), 5);
    assert!(report.trials.iter().enumerate().all(|(t, r)| r.trial == t && r.seed == t as u64));
    assert_abs_diff_eq!(
        report.r2_mean,
        regression::mean_sd(&report.trials.iter().map(|t| t.r2).collect::<Vec<_>>()).0,
        epsilon = 1e-15
    );
}
