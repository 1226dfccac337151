mod common;

use common::rng;
use marginlab::margin::{classification_error, MarginBatch};
use marginlab::report::{run_svm_sweep, SweepConfig};
use marginlab::svm::*;
use marginlab::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn random_problem(seed: u64, m: usize, d: usize) -> (Tensor, Vec<f64>) {
    let mut r = rng(seed);
    let y: Vec<f64> = (0..m).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let data = (0..m * d)
        .map(|i| r.random_range(-1.0..1.0) + 0.4 * y[i / d])
        .collect();
    (Tensor::new([m, d], data).unwrap(), y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn solutions_are_feasible_and_optimal(seed in any::<u64>(), m in 4usize..40, d in 1usize..6, c in prop::sample::select(vec![0.1, 1.0, 100.0])) {
        let (f, y) = random_problem(seed, m, d);
        let model = train_svm(&f, &y, c).unwrap();
        prop_assert!(model.alpha.iter().all(|&a| (0.0..=c).contains(&a)));
        let balance: f64 = model.alpha.iter().zip(&y).map(|(a, y)| a * y).sum();
        prop_assert!(balance.abs() < 1e-6, "Σyα = {}", balance);
        prop_assert!(kkt_violation(&model, &f, &y).unwrap() < KKT_TOLERANCE);
        for i in 0..m {
            let primal = model.decision(f.row(i));
            let dual = model.dual_decision(&f, &y, f.row(i));
            prop_assert!((primal - dual).abs() < 1e-9, "{} vs {}", primal, dual);
        }
    }

    #[test]
    fn rbf_features_match_direct_formula(seed in any::<u64>(), delta in 0.0f64..3.0) {
        let mut r = rng(seed);
        let centers: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let cfg = RbfConfig::new(delta, &centers).unwrap();
        let phi = rbf_features(&x, &cfg);
        prop_assert_eq!(phi.len(), cfg.dim());
        for (p, c) in phi.iter().zip(&centers) {
            let dist = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2)).sqrt();
            prop_assert!((p - (-delta * dist).exp()).abs() < 1e-14);
        }
    }
}

#[test]
fn sweep_rows_agree_with_margin_module() {
    let (train, test) = gaussian_mixtures(&MixtureConfig::default(), 60, 100).unwrap();
    for delta in [0.05, 0.5] {
        let cell = sweep_cell(delta, &train, &test, DEFAULT_C).unwrap();
        let row = cell.row().unwrap();
        let stats = MarginBatch::from_margins(cell.train_margins.clone()).unwrap();
        assert_eq!(row.mean_margin, Some(stats.mu));
        assert_eq!(row.variance, Some(stats.sigma));
        assert_eq!(row.nmv, Some(stats.sigma_bar));
        assert_eq!(row.test_error, Some(classification_error(&cell.test_margins).unwrap()));
        assert_eq!(row.geom_margin, Some(2.0 / cell.model.w_norm()));
        // unit-normalized margins: γ_i = y_i(w·φ_i + b)/‖w‖
        let cfg = RbfConfig::new(delta, &train.x).unwrap();
        let phi = rbf_features(&train.x[3], &cfg);
        let direct = train.y[3] * cell.model.decision(&phi) / cell.model.w_norm();
        assert!((direct - cell.train_margins[3]).abs() < 1e-12);
    }
}

#[test]
fn sweep_is_deterministic_and_writes_one_row_per_delta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig {
        deltas: vec![0.01, 0.1, 1.0],
        n_train: 60,
        n_test: 60,
        ..SweepConfig::default()
    };
    let a = run_svm_sweep(&cfg, &dir.path().join("a")).unwrap();
    let b = run_svm_sweep(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(a, b);
    let text = std::fs::read_to_string(dir.path().join("a/sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text, std::fs::read_to_string(dir.path().join("b/sweep.csv")).unwrap());
    let (train, test) = gaussian_mixtures(&cfg.mixture, 60, 60).unwrap();
    let direct = sweep_cell(0.1, &train, &test, cfg.c).unwrap().row().unwrap();
    assert_eq!(a[1], direct);
}

#[test]
fn degenerate_solution_is_flagged() {
    // identical inputs with both labels: δ-features are all ones and w_s = 0
    let train = TwoClassSet {
        x: vec![vec![1.0], vec![1.0]],
        y: vec![1.0, -1.0],
    };
    let row = sweep_cell(1.0, &train, &train, DEFAULT_C).unwrap().row().unwrap();
    assert!(row.degenerate);
    assert_eq!(row.geom_margin, None);
}
