use proptest::prelude::*;
use sngp::linalg::{Matrix, RngState};
use sngp::metrics::{ece, PredictionSet};
use sngp::theory::{
    bregman_entropy, bregman_score, l1_ece_bound_check, max_entropy_oracle, minimax_oracle,
    mixture_predictive, pointwise_score, ScoringRule, SimplexGrid,
};

const RULES: [ScoringRule; 2] = [ScoringRule::Brier, ScoringRule::Log];

/// Uniform draw from the simplex (normalized exponentials).
fn random_simplex(k: usize, rng: &mut RngState) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -rng.uniform(1e-12, 1.0).ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn within_one_step_of_uniform(p: &[f64], step: f64) -> bool {
    let u = 1.0 / p.len() as f64;
    p.iter().all(|&v| (v - u).abs() <= step + 1e-12)
}

#[test]
fn minimax_and_max_entropy_agree_on_uniform() {
    let cases = [
        (2, 0.05),
        (3, 0.05),
        (2, 0.01),
        (4, 0.05),
    ];
    for (k, step) in cases {
        for rule in RULES {
            let mm = minimax_oracle(k, step, rule).unwrap();
            let me = max_entropy_oracle(k, step, rule).unwrap();
            assert_eq!(mm.point, me.point, "K={k} step={step} {}", rule.name());
            assert!(within_one_step_of_uniform(&mm.point, step), "{:?}", mm.point);
            let steps = (1.0 / step).round() as usize;
            if steps.is_multiple_of(k) {
                // uniform is a grid point: the game value is its entropy
                assert!((mm.value - me.value).abs() < 1e-9, "{} vs {}", mm.value, me.value);
            }
        }
    }
    let r = minimax_oracle(2, 0.05, ScoringRule::Brier).unwrap();
    assert_eq!(r.point, vec![0.5, 0.5]);
    let r = max_entropy_oracle(2, 0.01, ScoringRule::Brier).unwrap();
    assert_eq!(r.point, vec![0.5, 0.5]);
}

#[test]
fn uniform_beats_one_hot_entropy() {
    for rule in RULES {
        for k in 2..6 {
            let u = vec![1.0 / k as f64; k];
            let hu = bregman_entropy(&u, rule).unwrap();
            for j in 0..k {
                let mut e = vec![0.0; k];
                e[j] = 1.0;
                assert!(hu > bregman_entropy(&e, rule).unwrap());
            }
        }
    }
}

#[test]
fn grid_refusal_reports_size() {
    let err = minimax_oracle(8, 0.01, ScoringRule::Brier).unwrap_err();
    assert!(err.to_string().contains("grid too large"), "{err}");
    assert_eq!(SimplexGrid::size_for(8, 100), 26_075_972_546);
}

#[test]
fn strict_propriety_on_random_pairs() {
    let mut rng = RngState::new(1);
    for rule in RULES {
        let mut min_margin = f64::INFINITY;
        for _ in 0..100 {
            let k = 2 + (rng.next_u64() % 4) as usize;
            let p = random_simplex(k, &mut rng);
            let q = random_simplex(k, &mut rng);
            // expectation over y ~ q of the pointwise score, computed exactly
            let expected = |pred: &[f64]| -> f64 {
                (0..k)
                    .map(|y| q[y] * pointwise_score(pred, y, rule).unwrap())
                    .sum()
            };
            let margin = expected(&p) - expected(&q);
            min_margin = min_margin.min(margin);
            let direct = bregman_score(&p, &q, rule).unwrap();
            assert!((direct - expected(&p)).abs() < 1e-12);
        }
        assert!(min_margin > 0.0, "{}: margin {min_margin}", rule.name());
    }
}

#[test]
fn expected_score_matches_monte_carlo() {
    let mut rng = RngState::new(2);
    for rule in RULES {
        let p = random_simplex(3, &mut rng);
        let q = random_simplex(3, &mut rng);
        let n = 1_000_000;
        let scores: Vec<f64> = (0..3).map(|y| pointwise_score(&p, y, rule).unwrap()).collect();
        let mut total = 0.0;
        for _ in 0..n {
            let u = rng.uniform(0.0, 1.0);
            let y = if u < q[0] {
                0
            } else if u < q[0] + q[1] {
                1
            } else {
                2
            };
            total += scores[y];
        }
        let mc = total / n as f64;
        let exact = bregman_score(&p, &q, rule).unwrap();
        assert!((mc - exact).abs() < 1e-3, "{}: {mc} vs {exact}", rule.name());
    }
}

#[test]
fn l1_bound_holds_for_exact_model() {
    let mut rng = RngState::new(3);
    let truth = Matrix::from_rows(&(0..50).map(|_| random_simplex(3, &mut rng)).collect::<Vec<_>>())
        .unwrap();
    let c = l1_ece_bound_check(&truth, &truth, 100_000, &mut rng).unwrap();
    assert_eq!(c.empirical_l1, 0.0);
    assert!(c.holds, "{c:?}");
}

#[test]
fn l1_bound_holds_for_overconfident_model() {
    let mut rng = RngState::new(4);
    let mut truth = Vec::new();
    let mut model = Vec::new();
    for _ in 0..100 {
        let p = rng.uniform(0.5, 0.75);
        truth.push(vec![p, 1.0 - p]);
        model.push(vec![p + 0.2, 0.8 - p]);
    }
    let truth = Matrix::from_rows(&truth).unwrap();
    let model = Matrix::from_rows(&model).unwrap();
    let c = l1_ece_bound_check(&model, &truth, 100_000, &mut rng).unwrap();
    assert!((c.empirical_l1 - 0.2).abs() < 1e-12);
    assert!((c.empirical_ece - 0.2).abs() < 0.02, "{c:?}");
    assert!(c.holds, "{c:?}");
}

#[test]
fn l1_bound_holds_in_random_trials() {
    let mut rng = RngState::new(5);
    for trial in 0..20 {
        let rows = 200;
        let truth: Vec<Vec<f64>> = (0..rows).map(|_| random_simplex(3, &mut rng)).collect();
        let model: Vec<Vec<f64>> = (0..rows).map(|_| random_simplex(3, &mut rng)).collect();
        let c = l1_ece_bound_check(
            &Matrix::from_rows(&model).unwrap(),
            &Matrix::from_rows(&truth).unwrap(),
            100_000,
            &mut rng,
        )
        .unwrap();
        assert!(c.holds, "trial {trial}: {c:?}");
    }
}

#[test]
fn calibrated_predictor_has_small_ece() {
    let mut rng = RngState::new(6);
    let n = 100_000;
    let mut probs = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let p = rng.uniform(0.0, 1.0);
        probs.row_mut(i).copy_from_slice(&[1.0 - p, p]);
        labels.push(usize::from(rng.uniform(0.0, 1.0) < p));
    }
    let e = ece(&PredictionSet::new(probs, labels).unwrap(), 15).unwrap();
    assert!(e <= 0.02, "ECE {e}");
}

proptest! {
    #[test]
    fn mixture_stays_on_simplex(seed in any::<u64>(), k in 2usize..8, w in 0.0f64..=1.0) {
        let p = random_simplex(k, &mut RngState::new(seed));
        let m = mixture_predictive(&p, w).unwrap();
        prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(m.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn score_never_below_entropy_of_truth(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = RngState::new(seed);
        let p = random_simplex(k, &mut rng);
        let q = random_simplex(k, &mut rng);
        for rule in RULES {
            let s = bregman_score(&p, &q, rule).unwrap();
            let h = bregman_entropy(&q, rule).unwrap();
            prop_assert!(s >= h - 1e-12);
        }
    }
}
