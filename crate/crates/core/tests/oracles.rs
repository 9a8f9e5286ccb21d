//! The discrete-joint oracle suite: MI gradient, normalization
//! cancellation, Fisher expectation and the cross-entropy decomposition.

use std::time::Instant;

use mist_core::oracles::{
    ce_gradient_decomposition, check_fisher, check_mi_gradient, check_normalization, check_normalization_cancellation,
    exact_mi, finite_difference, fisher_expectation_check, log_log_slope, max_abs_diff, mi_gradient_full,
    mi_gradient_simplified, normalization_residual, random_joints, DiscreteJoint,
};

/// `I(X;Y)` from the logits with nothing shared with the library code.
fn mi_double_loop(nx: usize, ny: usize, logits: &[f64]) -> f64 {
    let mut z = 0.0;
    for v in logits {
        z += v.exp();
    }
    let p = |x: usize, y: usize| logits[x * ny + y].exp() / z;
    let mut total = 0.0;
    for x in 0..nx {
        let mut px = 0.0;
        for y in 0..ny {
            px += p(x, y);
        }
        for y in 0..ny {
            let mut py = 0.0;
            for xx in 0..nx {
                py += p(xx, y);
            }
            total += p(x, y) * (p(x, y) / (px * py)).ln();
        }
    }
    total
}

#[test]
fn mi_matches_double_loop_and_is_nonnegative() {
    for seed in 0..50 {
        let j = DiscreteJoint::random(3, 5, seed).unwrap();
        let mi = exact_mi(&j);
        assert!((mi - mi_double_loop(3, 5, j.logits())).abs() < 1e-12);
        assert!(mi >= -1e-12);
    }
    for j in random_joints(200, 4) {
        assert!(exact_mi(&j) >= -1e-12);
    }
}

#[test]
fn mi_gradient_identity() {
    let start = Instant::now();
    let checks = check_mi_gradient(100, 0);
    let elapsed = start.elapsed().as_secs_f64();
    for c in &checks {
        assert!(c.passed, "{c:?}");
    }
    assert!(elapsed < 5.0, "took {elapsed} s");

    // The same property checked directly, with sizes reaching 8×8.
    let joints = random_joints(100, 17);
    assert!(joints.iter().any(|j| j.nx() == 8 && j.ny() == 8));
    for j in &joints {
        let g = mi_gradient_simplified(j);
        assert!(max_abs_diff(&g, &finite_difference(j, 1e-6, exact_mi)) < 1e-6);
        assert!(max_abs_diff(&g, &mi_gradient_full(j)) < 1e-10);
    }
}

#[test]
fn normalization_cancels() {
    for c in check_normalization(100, 3) {
        assert!(c.passed, "{c:?}");
    }
    let j = DiscreteJoint::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(check_normalization_cancellation(&j) < 1e-12);

    // Hand-built Jacobian for the same 2×2 table.
    let q = j.probs();
    let mut worst = 0.0f64;
    for ab in 0..4 {
        let dq: Vec<f64> = (0..4)
            .map(|c| q[c] * (if c == ab { 1.0 } else { 0.0 } - q[ab]))
            .collect();
        let dpx = [dq[0] + dq[1], dq[2] + dq[3]];
        let dpy = [dq[0] + dq[2], dq[1] + dq[3]];
        worst = worst.max((dpx[0] + dpx[1]).abs()).max((dpy[0] + dpy[1]).abs());
    }
    assert!(worst < 1e-12);

    let mut bad = q.clone();
    bad[0] *= 1.5;
    assert!(normalization_residual(&bad, 2, 2).unwrap() > 1e-3);
    assert!(normalization_residual(&bad, 3, 2).is_err());
}

#[test]
fn fisher_expectation() {
    let start = Instant::now();
    for c in check_fisher(0) {
        assert!(c.passed, "{c:?}");
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);

    let c = fisher_expectation_check(10, 0.0, 1.0, 0).unwrap();
    assert_eq!(c.predicted, 0.1);
    assert!((c.empirical - 0.1).abs() <= 0.005, "{c:?}");

    let exact = fisher_expectation_check(7, 1.5, 0.0, 0).unwrap();
    assert_eq!(exact.empirical, 2.25);

    // Doubling N halves the excess over μ².
    let mu = 1.0;
    let excess: Vec<f64> = [5, 10, 20, 40]
        .iter()
        .map(|&n| fisher_expectation_check(n, mu, 1.0, 9).unwrap().empirical - mu * mu)
        .collect();
    for w in excess.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio - 2.0).abs() < 0.25, "ratio {ratio}");
    }
    let slope = log_log_slope(&[5.0, 10.0, 20.0, 40.0], &excess);
    assert!((slope + 1.0).abs() < 0.1, "slope {slope}");

    assert!(fisher_expectation_check(0, 0.0, 1.0, 0).is_err());
    assert!(fisher_expectation_check(3, 0.0, -1.0, 0).is_err());
}

fn log_conditional(j: &DiscreteJoint, x: usize, y: usize) -> f64 {
    j.log_conditional(x, y).unwrap()
}

#[test]
fn cross_entropy_decomposition() {
    for seed in 0..50 {
        let j = DiscreteJoint::random(1 + seed as usize % 4, 2 + seed as usize % 5, seed).unwrap();
        let (x, y) = (seed as usize % j.nx(), (seed as usize * 7) % j.ny());
        let (joint, marginal) = ce_gradient_decomposition(&j, x, y).unwrap();
        let sum: Vec<f64> = joint.iter().zip(&marginal).map(|(a, b)| a + b).collect();
        let fd = finite_difference(&j, 1e-6, |k| log_conditional(k, x, y));
        assert!(max_abs_diff(&sum, &fd) < 1e-6, "seed {seed}");
    }

    let uniform = DiscreteJoint::new(3, 3, vec![0.0; 9]).unwrap();
    let (_, marginal) = ce_gradient_decomposition(&uniform, 1, 2).unwrap();
    assert!(marginal.iter().any(|m| m.abs() > 1e-3));
    assert!(mi_gradient_simplified(&uniform).iter().all(|g| g.abs() < 1e-15));

    let single = DiscreteJoint::new(1, 1, vec![0.4]).unwrap();
    let (joint, marginal) = ce_gradient_decomposition(&single, 0, 0).unwrap();
    assert!(joint.iter().chain(&marginal).all(|v| v.abs() < 1e-15));

    assert!(ce_gradient_decomposition(&uniform, 3, 0).is_err());
    assert!(ce_gradient_decomposition(&uniform, 0, 3).is_err());
}
