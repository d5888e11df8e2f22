use csta::metrics::{kendall_tau, spearman_rho};
use proptest::prelude::*;

/// Direct pair counting.
fn tau_pairs(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).signum() * ((x[i] != x[j]) as i32 as f64);
            let b = (y[i] - y[j]).signum() * ((y[i] != y[j]) as i32 as f64);
            if a == 0.0 && b == 0.0 {
                continue;
            } else if a == 0.0 {
                tx += 1.0;
            } else if b == 0.0 {
                ty += 1.0;
            } else if a == b {
                c += 1.0;
            } else {
                d += 1.0;
            }
        }
    }
    let den: f64 = (c + d + tx) * (c + d + ty);
    (den > 0.0).then(|| (c - d) / den.sqrt())
}

/// Rank = 1 + #smaller + (#equal - 1)/2, by counting.
fn rank_count(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let less = v.iter().filter(|&&b| b < a).count() as f64;
            let eq = v.iter().filter(|&&b| b == a).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

fn rho_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (rank_count(x), rank_count(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

fn tied_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..6, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(-1.0f64..1.0, n),
        )
            .prop_map(|(a, b)| (a, b))
    })
}

proptest! {
    #[test]
    fn kendall_matches_pair_counting((x, y) in tied_pair()) {
        match tau_pairs(&x, &y) {
            Some(want) => prop_assert!((kendall_tau(&x, &y).unwrap() - want).abs() < 1e-9),
            None => prop_assert!(kendall_tau(&x, &y).is_err()),
        }
        match tau_pairs(&y, &x) {
            Some(want) => prop_assert!((kendall_tau(&y, &x).unwrap() - want).abs() < 1e-9),
            None => prop_assert!(kendall_tau(&y, &x).is_err()),
        }
    }

    #[test]
    fn spearman_matches_rank_counting((x, y) in tied_pair()) {
        match rho_oracle(&x, &y) {
            Some(want) => prop_assert!((spearman_rho(&x, &y).unwrap() - want).abs() < 1e-9),
            None => prop_assert!(spearman_rho(&x, &y).is_err()),
        }
    }

    #[test]
    fn monotone_transforms_leave_ranks_alone((x, y) in tied_pair()) {
        let fx: Vec<f64> = x.iter().map(|v| (v * 0.7).exp() + 3.0).collect();
        let fy: Vec<f64> = y.iter().map(|v| v.powi(3) * 5.0 - 1.0).collect();
        if let (Ok(a), Ok(b)) = (kendall_tau(&x, &y), kendall_tau(&fx, &fy)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        if let (Ok(a), Ok(b)) = (spearman_rho(&x, &y), spearman_rho(&fx, &fy)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn range_and_antisymmetry((x, y) in tied_pair()) {
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        if let Ok(t) = kendall_tau(&x, &y) {
            prop_assert!((-1.0..=1.0).contains(&t));
            prop_assert!((kendall_tau(&x, &neg).unwrap() + t).abs() < 1e-12);
        }
        if let Ok(r) = spearman_rho(&x, &y) {
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((spearman_rho(&x, &neg).unwrap() + r).abs() < 1e-12);
        }
    }
}
