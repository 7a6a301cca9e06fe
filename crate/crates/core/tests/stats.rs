use archivist_core::stats::{average_ranks, cohens_kappa, mann_whitney_u, spearman_rho, PMethod, SufficientStats, EXACT_MAX_N};
use proptest::prelude::*;
use rand::Rng;

mod oracles;
use oracles::{kappa, midranks, mwu_exact, seeded, spearman, tied_sample, u_pairwise};

#[test]
fn kappa_hand_cases() {
    assert_eq!(cohens_kappa(&[1, 0, 1, 1], &[1, 0, 1, 1]).unwrap(), 1.0);
    // p_o = 0.5, p_e = 0.5
    let a = [true, true, false, false];
    let b = [true, false, true, false];
    assert!(cohens_kappa(&a, &b).unwrap().abs() < 1e-15);
}

#[test]
fn kappa_matches_confusion_matrix_on_random_fixtures() {
    let mut rng = seeded(1);
    for i in 0..150 {
        let n = if i == 0 { 20 } else { rng.random_range(2..60) };
        let cats = rng.random_range(2..5u8);
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..cats)).collect();
        let b: Vec<u8> = a.iter().map(|&x| if rng.random_bool(0.6) { x } else { rng.random_range(0..cats) }).collect();
        let got = cohens_kappa(&a, &b).unwrap();
        assert!((got - kappa(&a, &b)).abs() < 1e-9, "fixture {i}: {got} vs {}", kappa(&a, &b));
    }
}

#[test]
fn spearman_fixed_cases() {
    let x: Vec<f64> = (1..=10).map(f64::from).collect();
    let up: Vec<f64> = x.iter().map(|v| v * v + 1.0).collect();
    let down: Vec<f64> = x.iter().rev().copied().collect();
    assert!((spearman_rho(&x, &up).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman_rho(&x, &down).unwrap() + 1.0).abs() < 1e-12);
    // ten pairs with ties, ranked then correlated by hand:
    // rx = 1.5 1.5 3 4.5 4.5 6 7 8 9.5 9.5
    // ry = 2 2 2 5 4 6 8.5 7 8.5 10
    let x = [1.0, 1.0, 2.0, 3.0, 3.0, 4.0, 5.0, 6.0, 7.0, 7.0];
    let y = [2.0, 2.0, 2.0, 5.0, 4.0, 6.0, 8.0, 7.0, 8.0, 9.0];
    let rx = [1.5, 1.5, 3.0, 4.5, 4.5, 6.0, 7.0, 8.0, 9.5, 9.5];
    let ry = [2.0, 2.0, 2.0, 5.0, 4.0, 6.0, 8.5, 7.0, 8.5, 10.0];
    assert_eq!(average_ranks(&x), rx);
    assert_eq!(average_ranks(&y), ry);
    let mean = 5.5;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mean) * (a - mean)).sum();
    let syy: f64 = ry.iter().map(|b| (b - mean) * (b - mean)).sum();
    let want = sxy / (sxx * syy).sqrt();
    assert!((spearman_rho(&x, &y).unwrap() - want).abs() < 1e-12);
    assert!(spearman_rho(&[1.0, 1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn spearman_matches_rank_then_pearson() {
    let mut rng = seeded(2);
    let mut done = 0;
    while done < 150 {
        let n = rng.random_range(3..40);
        let x = tied_sample(&mut rng, n);
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(0..3) as f64).collect();
        let Ok(got) = spearman_rho(&x, &y) else { continue };
        assert!((got - spearman(&x, &y)).abs() < 1e-9);
        done += 1;
    }
}

#[test]
fn mwu_hand_cases() {
    let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert_eq!(r.u_a, 0.0);
    assert_eq!(r.u_b, 9.0);
    assert_eq!(r.method, PMethod::Exact);
    // 2 of 20 splits are at least this extreme
    assert!((r.p - 0.1).abs() < 1e-12);
    let r = mann_whitney_u(&[2.0], &[2.0]).unwrap();
    assert_eq!(r.u_a, 0.5);
    assert_eq!(r.p, 1.0);
}

#[test]
fn mwu_exact_matches_enumeration() {
    let mut rng = seeded(3);
    for i in 0..150 {
        let (na, nb) = if i < 20 { (5, 5) } else { (rng.random_range(1..8), rng.random_range(1..6)) };
        if na + nb > EXACT_MAX_N {
            continue;
        }
        let a = tied_sample(&mut rng, na);
        let b: Vec<f64> = tied_sample(&mut rng, nb).into_iter().map(|v| v + 0.5).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        let (u, p) = mwu_exact(&a, &b);
        assert_eq!(r.method, PMethod::Exact);
        assert!((r.u_a - u).abs() < 1e-9);
        assert!((r.p - p).abs() < 1e-9, "fixture {i}: {} vs {p}", r.p);
    }
}

#[test]
fn mwu_large_samples_use_normal_approximation() {
    let a: Vec<f64> = (0..20).map(f64::from).collect();
    let b: Vec<f64> = (10..30).map(f64::from).collect();
    let r = mann_whitney_u(&a, &b).unwrap();
    assert_eq!(r.method, PMethod::Normal);
    assert!(r.p > 0.0 && r.p < 0.01);
    // separated samples of six each: p is 2 / C(12, 6)
    let r = mann_whitney_u(&[0.1; 6].iter().enumerate().map(|(i, v)| v + i as f64).collect::<Vec<_>>(), &[10.0, 11.0, 12.0, 13.0, 14.0, 15.0]).unwrap();
    assert!((r.p - 2.0 / 924.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn kappa_identical_is_one(v in prop::collection::vec(0u8..4, 1..50)) {
        prop_assert_eq!(cohens_kappa(&v, &v).unwrap(), 1.0);
    }

    #[test]
    fn kappa_is_symmetric(pairs in prop::collection::vec((0u8..3, 0u8..3), 1..50)) {
        let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        prop_assert!((cohens_kappa(&a, &b).unwrap() - cohens_kappa(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rho_of_monotone_maps_is_plus_or_minus_one(raw in prop::collection::btree_set(-1000i32..1000, 3..40)) {
        let x: Vec<f64> = raw.iter().map(|v| *v as f64).collect();
        let up: Vec<f64> = x.iter().map(|v| v.powi(3) + 7.0).collect();
        let down: Vec<f64> = x.iter().map(|v| -(v / 100.0).exp()).collect();
        prop_assert!((spearman_rho(&x, &up).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((spearman_rho(&x, &down).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rho_is_invariant_under_increasing_transforms(x in prop::collection::vec(0i32..10, 3..30), y in prop::collection::vec(0i32..10, 3..30)) {
        let n = x.len().min(y.len());
        let x: Vec<f64> = x[..n].iter().map(|v| *v as f64).collect();
        let y: Vec<f64> = y[..n].iter().map(|v| *v as f64).collect();
        if let Ok(r) = spearman_rho(&x, &y) {
            let tx: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
            let ty: Vec<f64> = y.iter().map(|v| v * v * v).collect();
            prop_assert!((spearman_rho(&tx, &ty).unwrap() - r).abs() < 1e-12);
        }
    }

    #[test]
    fn u_statistics_sum_to_product(a in prop::collection::vec(0u8..8, 1..25), b in prop::collection::vec(0u8..8, 1..25)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        prop_assert!((r.u_a + r.u_b - (a.len() * b.len()) as f64).abs() < 1e-9);
        prop_assert!((r.u_a - u_pairwise(&a, &b)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&r.p));
    }

    #[test]
    fn average_ranks_match_counting(x in prop::collection::vec(0u8..6, 1..40)) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        prop_assert_eq!(average_ranks(&x), midranks(&x));
    }

    #[test]
    fn sufficient_stats_merge_is_concatenation(a in prop::collection::vec(0.0f64..1.0, 0..30), b in prop::collection::vec(0.0f64..1.0, 0..30)) {
        let sa: SufficientStats = a.iter().copied().collect();
        let sb: SufficientStats = b.iter().copied().collect();
        let all: SufficientStats = a.iter().chain(&b).copied().collect();
        let m = sa.merge(&sb);
        prop_assert_eq!(m.n, all.n);
        prop_assert!((m.sum - all.sum).abs() < 1e-9);
        prop_assert!((m.sum_sq - all.sum_sq).abs() < 1e-9);
        if let (Some(x), Some(y)) = (m.mean(), all.mean()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn standard_error_needs_two_values() {
    let s: SufficientStats = [0.25].into_iter().collect();
    assert_eq!(s.mean(), Some(0.25));
    assert_eq!(s.se(), None);
    let s: SufficientStats = [0.0, 1.0].into_iter().collect();
    assert!((s.se().unwrap() - 0.5).abs() < 1e-12);
}
