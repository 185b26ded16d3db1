#[path = "support/checks.rs"]
mod checks;

use dfqlab::attnsim::{average_ranks, rank_correlation, ssim, AttnMap, RankKind};
use dfqlab::quant::{asymmetric_params, fake_quant_scalar, symmetric_params};
use dfqlab::LabError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn quantizer_matches_scalar_oracle_on_exhaustive_grid() {
    let n = checks::quantizer_oracle().unwrap();
    assert!(n > 3000, "only {n} values compared");
}

#[test]
fn minmax_parameters_by_hand() {
    // k = 4 over [-1, 2]: s = 15/3, z = 5*(-1) + 8
    assert_eq!(asymmetric_params(-1.0, 2.0, 4), (5.0, 3.0));
    assert_eq!(fake_quant_scalar(-1.0, 5.0, 3.0, 4), -1.0);
    assert_eq!(fake_quant_scalar(2.0, 5.0, 3.0, 4), 2.0);
    // 0.33*5 - 3 = -1.35 -> -1 -> (-1 + 3)/5
    assert_eq!(fake_quant_scalar(0.33, 5.0, 3.0, 4), 0.4);
    // k = 8 symmetric, max |w| = 1.27: s = 127/1.27
    let (s, z) = symmetric_params(1.27, 8);
    assert_eq!(z, 0.0);
    assert!((s - 100.0).abs() < 1e-12);
}

#[test]
fn asymmetric_grid_hits_both_ends_of_the_integer_range() {
    for k in [2u8, 4, 8] {
        let (s, z) = checks::oracle_asym(-0.7, 1.9, k);
        let q = |x: f64| (x * s - z).round();
        assert_eq!(q(-0.7), -(2f64.powi(k as i32 - 1)));
        assert_eq!(q(1.9), 2f64.powi(k as i32 - 1) - 1.0);
    }
}

#[test]
fn ssim_matches_luminance_contrast_structure_product() {
    let gap = checks::ssim_oracle_gap(50, 3);
    assert!(gap < 1e-12, "largest deviation {gap:e}");
}

#[test]
fn ssim_bound_symmetry_identity() {
    checks::ssim_properties(1000, 4).unwrap();
}

#[test]
fn ssim_of_an_inverted_map_is_negative() {
    let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
    // mirrored about the mean, so luminance and contrast agree
    let m = x.iter().sum::<f64>() / 16.0;
    let y: Vec<f64> = x.iter().map(|v| 2.0 * m - v).collect();
    let a = AttnMap::new(4, x).unwrap();
    let b = AttnMap::new(4, y).unwrap();
    assert!(ssim(&a, &b).unwrap() < -0.9);
}

fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    // ranks by counting, ties averaged
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let below = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn brute_kendall_b(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut s, mut n1, mut n2, mut n0) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in 0..n {
            if i >= j {
                continue;
            }
            n0 += 1.0;
            let a = (x[i] - x[j]).signum() * f64::from(u8::from(x[i] != x[j]));
            let b = (y[i] - y[j]).signum() * f64::from(u8::from(y[i] != y[j]));
            s += a * b;
            if x[i] == x[j] {
                n1 += 1.0;
            }
            if y[i] == y[j] {
                n2 += 1.0;
            }
        }
    }
    s / ((n0 - n1) * (n0 - n2)).sqrt()
}

#[test]
fn rank_correlations_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..200 {
        let n = rng.random_range(2..30);
        // coarse values force ties
        let levels = if trial % 2 == 0 { 4 } else { 1000 };
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(0..levels) as f64).collect();
        let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
        if constant(&x) || constant(&y) {
            assert!(matches!(
                rank_correlation(&x, &y, RankKind::Spearman),
                Err(LabError::DegenerateSeries(_))
            ));
            continue;
        }
        let s = rank_correlation(&x, &y, RankKind::Spearman).unwrap();
        let k = rank_correlation(&x, &y, RankKind::Kendall).unwrap();
        assert!((s - brute_spearman(&x, &y)).abs() < 1e-12, "spearman trial {trial}");
        assert!((k - brute_kendall_b(&x, &y)).abs() < 1e-12, "kendall trial {trial}");
    }
}

#[test]
fn rank_correlation_reference_values() {
    // hand-computed: one swapped pair out of five
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [1.0, 3.0, 2.0, 4.0, 5.0];
    let s = rank_correlation(&x, &y, RankKind::Spearman).unwrap();
    let k = rank_correlation(&x, &y, RankKind::Kendall).unwrap();
    assert!((s - 0.9).abs() < 1e-12);
    assert!((k - 0.8).abs() < 1e-12);
    assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
}
