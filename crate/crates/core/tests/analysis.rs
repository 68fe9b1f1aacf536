use dove::analysis::{linear_probe, pca_rgb, pearson, shuffled, LengthHistogram, Pca, ProbeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sx * sy)
}

#[test]
fn pearson_matches_covariance_over_deviations() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.4 * v + rng.random_range(-2.0..2.0)).collect();
        let r = pearson(&x, &y).unwrap();
        assert!((r - pearson_oracle(&x, &y)).abs() < 1e-9, "seed {seed}");
    }
}

#[test]
fn pearson_sign_cases() {
    let x: Vec<f64> = (0..10).map(f64::from).collect();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
    assert!(pearson(&x, &[1.0; 10]).is_err());
}

/// Largest eigenpair of a symmetric matrix by power iteration, then deflation.
fn power_iteration(cov: &[Vec<f64>], count: usize) -> Vec<(f64, Vec<f64>)> {
    let d = cov.len();
    let mut a = cov.to_vec();
    let mut out = Vec::new();
    for k in 0..count {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i + k) as f64 * 0.1).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| a[i][j] * v[j]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.iter().map(|x| x / norm).collect();
            lambda = norm;
        }
        for i in 0..d {
            for j in 0..d {
                a[i][j] -= lambda * v[i] * v[j];
            }
        }
        out.push((lambda, v));
    }
    out
}

#[test]
fn pca_agrees_with_power_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scales = [3.0, 2.0, 1.2, 0.7, 0.4, 0.2, 0.1, 0.05];
    let x: Vec<Vec<f64>> = gaussian_rows(&mut rng, 16, 8)
        .into_iter()
        .map(|r| r.iter().zip(scales).map(|(v, s)| v * s).collect())
        .collect();
    let pca = Pca::fit(&x).unwrap();
    let n = x.len() as f64;
    let cov: Vec<Vec<f64>> = (0..8)
        .map(|i| (0..8).map(|j| x.iter().map(|r| (r[i] - pca.mean[i]) * (r[j] - pca.mean[j])).sum::<f64>() / n).collect())
        .collect();
    for (k, (lambda, v)) in power_iteration(&cov, 3).into_iter().enumerate() {
        assert!((pca.eigenvalues[k] - lambda).abs() < 1e-5, "eigenvalue {k}");
        let dot: f64 = v.iter().zip(&pca.components[k]).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-5, "eigenvector {k} up to sign");
    }
}

#[test]
fn pca_eigenvalues_sorted_and_components_orthonormal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian_rows(&mut rng, 30, 6);
    let pca = Pca::fit(&x).unwrap();
    assert!(pca.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    assert!(pca.eigenvalues.iter().all(|&l| l >= 0.0));
    for i in 0..6 {
        for j in 0..6 {
            let dot: f64 = pca.components[i].iter().zip(&pca.components[j]).map(|(a, b)| a * b).sum();
            assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
        }
    }
}

#[test]
fn pca_full_projection_reconstructs_centered_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = gaussian_rows(&mut rng, 12, 5);
    let pca = Pca::fit(&x).unwrap();
    for row in &x {
        let z = pca.project(row, 5);
        for j in 0..5 {
            let back: f64 = (0..5).map(|k| z[k] * pca.components[k][j]).sum();
            assert!((back - (row[j] - pca.mean[j])).abs() < 1e-5);
        }
    }
}

#[test]
fn pca_of_rank_one_data_has_one_nonzero_eigenvalue() {
    let dir = [0.6, -0.8, 0.0];
    let x: Vec<Vec<f64>> = (0..10).map(|i| dir.iter().map(|d| d * (i as f64 - 4.5)).collect()).collect();
    let pca = Pca::fit(&x).unwrap();
    assert!(pca.eigenvalues[0] > 1.0);
    assert!(pca.eigenvalues[1..].iter().all(|&l| l < 1e-9));
    let dot: f64 = pca.components[0].iter().zip(dir).map(|(a, b)| a * b).sum();
    assert!((dot.abs() - 1.0).abs() < 1e-9);
}

#[test]
fn pca_rgb_stays_in_unit_cube() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian_rows(&mut rng, 16, 4);
    for c in pca_rgb(&x).unwrap() {
        assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(pca_rgb(&x[..2]).is_err());
}

fn sign_labelled(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian_rows(&mut rng, n, 6);
    let y = x.iter().map(|r| usize::from(r[0] > 0.0) + 2 * usize::from(r[3] > 0.0)).collect();
    (x, y)
}

#[test]
fn separable_labels_are_learned_exactly() {
    let (xt, yt) = sign_labelled(1, 300);
    let (xv, yv) = sign_labelled(2, 200);
    // keep a margin so the boundary is learnable from a finite sample
    let keep = |x: &[Vec<f64>], y: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        x.iter().zip(y).filter(|(r, _)| r[0].abs() > 0.3 && r[3].abs() > 0.3).map(|(r, &l)| (r.clone(), l)).unzip()
    };
    let (xt, yt) = keep(&xt, &yt);
    let (xv, yv) = keep(&xv, &yv);
    let r = linear_probe((&xt, &yt), (&xv, &yv), 4, &ProbeConfig { epochs: 400, ..Default::default() }).unwrap();
    assert_eq!(r.val_accuracy, 1.0, "{r:?}");
}

#[test]
fn shuffled_labels_sit_at_chance() {
    let (xt, yt) = sign_labelled(3, 400);
    let (xv, yv) = sign_labelled(4, 400);
    let r = linear_probe((&xt, &shuffled(&yt, 9)), (&xv, &shuffled(&yv, 10)), 4, &ProbeConfig::default()).unwrap();
    let sigma = (0.25f64 * 0.75 / 400.0).sqrt();
    assert!((r.val_accuracy - 0.25).abs() <= 3.0 * sigma, "{r:?}");
}

#[test]
fn probe_is_deterministic_and_beats_constant_baseline() {
    let (xt, yt) = sign_labelled(5, 200);
    let (xv, yv) = sign_labelled(6, 100);
    let cfg = ProbeConfig { epochs: 50, ..Default::default() };
    let a = linear_probe((&xt, &yt), (&xv, &yv), 4, &cfg).unwrap();
    let b = linear_probe((&xt, &yt), (&xv, &yv), 4, &cfg).unwrap();
    assert_eq!(a, b);
    let mut counts = [0usize; 4];
    yt.iter().for_each(|&y| counts[y] += 1);
    let baseline = *counts.iter().max().unwrap() as f64 / yt.len() as f64;
    assert!(a.train_accuracy >= baseline);
}

#[test]
fn probe_rejects_degenerate_splits() {
    let x = vec![vec![0.0, 1.0]; 4];
    assert!(linear_probe((&x, &[1, 1, 1, 1]), (&x, &[1, 1, 1, 1]), 2, &ProbeConfig::default()).is_err());
    assert!(linear_probe((&x, &[0, 1, 0, 1]), (&x, &[0, 1, 0, 1]), 1, &ProbeConfig::default()).is_err());
}

#[test]
fn mlp_probe_flag_runs() {
    let (xt, yt) = sign_labelled(7, 120);
    let (xv, yv) = sign_labelled(8, 60);
    let cfg = ProbeConfig { hidden: Some(16), epochs: 100, ..Default::default() };
    let r = linear_probe((&xt, &yt), (&xv, &yv), 4, &cfg).unwrap();
    assert!(r.val_accuracy > 0.5);
}

#[test]
fn histogram_counts_each_length() {
    let h = LengthHistogram::from_lengths(4, vec![1, 4, 4, 2]);
    assert_eq!(h.counts, vec![1, 1, 0, 2]);
    assert!(h.to_csv().starts_with("length,count\n1,1\n"));
}
