use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::SeededRng;

const LN_128: f64 = 4.852_030_263_919_617;

fn gaussian(n: usize, d: usize, std: f64, seed: u64) -> Tensor {
    Tensor::randn(&[n, d], std, &mut SeededRng::seed_from_u64(seed))
}

/// Columns of a random `n×d` matrix, orthonormalised.
fn orthonormal(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = SeededRng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for _ in 0..d {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    cols
}

/// `U diag(σ) Vᵀ` with random orthonormal `U` (n×d) and `V` (d×d).
fn with_spectrum(n: usize, sigma: &[f64], seed: u64) -> Tensor {
    let d = sigma.len();
    let u = orthonormal(n, d, seed);
    let v = orthonormal(d, d, seed + 1);
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            data[i * d + j] = (0..d).map(|k| u[k][i] * sigma[k] * v[k][j]).sum();
        }
    }
    Tensor::new(vec![n, d], data).unwrap()
}

#[test]
fn isotropic_gram_gives_equal_singular_values() {
    let d = 6;
    let mut data = vec![0.0; 2 * d * d];
    for j in 0..d {
        data[j * d + j] = 2f64.sqrt();
        data[(d + j) * d + j] = -(2f64.sqrt());
    }
    let sv = singular_spectrum(&Tensor::new(vec![2 * d, d], data).unwrap()).unwrap();
    assert!(sv.iter().all(|s| (s - 2.0).abs() < 1e-12), "{sv:?}");
}

#[test]
fn recovers_constructed_spectrum() {
    let sigma: Vec<f64> = (1..=16).rev().map(|s| s as f64).collect();
    let e = with_spectrum(40, &sigma, 9);
    let sv = singular_spectrum(&e).unwrap();
    for (a, b) in sv.iter().zip(&sigma) {
        assert!((a - b).abs() < 1e-8 * b, "{a} vs {b}");
    }
    // rank deficient
    let mut sigma = sigma;
    sigma[14] = 0.0;
    sigma[15] = 0.0;
    let sv = singular_spectrum(&with_spectrum(40, &sigma, 3)).unwrap();
    assert!(sv[14] < 1e-6 && sv[15] < 1e-6);
    assert!((sv[0] - 16.0).abs() < 1e-8 * 16.0);
}

#[test]
fn spectrum_stats_examples() {
    let (v, h) = spectrum_stats(&[1.5; 128]).unwrap();
    assert!(v.abs() < 1e-24 && (h - LN_128).abs() < 1e-12);
    let mut one = vec![0.0; 10];
    one[3] = 2.0;
    assert_eq!(spectrum_stats(&one).unwrap().1, 0.0);
    let (v, h) = spectrum_stats(&[2.0, 1.0, 1.0]).unwrap();
    assert!((h - 1.5 * 2f64.ln()).abs() < 1e-15);
    assert!((h - 1.0397).abs() < 1e-4);
    assert!((v - 2.0 / 9.0).abs() < 1e-15);
    assert_eq!(spectrum_stats(&[0.0; 4]).unwrap(), (0.0, 0.0));
    assert!(spectrum_stats(&[]).is_err());
    assert!(spectrum_stats(&[1.0, -1.0]).is_err());
}

#[test]
fn covariance_entropy_examples() {
    let h = covariance_entropy(&gaussian(10_000, 128, 1.0, 1)).unwrap();
    assert!((h - LN_128).abs() < 0.02, "{h}");
    let dir: Vec<f64> = (0..8).map(|j| j as f64 - 3.5).collect();
    let mut r = SeededRng::seed_from_u64(2);
    let data: Vec<f64> = (0..50)
        .flat_map(|_| {
            let a: f64 = StandardNormal.sample(&mut r);
            dir.iter().map(move |x| a * x).collect::<Vec<_>>()
        })
        .collect();
    let h = covariance_entropy(&Tensor::new(vec![50, 8], data).unwrap()).unwrap();
    assert!(h < 1e-6, "{h}");
}

fn sphere(n: usize, d: usize, seed: u64) -> Tensor {
    normalize_rows(&gaussian(n, d, 1.0, seed))
}

#[test]
fn isotropy_examples() {
    let s = isotropy(&sphere(10_000, 16, 4)).unwrap();
    assert!((0.9..=1.0).contains(&s), "{s}");
    let mut e = gaussian(2000, 16, 1.0, 5);
    for row in e.data_mut().chunks_mut(16) {
        row[0] *= 100.0;
    }
    let s = isotropy(&e).unwrap();
    assert!(s < 0.05, "{s}");
}

#[test]
fn kl_examples() {
    // rows ±e_j: covariance is an exact multiple of I
    let d = 5;
    let mut data = vec![0.0; 2 * d * d];
    for j in 0..d {
        data[j * d + j] = 1.0;
        data[(d + j) * d + j] = -1.0;
    }
    let (kl, floored) = kl_to_gaussian(&Tensor::new(vec![2 * d, d], data).unwrap()).unwrap();
    assert!(kl.abs() < 1e-12 && !floored, "{kl}");
    // Σ̂ = diag(4, 1) from four points
    let (a, b) = (6f64.sqrt(), 1.5f64.sqrt());
    let e = Tensor::new(vec![4, 2], vec![a, 0.0, -a, 0.0, 0.0, b, 0.0, -b]).unwrap();
    let (kl, _) = kl_to_gaussian(&e).unwrap();
    let want = 0.5 * (2.0 - 2.0 + 2.0 * 2.5f64.ln() - 4f64.ln());
    assert!((kl - want).abs() < 1e-12);
    assert!((kl - 0.2231).abs() < 1e-4);
    // singular covariance is floored and flagged
    let (kl, floored) = kl_to_gaussian(&gaussian(3, 6, 1.0, 1)).unwrap();
    assert!(floored && kl > 0.0);
}

#[test]
fn random_init_signature() {
    let e = gaussian(1008, 128, 0.02, 11);
    let (_, h) = spectrum_stats(&singular_spectrum(&e).unwrap()).unwrap();
    assert!((h - LN_128).abs() < 0.02, "{h}");
    assert!(isotropy(&e).unwrap() > 0.5);
    // the plug-in KL is biased upward by ~D²/(4N); it drops below 1 at N = 10⁴
    let (kl, _) = kl_to_gaussian(&gaussian(10_000, 128, 0.02, 12)).unwrap();
    assert!(kl < 1.0, "{kl}");
}

#[test]
fn scaling_one_direction_is_monotone() {
    let base = gaussian(400, 12, 1.0, 6);
    let scaled = |s: f64| {
        let mut e = base.clone();
        for row in e.data_mut().chunks_mut(12) {
            row[2] *= s;
        }
        e
    };
    let var = |e: &Tensor| spectrum_stats(&singular_spectrum(e).unwrap()).unwrap().0;
    let (mut pv, mut pi) = (var(&base), isotropy(&base).unwrap());
    for s in [2.0, 10.0, 100.0] {
        let e = scaled(s);
        let (v, i) = (var(&e), isotropy(&e).unwrap());
        assert!(v > pv && i < pi, "s={s}: {v} {i}");
        (pv, pi) = (v, i);
    }
}

#[test]
fn row_permutation_invariance() {
    let e = gaussian(300, 10, 1.0, 7);
    let mut order: Vec<usize> = (0..300).collect();
    order.shuffle(&mut SeededRng::seed_from_u64(1));
    let p = Tensor::new(vec![300, 10], order.iter().flat_map(|&i| e.row(i).to_vec()).collect()).unwrap();
    let (a, b) = (diagnose("a", &e, false).unwrap(), diagnose("b", &p, false).unwrap());
    for (x, y) in [
        (a.sv_variance, b.sv_variance),
        (a.sv_entropy, b.sv_entropy),
        (a.cov_entropy, b.cov_entropy),
        (a.isotropy, b.isotropy),
        (a.kl_to_gaussian, b.kl_to_gaussian),
    ] {
        assert!((x - y).abs() < 1e-9 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn report_invariants_and_table() {
    let e = gaussian(500, 16, 0.5, 8);
    let r = diagnose("init", &e, false).unwrap();
    let ln_d = 16f64.ln();
    assert!(r.sv_entropy <= ln_d && r.cov_entropy <= ln_d + 1e-12);
    assert!(r.isotropy > 0.0 && r.isotropy <= 1.0);
    assert!(r.kl_to_gaussian >= 0.0);
    assert_eq!(r.top5_singular.len(), 5);
    let n = diagnose("normed", &e, true).unwrap();
    assert!(n.normalized);
    let table = comparison_table(&[r, n]);
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("init") && table.contains("isotropy"));
}

#[test]
fn separable_probe() {
    let (n, c) = (6000, 26);
    let e = gaussian(n, c, 1.0, 13);
    let ids: Vec<String> = (0..n).map(|i| format!("m{i}")).collect();
    let rows = (0..n)
        .map(|i| {
            let g = (0..c).filter(|&k| e.row(i)[k] > 0.0).map(|k| format!("g{k:02}")).collect();
            (ids[i].clone(), g)
        })
        .collect();
    let labels = GenreLabels::new(rows);
    assert_eq!(labels.classes.len(), c);
    let rep = linear_probe(&e, &ids, &labels, &ProbeConfig::default()).unwrap();
    assert!(rep.f1 > 0.95, "{rep:?}");
    assert_eq!(rep.train_items + rep.test_items, n);
}

#[test]
fn uninformative_probe_is_bounded_by_priors() {
    let (n, c) = (600, 5);
    let e = Tensor::full(&[n, 8], 0.3);
    let mut r = SeededRng::seed_from_u64(14);
    let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    let rows: Vec<(String, Vec<String>)> = ids
        .iter()
        .map(|id| {
            let g = (0..c).filter(|&k| r.random_bool(0.6 / (k + 1) as f64)).map(|k| k.to_string()).collect();
            (id.clone(), g)
        })
        .collect();
    let labels = GenreLabels::new(rows);
    let cfg = ProbeConfig::default();
    let rep = linear_probe(&e, &ids, &labels, &cfg).unwrap();
    // rebuild the same held-out rows to compute the bound
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeededRng::seed_from_u64(cfg.seed));
    let test = &order[..rep.test_items];
    let k = labels.classes.len();
    let mut truth = vec![false; test.len() * k];
    for (row, &i) in test.iter().enumerate() {
        for &cl in &labels.labels[&ids[i]] {
            truth[row * k + cl] = true;
        }
    }
    assert!(rep.f1 <= constant_f1_bound(&truth, k) + 1e-12, "{rep:?}");
}

#[test]
fn probe_drops_unlabelled_and_needs_file() {
    let e = gaussian(50, 4, 1.0, 1);
    let ids: Vec<String> = (0..50).map(|i| i.to_string()).collect();
    let labels = GenreLabels::new((0..40).map(|i| (i.to_string(), vec!["a".to_string()])).collect());
    let rep = linear_probe(&e, &ids, &labels, &ProbeConfig::default()).unwrap();
    assert_eq!(rep.dropped, 10);
    let err = read_genre_labels(Path::new("/nonexistent/genres.tsv")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("/nonexistent/genres.tsv"));
}

use std::path::Path;

#[test]
fn export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let e = gaussian(30, 7, 0.02, 15);
    let p = dir.path().join("e.csv");
    export_embeddings(&p, &e, None).unwrap();
    let back = read_embeddings_csv(&p).unwrap();
    assert_eq!(back, e);
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 31);
    let n = normalize_rows(&e);
    export_embeddings(&p, &n, None).unwrap();
    for row in read_embeddings_csv(&p).unwrap().data().chunks(7) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn item_rows_skip_padding() {
    let cfg = crate::model::ModelConfig {
        dim: 4,
        ffn_dim: 8,
        max_len: 3,
        ..Default::default()
    };
    let (_, store) = crate::model::AdRec::new(&cfg, 6, 1).unwrap();
    let e = item_embeddings(&store).unwrap();
    assert_eq!(e.shape(), &[6, 4]);
    let full = store.get(store.find(EMBEDDING).unwrap());
    assert_eq!(e.row(0), full.row(1));
}

proptest! {
    #[test]
    fn entropy_never_exceeds_log_len(sv in proptest::collection::vec(0.0f64..1e3, 1..64)) {
        let (v, h) = spectrum_stats(&sv).unwrap();
        prop_assert!(h <= (sv.len() as f64).ln() + 1e-12);
        prop_assert!(h >= 0.0 && v >= 0.0);
    }
}
