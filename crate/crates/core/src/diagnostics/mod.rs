//! Embedding-matrix diagnostics: singular spectrum, covariance entropy,
//! isotropy, KL to an isotropic Gaussian, a linear genre probe and export.

mod eigen;
mod export;
mod probe;

use serde::{Deserialize, Serialize};

pub use eigen::{symmetric_eigen, JACOBI_TOL};
pub use export::{export_embeddings, read_embeddings_csv};
pub use probe::{constant_f1_bound, linear_probe, read_genre_labels, GenreLabels, ProbeConfig, ProbeReport};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::EMBEDDING;
use crate::nn::ParamStore;

/// Eigenvalues below this count as zero in `ln det`.
pub const EIGEN_FLOOR: f64 = 1e-10;

fn check(e: &Tensor, min_rows: usize, what: &str) -> Result<(usize, usize)> {
    let s = e.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::Shape {
            op: "diagnostics",
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        });
    }
    if s[0] < min_rows {
        return Err(Error::Domain(format!("{what} needs at least {min_rows} rows, got {}", s[0])));
    }
    Ok((s[0], s[1]))
}

/// Item rows of the embedding table (padding row dropped).
pub fn item_embeddings(store: &ParamStore) -> Result<Tensor> {
    let id = store
        .find(EMBEDDING)
        .ok_or_else(|| Error::Checkpoint("no embedding table".into()))?;
    let t = store.get(id);
    let d = t.last_dim();
    let n = t.shape()[0] - 1;
    Tensor::new(vec![n, d], t.data()[d..].to_vec())
}

fn gram(e: &Tensor) -> Tensor {
    e.transpose2().matmul(e).expect("shapes agree")
}

fn covariance(e: &Tensor) -> Vec<f64> {
    let (n, d) = (e.shape()[0], e.shape()[1]);
    let mut mu = vec![0.0; d];
    for i in 0..n {
        mu.iter_mut().zip(e.row(i)).for_each(|(m, x)| *m += x);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut c = e.clone();
    for i in 0..n {
        let row = &mut c.data_mut()[i * d..(i + 1) * d];
        row.iter_mut().zip(&mu).for_each(|(x, m)| *x -= m);
    }
    let mut g = gram(&c).into_data();
    g.iter_mut().for_each(|x| *x /= (n - 1) as f64);
    g
}

/// Singular values of `e` (N×D), descending, from the eigenvalues of EᵀE.
pub fn singular_spectrum(e: &Tensor) -> Result<Vec<f64>> {
    let (_, d) = check(e, 1, "singular_spectrum")?;
    let (vals, _) = symmetric_eigen(gram(e).data(), d)?;
    Ok(vals.into_iter().map(|v| v.max(0.0).sqrt()).collect())
}

/// Population variance and Shannon entropy (nats) of `σ / Σσ`.
pub fn spectrum_stats(sv: &[f64]) -> Result<(f64, f64)> {
    if sv.is_empty() || sv.iter().any(|&s| s < 0.0 || !s.is_finite()) {
        return Err(Error::Domain("spectrum must be nonempty, finite and nonnegative".into()));
    }
    let n = sv.len() as f64;
    let mean = sv.iter().sum::<f64>() / n;
    let var = sv.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok((var, entropy(sv)))
}

fn entropy(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        log::warn!("all-zero spectrum; entropy taken as 0");
        return 0.0;
    }
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum()
}

/// Entropy of the normalised eigenvalues of the sample covariance.
pub fn covariance_entropy(e: &Tensor) -> Result<f64> {
    let (_, d) = check(e, 2, "covariance_entropy")?;
    let (vals, _) = symmetric_eigen(&covariance(e), d)?;
    let clamped: Vec<f64> = vals.into_iter().map(|v| v.max(0.0)).collect();
    Ok(entropy(&clamped))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `min_c Z(c) / max_c Z(c)` with `Z(c) = Σ_i exp(⟨c, e_i⟩)` over the unit
/// eigenvectors of EᵀE, each taken with both signs.
pub fn isotropy(e: &Tensor) -> Result<f64> {
    let (n, d) = check(e, 1, "isotropy")?;
    let (_, vecs) = symmetric_eigen(gram(e).data(), d)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in &vecs {
        let proj: Vec<f64> = (0..n).map(|i| e.row(i).iter().zip(c).map(|(a, b)| a * b).sum()).collect();
        for sign in [1.0, -1.0] {
            let lz = log_sum_exp(proj.iter().map(|p| sign * p));
            lo = lo.min(lz);
            hi = hi.max(lz);
        }
    }
    Ok((lo - hi).exp())
}

/// KL(N(μ, Σ) ‖ N(μ, σ²I)) with `σ² = tr Σ / D`. The flag reports whether
/// any eigenvalue was raised to [`EIGEN_FLOOR`].
pub fn kl_to_gaussian(e: &Tensor) -> Result<(f64, bool)> {
    let (n, d) = check(e, 2, "kl_to_gaussian")?;
    if n <= d {
        log::warn!("kl_to_gaussian with N={n} <= D={d}: covariance is singular");
    }
    let (vals, _) = symmetric_eigen(&covariance(e), d)?;
    let trace: f64 = vals.iter().sum();
    if trace <= 0.0 {
        return Err(Error::Domain("covariance has zero trace".into()));
    }
    let s2 = trace / d as f64;
    let floored = vals.iter().any(|&v| v < EIGEN_FLOOR);
    let log_det: f64 = vals.iter().map(|&v| v.max(EIGEN_FLOOR).ln()).sum();
    let df = d as f64;
    Ok((0.5 * (trace / s2 - df + df * s2.ln() - log_det), floored))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub source: String,
    pub rows: usize,
    pub dim: usize,
    pub top5_singular: Vec<f64>,
    pub sv_variance: f64,
    pub sv_entropy: f64,
    pub cov_entropy: f64,
    pub isotropy: f64,
    pub kl_to_gaussian: f64,
    pub kl_floored: bool,
    pub normalized: bool,
}

impl DiagnosticsReport {
    pub const HEADER: [&'static str; 7] = ["source", "top-5 singular values", "sv var", "sv ent", "cov ent", "isotropy", "KL"];

    pub fn row(&self) -> [String; 7] {
        let top: Vec<String> = self.top5_singular.iter().map(|s| format!("{s:.2}")).collect();
        [
            self.source.clone(),
            top.join(", "),
            format!("{:.4}", self.sv_variance),
            format!("{:.4}", self.sv_entropy),
            format!("{:.4}", self.cov_entropy),
            format!("{:.4}", self.isotropy),
            format!("{:.4}", self.kl_to_gaussian),
        ]
    }
}

/// Side-by-side table of several reports.
pub fn comparison_table(reports: &[DiagnosticsReport]) -> String {
    let rows: Vec<[String; 7]> = reports.iter().map(|r| r.row()).collect();
    let width = |c: usize| rows.iter().map(|r| r[c].len()).chain([DiagnosticsReport::HEADER[c].len()]).max().unwrap_or(0);
    let widths: Vec<usize> = (0..7).map(width).collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(DiagnosticsReport::HEADER.to_vec());
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Unit-normalise every row (zero rows stay zero).
pub fn normalize_rows(e: &Tensor) -> Tensor {
    let d = e.last_dim();
    let mut out = e.clone();
    for row in out.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    out
}

pub fn diagnose(source: &str, e: &Tensor, normalize: bool) -> Result<DiagnosticsReport> {
    let e = if normalize { normalize_rows(e) } else { e.clone() };
    let (n, d) = check(&e, 2, "diagnose")?;
    let sv = singular_spectrum(&e)?;
    let (sv_variance, sv_entropy) = spectrum_stats(&sv)?;
    let (kl, floored) = kl_to_gaussian(&e)?;
    Ok(DiagnosticsReport {
        source: source.to_string(),
        rows: n,
        dim: d,
        top5_singular: sv.iter().take(5).copied().collect(),
        sv_variance,
        sv_entropy,
        cov_entropy: covariance_entropy(&e)?,
        isotropy: isotropy(&e)?,
        kl_to_gaussian: kl,
        kl_floored: floored,
        normalized: normalize,
    })
}

#[cfg(test)]
mod tests;
