//! Heavy-tail diagnostics for weight matrices.
//!
//! Each 2-D parameter gets an empirical spectral density (eigenvalues of
//! `WᵀW / N`, with `N = max(rows, cols)`), a power law is fitted to its tail
//! and the fitted exponent classifies the layer:
//! `alpha < 2` overfit, `alpha > 6` underfit, anything in `[2, 6]` normal.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::checkpoint::Checkpoint;
use crate::tensor::ParamStore;

/// Smallest tail the power-law fit accepts.
pub const MIN_TAIL: usize = 10;

pub const OVERFIT_BELOW: f64 = 2.0;
pub const UNDERFIT_ABOVE: f64 = 6.0;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("matrix must be at least 2x2, got {rows}x{cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("matrix data has {got} values, expected {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("degenerate matrix: all entries are zero")]
    Degenerate,
    #[error("non-finite matrix entry")]
    NonFinite,
    #[error("power-law fit needs positive finite values")]
    NonPositive,
    #[error("tail too short: need at least {MIN_TAIL} points, have {available}")]
    TailTooShort { available: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Overfit,
    Normal,
    Underfit,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::Overfit => "overfit",
            Classification::Normal => "normal",
            Classification::Underfit => "underfit",
        }
    }
}

/// Boundaries are inclusive on the normal side.
pub fn classify(alpha: f64) -> Classification {
    if alpha < OVERFIT_BELOW {
        Classification::Overfit
    } else if alpha > UNDERFIT_ABOVE {
        Classification::Underfit
    } else {
        Classification::Normal
    }
}

/// Eigenvalues of `WᵀW / N` for a row-major `rows x cols` matrix, descending.
///
/// Computed from singular values (`sigma² / N`), so the result has
/// `min(rows, cols)` entries. `N` is the larger dimension; the fitted exponent
/// does not depend on this normalization.
pub fn esd(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<f64>, SpectralError> {
    if rows < 2 || cols < 2 {
        return Err(SpectralError::TooSmall { rows, cols });
    }
    if data.len() != rows * cols {
        return Err(SpectralError::ShapeMismatch {
            got: data.len(),
            expected: rows * cols,
        });
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(SpectralError::NonFinite);
    }
    if data.iter().all(|&x| x == 0.0) {
        return Err(SpectralError::Degenerate);
    }
    let n = rows.max(cols) as f64;
    let w = DMatrix::from_row_slice(rows, cols, data);
    let mut eig: Vec<f64> = w.singular_values().iter().map(|s| s * s / n).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub xmin: f64,
    pub n_tail: usize,
    pub ks_distance: f64,
}

/// Hill estimate `1 + n / sum(ln(x / xmin))` over a tail.
pub fn hill_alpha(tail: &[f64], xmin: f64) -> f64 {
    let s: f64 = tail.iter().map(|x| (x / xmin).ln()).sum();
    1.0 + tail.len() as f64 / s
}

/// KS distance between an ascending tail and the Pareto CDF `1 - (x/xmin)^(1-alpha)`.
fn ks_distance(sorted_tail: &[f64], xmin: f64, alpha: f64) -> f64 {
    let n = sorted_tail.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted_tail.iter().enumerate() {
        let cdf = 1.0 - (x / xmin).powf(1.0 - alpha);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
    }
    d
}

/// Fit a power law to the upper tail of `values`.
///
/// Candidate cutoffs are the distinct values in the upper half of the sorted
/// data that leave at least [`MIN_TAIL`] points; the one whose Hill fit has the
/// smallest KS distance wins. Ties keep the smaller cutoff.
pub fn fit_power_law(values: &[f64]) -> Result<PowerLawFit, SpectralError> {
    if values.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
        return Err(SpectralError::NonPositive);
    }
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();

    // suffix[i] = sum of ln(x_j) for j >= i
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + xs[i].ln();
    }

    let mut best: Option<PowerLawFit> = None;
    let mut start = n / 2;
    while start + MIN_TAIL <= n {
        // first index of a run of equal values
        if start > 0 && xs[start] == xs[start - 1] {
            start += 1;
            continue;
        }
        let xmin = xs[start];
        let n_tail = n - start;
        let log_sum = suffix[start] - n_tail as f64 * xmin.ln();
        if log_sum > 0.0 {
            let alpha = 1.0 + n_tail as f64 / log_sum;
            let ks = ks_distance(&xs[start..], xmin, alpha);
            if best.is_none_or(|b| ks < b.ks_distance) {
                best = Some(PowerLawFit {
                    alpha,
                    xmin,
                    n_tail,
                    ks_distance: ks,
                });
            }
        }
        start += 1;
    }
    best.ok_or(SpectralError::TailTooShort {
        available: n - n / 2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAlphaReport {
    pub layer: String,
    pub shape: [usize; 2],
    pub alpha: f64,
    pub xmin: f64,
    pub n_tail: usize,
    pub classification: Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedLayer {
    pub layer: String,
    pub shape: [usize; 2],
    pub reason: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub overfit: usize,
    pub normal: usize,
    pub underfit: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.overfit + self.normal + self.underfit
    }

    fn add(&mut self, c: Classification) {
        match c {
            Classification::Overfit => self.overfit += 1,
            Classification::Normal => self.normal += 1,
            Classification::Underfit => self.underfit += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub layers: Vec<LayerAlphaReport>,
    pub skipped: Vec<SkippedLayer>,
    pub summary: ClassCounts,
}

pub fn analyze_matrix(
    layer: &str,
    rows: usize,
    cols: usize,
    data: &[f64],
) -> Result<LayerAlphaReport, SpectralError> {
    let eig = esd(rows, cols, data)?;
    // zero eigenvalues (rank deficiency) carry no tail information
    let positive: Vec<f64> = eig.into_iter().filter(|&x| x > 0.0).collect();
    let fit = fit_power_law(&positive)?;
    Ok(LayerAlphaReport {
        layer: layer.to_string(),
        shape: [rows, cols],
        alpha: fit.alpha,
        xmin: fit.xmin,
        n_tail: fit.n_tail,
        classification: classify(fit.alpha),
    })
}

/// Analyze every 2-D parameter in store order; 1-D parameters are ignored.
pub fn analyze_params(params: &ParamStore) -> SpectralReport {
    let mut report = SpectralReport {
        layers: Vec::new(),
        skipped: Vec::new(),
        summary: ClassCounts::default(),
    };
    for p in params.iter() {
        let shape = p.tensor.shape();
        if shape.len() != 2 {
            continue;
        }
        let (rows, cols) = (shape[0], shape[1]);
        match analyze_matrix(&p.name, rows, cols, p.tensor.data()) {
            Ok(r) => {
                report.summary.add(r.classification);
                report.layers.push(r);
            }
            Err(e) => report.skipped.push(SkippedLayer {
                layer: p.name.clone(),
                shape: [rows, cols],
                reason: e.to_string(),
            }),
        }
    }
    report
}

pub fn analyze_checkpoint(ckpt: &Checkpoint) -> SpectralReport {
    analyze_params(&ckpt.model.params)
}

/// Per-model counts table with columns Overfit | Normal | Underfit.
pub fn format_summary(rows: &[(&str, &SpectralReport)]) -> String {
    let width = rows
        .iter()
        .map(|(name, _)| name.len())
        .max()
        .unwrap_or(0)
        .max("Model".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} | {:>7} | {:>6} | {:>8}",
        "Model", "Overfit", "Normal", "Underfit"
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 32));
    for (name, r) in rows {
        let s = r.summary;
        let _ = writeln!(
            out,
            "{:<width$} | {:>7} | {:>6} | {:>8}",
            name, s.overfit, s.normal, s.underfit
        );
    }
    out
}

/// One line per analyzed layer, then skipped layers.
pub fn format_layers(report: &SpectralReport) -> String {
    let mut out = String::new();
    for l in &report.layers {
        let _ = writeln!(
            out,
            "{:<40} {:>4}x{:<4} alpha={:>7.3} xmin={:.3e} n_tail={:>3} {}",
            l.layer,
            l.shape[0],
            l.shape[1],
            l.alpha,
            l.xmin,
            l.n_tail,
            l.classification.as_str()
        );
    }
    for s in &report.skipped {
        let _ = writeln!(
            out,
            "{:<40} {:>4}x{:<4} skipped: {}",
            s.layer, s.shape[0], s.shape[1], s.reason
        );
    }
    out
}

/// Draws from Pareto(alpha, xmin) by inverse CDF.
pub fn pareto_sample<R: rand::Rng>(rng: &mut R, alpha: f64, xmin: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            xmin * (1.0 - u).powf(-1.0 / (alpha - 1.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    #[test]
    fn esd_of_identity_and_diagonal() {
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        for v in esd(3, 3, &id).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let d = esd(2, 2, &[2.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((d[0] - 2.0).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn esd_sum_is_frobenius_over_n() {
        let w = gaussian(64, 64, 11);
        let eig = esd(64, 64, &w).unwrap();
        let fro: f64 = w.iter().map(|x| x * x).sum();
        let sum: f64 = eig.iter().sum();
        assert!((sum - fro / 64.0).abs() < 1e-9);
        assert!(eig.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn esd_rejects_degenerate_input() {
        assert_eq!(esd(2, 2, &[0.0; 4]), Err(SpectralError::Degenerate));
        assert!(matches!(
            esd(1, 4, &[1.0; 4]),
            Err(SpectralError::TooSmall { .. })
        ));
        assert!(matches!(
            esd(2, 2, &[1.0; 3]),
            Err(SpectralError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn esd_is_permutation_and_scale_aware() {
        let (m, n) = (12, 9);
        let w = gaussian(m, n, 5);
        let base = esd(m, n, &w).unwrap();

        // reverse rows and rotate columns
        let mut p = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                p[(m - 1 - i) * n + (j + 4) % n] = w[i * n + j];
            }
        }
        let perm = esd(m, n, &p).unwrap();
        for (a, b) in base.iter().zip(&perm) {
            assert!((a - b).abs() < 1e-10);
        }

        let scaled: Vec<f64> = w.iter().map(|x| 3.0 * x).collect();
        let s = esd(m, n, &scaled).unwrap();
        for (a, b) in base.iter().zip(&s) {
            assert!((b - 9.0 * a).abs() < 1e-9);
        }
    }

    #[test]
    fn recovers_pareto_exponents() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = pareto_sample(&mut rng, 3.0, 1.0, 10_000);
        let fit = fit_power_law(&x).unwrap();
        assert!((fit.alpha - 3.0).abs() <= 0.2, "alpha {}", fit.alpha);

        let x = pareto_sample(&mut rng, 1.5, 1.0, 10_000);
        let fit = fit_power_law(&x).unwrap();
        assert!((fit.alpha - 1.5).abs() <= 0.15, "alpha {}", fit.alpha);
        assert_eq!(classify(fit.alpha), Classification::Overfit);
    }

    #[test]
    fn geometric_tail_matches_closed_form() {
        let r: f64 = 1.3;
        let n = 25;
        let xs: Vec<f64> = (0..n).map(|i| r.powi(-i)).collect();
        let xmin = r.powi(-(n - 1));
        // ln(x_i / xmin) = (n - 1 - i) ln r
        let closed = 1.0 + n as f64 / ((0..n).map(|i| (n - 1 - i) as f64).sum::<f64>() * r.ln());
        let direct = hill_alpha(&xs, xmin);
        assert!((closed - direct).abs() < 1e-12);
    }

    #[test]
    fn fitted_alpha_is_scale_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = pareto_sample(&mut rng, 2.5, 1.0, 2_000);
        let a = fit_power_law(&x).unwrap();
        let y: Vec<f64> = x.iter().map(|v| v * 49.0).collect();
        let b = fit_power_law(&y).unwrap();
        assert!((a.alpha - b.alpha).abs() < 1e-9);
        assert!((b.xmin - 49.0 * a.xmin).abs() < 1e-9 * b.xmin);
        assert_eq!(a.n_tail, b.n_tail);
    }

    #[test]
    fn short_tails_are_rejected() {
        let x: Vec<f64> = (1..=15).map(|i| i as f64).collect();
        assert!(matches!(
            fit_power_law(&x),
            Err(SpectralError::TailTooShort { .. })
        ));
        assert_eq!(fit_power_law(&[1.0, -1.0]), Err(SpectralError::NonPositive));
    }

    #[test]
    fn thresholds_are_inclusive_for_normal() {
        assert_eq!(classify(2.0), Classification::Normal);
        assert_eq!(classify(6.0), Classification::Normal);
        assert_eq!(classify(1.999), Classification::Overfit);
        assert_eq!(classify(6.001), Classification::Underfit);
    }

    fn orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
        let g = DMatrix::from_row_slice(n, n, &gaussian(n, n, seed));
        g.qr().q()
    }

    #[test]
    fn engineered_light_tail_is_underfit() {
        let n = 200;
        // eigenvalues at Pareto(8) quantiles, so sigma = sqrt(n * lambda)
        let sigma: Vec<f64> = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                let lambda = (1.0 - u).powf(-1.0 / 7.0);
                (n as f64 * lambda).sqrt()
            })
            .collect();
        let u = orthogonal(n, 1);
        let v = orthogonal(n, 2);
        let w = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sigma)) * v.transpose();
        let row_major: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| w[(i, j)])
            .collect();
        let r = analyze_matrix("engineered", n, n, &row_major).unwrap();
        assert!(r.alpha > 6.0, "alpha {}", r.alpha);
        assert_eq!(r.classification, Classification::Underfit);
    }

    #[test]
    fn analysis_is_deterministic_and_counts_add_up() {
        let mut store = ParamStore::new();
        store
            .insert(
                "a",
                crate::tensor::Tensor::new(vec![64, 64], gaussian(64, 64, 1)).unwrap(),
            )
            .unwrap();
        store
            .insert(
                "bias",
                crate::tensor::Tensor::new(vec![64], gaussian(1, 64, 2)).unwrap(),
            )
            .unwrap();
        store
            .insert(
                "tiny",
                crate::tensor::Tensor::new(vec![4, 4], gaussian(4, 4, 3)).unwrap(),
            )
            .unwrap();
        store
            .insert(
                "b",
                crate::tensor::Tensor::new(vec![64, 128], gaussian(64, 128, 4)).unwrap(),
            )
            .unwrap();
        let r1 = analyze_params(&store);
        let r2 = analyze_params(&store.clone());
        assert_eq!(r1, r2);
        assert_eq!(r1.layers.len(), 2);
        assert_eq!(r1.skipped.len(), 1);
        assert_eq!(r1.skipped[0].layer, "tiny");
        assert_eq!(r1.summary.total(), r1.layers.len());
        let table = format_summary(&[("m", &r1)]);
        assert!(table.contains("Overfit") && table.contains("Underfit"));
    }
}
