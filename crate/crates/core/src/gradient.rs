//! Patch gradient modeling and the gradient-inconsistency score.
//!
//! A patch is summarized by its dominant orientation bin: the pixels of an
//! `L x L` window are split into `K` orientation subsets, `G_m` is the largest
//! per-subset magnitude sum and `G_o` is that subset's index times `2π / K`.
//! Two patches are then compared with
//!
//! ```text
//! Q = min(G_m) / max(G_m) * (cos|ΔG_o| + 1) / 2
//! ```
//!
//! which is 1 for fully consistent gradients and 0 for opposite ones.

use std::f64::consts::TAU;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{GradientField, PixelCoord};
use crate::par::Execution;

pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const DEFAULT_BINS: usize = 8;

#[derive(Debug, Error)]
pub enum GradientError {
    #[error("patch {size}x{size} at ({x}, {y}) is outside the {width}x{height} field")]
    OutOfBounds { x: f64, y: f64, size: usize, width: usize, height: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("export failed: {0}")]
    Export(String),
}

/// Dominant-orientation summary of one square patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchGradient {
    /// Summed magnitude of the dominant orientation bin.
    pub magnitude: f64,
    /// Dominant bin index (1-based) times `2π / K`, in `(0, 2π]`.
    pub orientation: f64,
    /// Top-left pixel of the window.
    pub origin: PixelCoord,
    pub size: usize,
    pub bins: usize,
}

/// Zero-based orientation bin. Bin `k` (1-based) covers `((k-1)·2π/K, k·2π/K]`
/// and orientation 0 belongs to bin `K`.
#[inline]
pub fn orientation_bin(orientation: f64, bins: usize) -> usize {
    let width = TAU / bins as f64;
    let upper = |k: usize| k as f64 * TAU / bins as f64;
    if orientation <= 0.0 {
        return bins - 1;
    }
    let mut k = ((orientation / width).ceil() as usize).clamp(1, bins);
    while k > 1 && orientation <= upper(k - 1) {
        k -= 1;
    }
    while k < bins && orientation > upper(k) {
        k += 1;
    }
    k - 1
}

fn check_config(size: usize, bins: usize) -> Result<(), GradientError> {
    if size < 2 {
        return Err(GradientError::Config(format!("patch size {size} < 2")));
    }
    if bins < 2 {
        return Err(GradientError::Config(format!("bin count {bins} < 2")));
    }
    Ok(())
}

/// Summarizes the `size x size` window whose top-left pixel is `origin`.
///
/// `origin` must lie on the integer lattice. Ties between bins resolve to
/// the lowest bin index.
pub fn patch_gradient(field: &GradientField, origin: PixelCoord, size: usize, bins: usize) -> Result<PatchGradient, GradientError> {
    check_config(size, bins)?;
    let oob = || GradientError::OutOfBounds { x: origin.x, y: origin.y, size, width: field.width(), height: field.height() };
    if !(origin.x >= 0.0 && origin.y >= 0.0 && origin.x.fract() == 0.0 && origin.y.fract() == 0.0) {
        return Err(oob());
    }
    let (x0, y0) = (origin.x as usize, origin.y as usize);
    if x0 + size > field.width() || y0 + size > field.height() {
        return Err(oob());
    }
    let mut sums = vec![0.0f64; bins];
    for i in y0..y0 + size {
        for j in x0..x0 + size {
            sums[orientation_bin(field.orientation(i, j), bins)] += field.magnitude(i, j);
        }
    }
    let (best, magnitude) = sums.iter().enumerate().fold((0, sums[0]), |acc, (k, &s)| if s > acc.1 { (k, s) } else { acc });
    Ok(PatchGradient { magnitude, orientation: (best + 1) as f64 * TAU / bins as f64, origin, size, bins })
}

/// Patch of side `size` centered as closely as possible on `center`, or
/// `None` when it would leave the field.
pub fn patch_gradient_at(field: &GradientField, center: PixelCoord, size: usize, bins: usize) -> Option<PatchGradient> {
    let half = (size as f64 - 1.0) / 2.0;
    let x0 = (center.x - half).round();
    let y0 = (center.y - half).round();
    if !(x0.is_finite() && y0.is_finite()) || x0 < 0.0 || y0 < 0.0 {
        return None;
    }
    patch_gradient(field, PixelCoord::new(x0, y0), size, bins).ok()
}

/// All non-overlapping patches on a regular grid, row-major.
pub fn grid_patch_gradients(field: &GradientField, size: usize, bins: usize, exec: Execution) -> Result<Vec<PatchGradient>, GradientError> {
    check_config(size, bins)?;
    let cols = field.width() / size;
    let rows = field.height() / size;
    exec.map_range(rows * cols, |k| {
        let origin = PixelCoord::new(((k % cols) * size) as f64, ((k / cols) * size) as f64);
        patch_gradient(field, origin, size, bins)
    })
    .into_iter()
    .collect()
}

/// Gradient inconsistency score in `[0, 1]`; 1 means consistent.
///
/// Two zero-magnitude patches have magnitude ratio 1; a single zero
/// magnitude gives ratio 0.
pub fn inconsistency_q(a: &PatchGradient, b: &PatchGradient) -> Result<f64, GradientError> {
    if a.size != b.size || a.bins != b.bins {
        return Err(GradientError::Config(format!("patches computed with (L={}, K={}) and (L={}, K={})", a.size, a.bins, b.size, b.bins)));
    }
    let (lo, hi) = if a.magnitude <= b.magnitude { (a.magnitude, b.magnitude) } else { (b.magnitude, a.magnitude) };
    let ratio = if hi == 0.0 { 1.0 } else { lo / hi };
    let agreement = ((a.orientation - b.orientation).abs().cos() + 1.0) / 2.0;
    Ok(ratio * agreement)
}

/// Mean and unbiased covariance of `(G_m, G_o)` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientDistribution {
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    pub sample_count: usize,
}

pub fn fit_bivariate_gaussian(samples: &[(f64, f64)]) -> Result<GradientDistribution, GradientError> {
    let n = samples.len();
    if n < 2 {
        return Err(GradientError::InsufficientData(format!("{n} samples, need at least 2")));
    }
    let nf = n as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / nf;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in samples {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let d = nf - 1.0;
    Ok(GradientDistribution { mean: [mx, my], covariance: [[sxx / d, sxy / d], [sxy / d, syy / d]], sample_count: n })
}

impl GradientDistribution {
    pub fn from_patches(patches: &[PatchGradient]) -> Result<Self, GradientError> {
        let samples: Vec<_> = patches.iter().map(|p| (p.magnitude, p.orientation)).collect();
        fit_bivariate_gaussian(&samples)
    }
}

/// End-point error: mean Euclidean distance between paired points.
pub fn epe(predicted: &[PixelCoord], ground_truth: &[PixelCoord]) -> Result<f64, GradientError> {
    if predicted.is_empty() || predicted.len() != ground_truth.len() {
        return Err(GradientError::Argument(format!("need equal non-empty lists, got {} and {}", predicted.len(), ground_truth.len())));
    }
    let total: f64 = predicted.iter().zip(ground_truth).map(|(p, g)| p.distance(g)).sum();
    Ok(total / predicted.len() as f64)
}

/// Mean EPE per equal-width Q bin, with a least-squares slope over the
/// non-empty bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyCurve {
    pub bin_edges: Vec<f64>,
    /// `None` for empty bins.
    pub mean_epe_per_bin: Vec<Option<f64>>,
    pub count_per_bin: Vec<usize>,
    /// Absent when fewer than two bins are populated.
    pub slope: Option<f64>,
}

/// One matched patch pair: its consistency score and localization error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QEpeSample {
    pub q: f64,
    pub epe: f64,
}

pub fn bin_epe_by_q(matches: &[QEpeSample], n_bins: usize) -> Result<InconsistencyCurve, GradientError> {
    if n_bins < 2 {
        return Err(GradientError::Argument(format!("{n_bins} bins, need at least 2")));
    }
    if let Some(bad) = matches.iter().find(|m| !(0.0..=1.0).contains(&m.q)) {
        return Err(GradientError::Argument(format!("Q = {} outside [0, 1]", bad.q)));
    }
    if let Some(bad) = matches.iter().find(|m| !m.epe.is_finite()) {
        return Err(GradientError::Argument(format!("non-finite EPE {}", bad.epe)));
    }
    let bin_edges: Vec<f64> = (0..=n_bins).map(|k| k as f64 / n_bins as f64).collect();
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for m in matches {
        let k = ((m.q * n_bins as f64).floor() as usize).min(n_bins - 1);
        sums[k] += m.epe;
        counts[k] += 1;
    }
    let means: Vec<Option<f64>> = sums.iter().zip(&counts).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect();
    let points: Vec<(f64, f64)> =
        means.iter().enumerate().filter_map(|(k, m)| m.map(|m| ((bin_edges[k] + bin_edges[k + 1]) / 2.0, m))).collect();
    Ok(InconsistencyCurve { bin_edges, mean_epe_per_bin: means, count_per_bin: counts, slope: least_squares_slope(&points) })
}

fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Writes `(q, epe)` rows with a header line.
pub fn write_q_epe_csv<W: Write>(samples: &[QEpeSample], out: W) -> Result<(), GradientError> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(s).map_err(|e| GradientError::Export(e.to_string()))?;
    }
    w.flush().map_err(|e| GradientError::Export(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    fn field(w: usize, h: usize, mag: impl Fn(usize, usize) -> f64, ori: impl Fn(usize, usize) -> f64) -> GradientField {
        let mut m = Vec::new();
        let mut o = Vec::new();
        for i in 0..h {
            for j in 0..w {
                m.push(mag(i, j));
                o.push(ori(i, j));
            }
        }
        GradientField::from_parts(w, h, m, o).unwrap()
    }

    fn pg(magnitude: f64, orientation: f64) -> PatchGradient {
        PatchGradient { magnitude, orientation, origin: PixelCoord::default(), size: 16, bins: 8 }
    }

    #[test]
    fn bin_convention() {
        let w = TAU / 8.0;
        assert_eq!(orientation_bin(0.0, 8), 7);
        assert_eq!(orientation_bin(1e-9, 8), 0);
        assert_eq!(orientation_bin(w, 8), 0);
        assert_eq!(orientation_bin(w + 1e-12, 8), 1);
        assert_eq!(orientation_bin(TAU - 1e-12, 8), 7);
        assert_eq!(orientation_bin(3.0 * w, 8), 2);
    }

    #[test]
    fn single_bin_patch() {
        let f = field(4, 4, |_, _| 1.0, |_, _| 0.3);
        let p = patch_gradient(&f, PixelCoord::new(0.0, 0.0), 4, 8).unwrap();
        assert_eq!(p.magnitude, 16.0);
        assert!((p.orientation - FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn zero_field_ties_to_first_bin() {
        let f = field(6, 6, |_, _| 0.0, |_, _| 0.0);
        let p = patch_gradient(&f, PixelCoord::new(1.0, 1.0), 4, 8).unwrap();
        assert_eq!(p.magnitude, 0.0);
        assert_eq!(p.orientation, TAU / 8.0);
    }

    #[test]
    fn two_populated_bins() {
        // 5 units in bin 3 (1-based), 3 units in bin 6
        let f = field(
            4,
            2,
            |i, j| {
                if i == 0 && j == 0 {
                    5.0
                } else if i == 1 && j < 3 {
                    1.0
                } else {
                    0.0
                }
            },
            |i, _| if i == 0 { 2.5 * TAU / 8.0 } else { 5.5 * TAU / 8.0 },
        );
        let p = patch_gradient(&f, PixelCoord::new(0.0, 0.0), 2, 8).unwrap();
        assert_eq!(p.magnitude, 5.0);
        assert_eq!(p.orientation, 3.0 * TAU / 8.0);
    }

    #[test]
    fn patch_bounds_and_config() {
        let f = field(8, 8, |_, _| 1.0, |_, _| 1.0);
        assert!(matches!(patch_gradient(&f, PixelCoord::new(5.0, 0.0), 4, 8), Err(GradientError::OutOfBounds { .. })));
        assert!(matches!(patch_gradient(&f, PixelCoord::new(0.5, 0.0), 4, 8), Err(GradientError::OutOfBounds { .. })));
        assert!(matches!(patch_gradient(&f, PixelCoord::new(-1.0, 0.0), 4, 8), Err(GradientError::OutOfBounds { .. })));
        assert!(matches!(patch_gradient(&f, PixelCoord::new(0.0, 0.0), 1, 8), Err(GradientError::Config(_))));
        assert!(matches!(patch_gradient(&f, PixelCoord::new(0.0, 0.0), 4, 1), Err(GradientError::Config(_))));
    }

    #[test]
    fn q_examples() {
        assert_eq!(inconsistency_q(&pg(3.0, 1.0), &pg(3.0, 1.0)).unwrap(), 1.0);
        assert_eq!(inconsistency_q(&pg(2.0, 1.0), &pg(4.0, 1.0)).unwrap(), 0.5);
        assert!(inconsistency_q(&pg(2.0, PI / 4.0), &pg(2.0, 5.0 * PI / 4.0)).unwrap().abs() < 1e-15);
        assert!((inconsistency_q(&pg(2.0, PI / 4.0), &pg(2.0, 3.0 * PI / 4.0)).unwrap() - 0.5).abs() < 1e-15);
        // both zero: ratio 1, only the orientation term remains
        assert_eq!(inconsistency_q(&pg(0.0, 1.0), &pg(0.0, 2.0)).unwrap(), ((1.0f64).cos() + 1.0) / 2.0);
        assert_eq!(inconsistency_q(&pg(0.0, 1.0), &pg(4.0, 1.0)).unwrap(), 0.0);
        let mut other = pg(1.0, 1.0);
        other.bins = 4;
        assert!(matches!(inconsistency_q(&pg(1.0, 1.0), &other), Err(GradientError::Config(_))));
    }

    #[test]
    fn gaussian_fit_examples() {
        let d = fit_bivariate_gaussian(&[(0.0, 0.0), (2.0, 2.0)]).unwrap();
        assert_eq!(d.mean, [1.0, 1.0]);
        assert_eq!(d.covariance, [[2.0, 2.0], [2.0, 2.0]]);
        let d = fit_bivariate_gaussian(&[(1.5, 0.25); 7]).unwrap();
        assert_eq!(d.covariance, [[0.0; 2]; 2]);
        assert_eq!(d.sample_count, 7);
        assert!(matches!(fit_bivariate_gaussian(&[(1.0, 1.0)]), Err(GradientError::InsufficientData(_))));
    }

    #[test]
    fn epe_examples() {
        let pts = [PixelCoord::new(1.0, 2.0), PixelCoord::new(-3.0, 0.5)];
        assert_eq!(epe(&pts, &pts).unwrap(), 0.0);
        let off: Vec<_> = pts.iter().map(|p| PixelCoord::new(p.x + 3.0, p.y + 4.0)).collect();
        assert!((epe(&off, &pts).unwrap() - 5.0).abs() < 1e-12);
        let mixed = [pts[0], off[1]];
        assert!((epe(&mixed, &pts).unwrap() - 2.5).abs() < 1e-12);
        assert!(epe(&pts[..1], &pts).is_err());
        assert!(epe(&[], &[]).is_err());
    }

    #[test]
    fn curve_examples() {
        let all_one = vec![QEpeSample { q: 1.0, epe: 0.0 }; 5];
        let c = bin_epe_by_q(&all_one, 4).unwrap();
        assert_eq!(c.mean_epe_per_bin, vec![None, None, None, Some(0.0)]);
        assert_eq!(c.count_per_bin, vec![0, 0, 0, 5]);
        assert_eq!(c.slope, None);

        let clusters = [QEpeSample { q: 0.1, epe: 10.0 }, QEpeSample { q: 0.1, epe: 10.0 }, QEpeSample { q: 0.9, epe: 1.0 }];
        let c = bin_epe_by_q(&clusters, 2).unwrap();
        assert_eq!(c.bin_edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(c.mean_epe_per_bin, vec![Some(10.0), Some(1.0)]);
        // centers 0.25 and 0.75: slope (1 - 10) / 0.5
        assert!((c.slope.unwrap() + 18.0).abs() < 1e-12);

        assert!(bin_epe_by_q(&[QEpeSample { q: 1.5, epe: 0.0 }], 2).is_err());
        assert!(bin_epe_by_q(&[], 1).is_err());
    }

    #[test]
    fn csv_export_has_header() {
        let mut buf = Vec::new();
        write_q_epe_csv(&[QEpeSample { q: 0.5, epe: 2.0 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "q,epe\n0.5,2.0\n");
    }
}
