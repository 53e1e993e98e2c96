//! Homography algebra, estimation and evaluation metrics.
//!
//! Points are column vectors `(x, y, 1)`; [`Homography::compose`] with
//! `(outer, inner)` applies `inner` first.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::PixelCoord;
use crate::par::Execution;

const DENOM_EPS: f64 = 1e-12;
const DET_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("matrix is singular or not finite")]
    Singular,
    #[error("point ({x}, {y}) maps to the line at infinity")]
    DegeneratePoint { x: f64, y: f64 },
    #[error("no consensus: best hypothesis had {best_inliers} of {total} inliers")]
    NoConsensus { best_inliers: usize, total: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Invertible 3x3 projective map, normalized so `m[2][2] = 1` when that entry
/// is nonzero and to unit Frobenius norm otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Serialize for Homography {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Homography {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = <[f64; 9]>::deserialize(d)?;
        Homography::from_row_major(v).map_err(serde::de::Error::custom)
    }
}

fn normalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let norm = m.norm();
    let corner = m[(2, 2)];
    if corner.abs() > DENOM_EPS * norm {
        if corner == 1.0 {
            m
        } else {
            m / corner
        }
    } else if (norm - 1.0).abs() > 4.0 * f64::EPSILON {
        m / norm
    } else {
        m
    }
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0) }
    }

    pub fn scaling(sx: f64, sy: f64) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0))
    }

    /// Normalizes and validates an arbitrary matrix.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::Singular);
        }
        let m = normalize(m);
        if !(m.determinant().abs() > DET_EPS) {
            return Err(GeometryError::Singular);
        }
        Ok(Self { m })
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::from_row_slice(&v))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Maps `p` with homogeneous division.
    pub fn apply(&self, p: PixelCoord) -> Result<PixelCoord, GeometryError> {
        let v = self.m * Vector3::new(p.x, p.y, 1.0);
        if !(v.z.abs() > DENOM_EPS) {
            return Err(GeometryError::DegeneratePoint { x: p.x, y: p.y });
        }
        Ok(PixelCoord::new(v.x / v.z, v.y / v.z))
    }

    /// `outer ∘ inner`: the result maps `p` to `outer(inner(p))`.
    pub fn compose(outer: &Homography, inner: &Homography) -> Result<Homography, GeometryError> {
        Homography::from_matrix(outer.m * inner.m)
    }

    /// Shorthand for `Homography::compose(self, inner)`.
    pub fn after(&self, inner: &Homography) -> Result<Homography, GeometryError> {
        Homography::compose(self, inner)
    }

    pub fn invert(&self) -> Result<Homography, GeometryError> {
        let inv = self.m.try_inverse().ok_or(GeometryError::Singular)?;
        Homography::from_matrix(inv)
    }

    /// Largest absolute entry difference after normalization.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.m - other.m).abs().max()
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        self.max_abs_diff(&Homography::identity()) <= tol
    }
}

/// Point pair from image A to image B with an optional confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub src: PixelCoord,
    pub dst: PixelCoord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl Correspondence {
    pub fn new(src: PixelCoord, dst: PixelCoord) -> Self {
        Self { src, dst, weight: None }
    }
}

/// Similarity that moves the centroid to the origin and sets the RMS
/// distance to √2.
fn normalizing_transform(points: &[PixelCoord]) -> Result<Matrix3<f64>, GeometryError> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let ms = points.iter().map(|p| (p.x - cx).powi(2) + (p.y - cy).powi(2)).sum::<f64>() / n;
    let rms = ms.sqrt();
    if !(rms > 1e-12) || !rms.is_finite() {
        return Err(GeometryError::Degenerate("coincident points".into()));
    }
    let s = std::f64::consts::SQRT_2 / rms;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform_points(t: &Matrix3<f64>, points: &[PixelCoord]) -> Vec<(f64, f64)> {
    points.iter().map(|p| (t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])).collect()
}

fn cross(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

/// Rejects normalized point sets where every point, or for a minimal set any
/// three points, lie on one line.
fn check_collinearity(points: &[(f64, f64)]) -> Result<(), GeometryError> {
    const AREA_EPS: f64 = 1e-9;
    if points.len() == 4 {
        for skip in 0..4 {
            let tri: Vec<_> = (0..4).filter(|&k| k != skip).map(|k| points[k]).collect();
            if cross(tri[0], tri[1], tri[2]).abs() < AREA_EPS {
                return Err(GeometryError::Degenerate("three of four points are collinear".into()));
            }
        }
        return Ok(());
    }
    // scatter matrix of centered (already normalized) points
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
    }
    let n = points.len() as f64;
    let det = (sxx * syy - sxy * sxy) / (n * n);
    if det.abs() < AREA_EPS {
        return Err(GeometryError::Degenerate("all points are collinear".into()));
    }
    Ok(())
}

/// Normalized direct linear transform.
pub fn estimate_dlt(corrs: &[Correspondence]) -> Result<Homography, GeometryError> {
    let n = corrs.len();
    if n < 4 {
        return Err(GeometryError::TooFewPoints { needed: 4, got: n });
    }
    if corrs.iter().any(|c| !(c.src.is_finite() && c.dst.is_finite())) {
        return Err(GeometryError::Argument("non-finite coordinates".into()));
    }
    let src: Vec<PixelCoord> = corrs.iter().map(|c| c.src).collect();
    let dst: Vec<PixelCoord> = corrs.iter().map(|c| c.dst).collect();
    let t_src = normalizing_transform(&src)?;
    let t_dst = normalizing_transform(&dst)?;
    let src_n = transform_points(&t_src, &src);
    let dst_n = transform_points(&t_dst, &dst);
    check_collinearity(&src_n)?;
    check_collinearity(&dst_n)?;

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (&(x, y), &(u, v))) in src_n.iter().zip(&dst_n).enumerate() {
        let r0 = 2 * k;
        let r1 = r0 + 1;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| GeometryError::Degenerate("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = order[0];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if !(second > 1e-10 * largest) {
        return Err(GeometryError::Degenerate("design matrix is rank deficient".into()));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_dst_inv = t_dst.try_inverse().ok_or(GeometryError::Singular)?;
    Homography::from_matrix(t_dst_inv * hn * t_src)
}

/// Forward transfer distance `|h(src) - dst|`, infinite for degenerate points.
pub fn transfer_error(h: &Homography, c: &Correspondence) -> f64 {
    h.apply(c.src).map(|p| p.distance(&c.dst)).unwrap_or(f64::INFINITY)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Inlier threshold on the forward transfer distance, pixels.
    pub threshold: f64,
    pub max_iters: usize,
    /// Target probability of drawing at least one all-inlier sample.
    pub confidence: f64,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { threshold: 3.0, max_iters: 2000, confidence: 0.995, seed: 0, exec: Execution::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub model: Homography,
    pub inlier_mask: Vec<bool>,
    pub iterations_used: usize,
    /// RMS transfer distance over the inliers.
    pub inlier_rms: f64,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

struct Score {
    inliers: usize,
    sq_sum: f64,
}

fn score(h: &Homography, corrs: &[Correspondence], threshold: f64) -> (Score, Vec<bool>) {
    let mut mask = Vec::with_capacity(corrs.len());
    let mut s = Score { inliers: 0, sq_sum: 0.0 };
    for c in corrs {
        let e = transfer_error(h, c);
        let inlier = e <= threshold;
        if inlier {
            s.inliers += 1;
            s.sq_sum += e * e;
        }
        mask.push(inlier);
    }
    (s, mask)
}

fn required_iterations(inlier_ratio: f64, confidence: f64, max_iters: usize) -> usize {
    let all_inlier = inlier_ratio.powi(4);
    if all_inlier >= 1.0 {
        return 1;
    }
    if all_inlier <= 0.0 {
        return max_iters;
    }
    let n = (1.0 - confidence).ln() / (1.0 - all_inlier).ln();
    if n.is_finite() {
        (n.ceil().max(1.0) as usize).min(max_iters)
    } else {
        max_iters
    }
}

const HYPOTHESIS_BATCH: usize = 64;

/// Hypothesize-and-verify over 4-point samples with an adaptive stopping
/// rule, followed by a DLT refit on the best consensus set.
///
/// Samples are drawn sequentially from one seeded stream in fixed-size
/// batches; only scoring runs in parallel, so results depend on the seed alone.
pub fn estimate_ransac(corrs: &[Correspondence], config: &RansacConfig) -> Result<RansacResult, GeometryError> {
    let n = corrs.len();
    if n < 4 {
        return Err(GeometryError::TooFewPoints { needed: 4, got: n });
    }
    if !(config.threshold > 0.0) {
        return Err(GeometryError::Argument(format!("threshold {} must be positive", config.threshold)));
    }
    if !(0.0..1.0).contains(&config.confidence) {
        return Err(GeometryError::Argument(format!("confidence {} outside [0, 1)", config.confidence)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(Homography, Score)> = None;
    let mut needed = config.max_iters.max(1);
    let mut used = 0;

    'outer: while used < needed {
        let batch = HYPOTHESIS_BATCH.min(config.max_iters.max(1) - used);
        let samples: Vec<Vec<usize>> = (0..batch).map(|_| sample(&mut rng, n, 4).into_vec()).collect();
        let scored = config.exec.map(&samples, |idx| {
            let minimal: Vec<Correspondence> = idx.iter().map(|&k| corrs[k]).collect();
            estimate_dlt(&minimal).ok().map(|h| {
                let (s, _) = score(&h, corrs, config.threshold);
                (h, s)
            })
        });
        for hypothesis in scored {
            used += 1;
            if let Some((h, s)) = hypothesis {
                let better = match &best {
                    None => true,
                    Some((_, b)) => s.inliers > b.inliers || (s.inliers == b.inliers && s.sq_sum < b.sq_sum),
                };
                if better {
                    needed = needed.min(required_iterations(s.inliers as f64 / n as f64, config.confidence, config.max_iters));
                    best = Some((h, s));
                }
            }
            if used >= needed {
                break 'outer;
            }
        }
    }

    let (hyp, hyp_score) = match best {
        Some((h, s)) if s.inliers >= 4 => (h, s),
        other => return Err(GeometryError::NoConsensus { best_inliers: other.map_or(0, |(_, s)| s.inliers), total: n }),
    };
    let (_, hyp_mask) = score(&hyp, corrs, config.threshold);
    let consensus: Vec<Correspondence> = corrs.iter().zip(&hyp_mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();

    let (model, mask) = match estimate_dlt(&consensus) {
        Ok(refit) => {
            let (s, mask) = score(&refit, corrs, config.threshold);
            if s.inliers >= hyp_score.inliers {
                (refit, mask)
            } else {
                (hyp, hyp_mask)
            }
        }
        Err(_) => (hyp, hyp_mask),
    };
    let errs: Vec<f64> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| transfer_error(&model, c)).collect();
    let inlier_rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
    Ok(RansacResult { model, inlier_mask: mask, iterations_used: used, inlier_rms })
}

/// The four lattice corners of a `width x height` image.
pub fn image_corners(width: usize, height: usize) -> [PixelCoord; 4] {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [PixelCoord::new(0.0, 0.0), PixelCoord::new(w, 0.0), PixelCoord::new(0.0, h), PixelCoord::new(w, h)]
}

/// Mean distance between the corners mapped by the estimate and by the truth.
pub fn corner_error(est: &Homography, gt: &Homography, width: usize, height: usize) -> Result<f64, GeometryError> {
    if width == 0 || height == 0 {
        return Err(GeometryError::Argument(format!("image size {width}x{height}")));
    }
    let mut total = 0.0;
    for c in image_corners(width, height) {
        total += est.apply(c)?.distance(&gt.apply(c)?);
    }
    Ok(total / 4.0)
}

/// Area under the empirical corner-error CDF up to `threshold`, in percent.
///
/// `F` is the right-continuous step CDF, so the integral reduces to
/// `Σ max(0, t - e_i) / n`. Failed estimates enter as `f64::INFINITY`.
pub fn auc_corner_error(errors: &[f64], threshold: f64) -> Result<f64, GeometryError> {
    if errors.is_empty() {
        return Err(GeometryError::Argument("empty error list".into()));
    }
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(GeometryError::Argument(format!("threshold {threshold} must be positive")));
    }
    if let Some(e) = errors.iter().find(|e| e.is_nan() || **e < 0.0) {
        return Err(GeometryError::Argument(format!("invalid error value {e}")));
    }
    let area: f64 = errors.iter().map(|&e| (threshold - e).max(0.0)).sum();
    Ok((100.0 * area / (threshold * errors.len() as f64)).clamp(0.0, 100.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn p(x: f64, y: f64) -> PixelCoord {
        PixelCoord::new(x, y)
    }

    fn random_h(rng: &mut impl Rng) -> Homography {
        let m = Matrix3::new(
            1.0 + rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-20.0..20.0),
            rng.random_range(-0.2..0.2),
            1.0 + rng.random_range(-0.2..0.2),
            rng.random_range(-20.0..20.0),
            rng.random_range(-5e-4..5e-4),
            rng.random_range(-5e-4..5e-4),
            1.0,
        );
        Homography::from_matrix(m).unwrap()
    }

    fn square(h: &Homography) -> Vec<Correspondence> {
        [p(0.0, 0.0), p(1.0, 0.0), p(0.0, 1.0), p(1.0, 1.0)].iter().map(|&s| Correspondence::new(s, h.apply(s).unwrap())).collect()
    }

    #[test]
    fn apply_examples() {
        assert_eq!(Homography::identity().apply(p(5.0, 7.0)).unwrap(), p(5.0, 7.0));
        assert_eq!(Homography::translation(3.0, 4.0).apply(p(0.0, 0.0)).unwrap(), p(3.0, 4.0));
        let h = Homography::from_row_major([2.0, 1.0, 3.0, 0.5, 4.0, -1.0, 1.0, 0.0, 1.0]).unwrap();
        // (x, y) = (1, 0): numerator rows dotted with (1, 0, 1), denominator 2
        assert_eq!(h.apply(p(1.0, 0.0)).unwrap(), p(5.0 / 2.0, -0.5 / 2.0));
        assert!(matches!(h.apply(p(-1.0, 0.0)), Err(GeometryError::DegeneratePoint { .. })));
    }

    #[test]
    fn normalization() {
        let h = Homography::from_row_major([2.0, 0.0, 6.0, 0.0, 2.0, 8.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(h, Homography::translation(3.0, 4.0));
        let odd = Homography::from_row_major([1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((odd.matrix().norm() - 1.0).abs() < 1e-15);
        assert_eq!(Homography::from_matrix(*odd.matrix()).unwrap(), odd);
        assert_eq!(Homography::from_row_major([1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0]), Err(GeometryError::Singular));
        assert_eq!(Homography::from_row_major([f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]), Err(GeometryError::Singular));
    }

    #[test]
    fn compose_and_invert_examples() {
        let t = Homography::compose(&Homography::translation(1.0, 0.0), &Homography::translation(0.0, 1.0)).unwrap();
        assert_eq!(t, Homography::translation(1.0, 1.0));
        assert_eq!(Homography::identity().invert().unwrap(), Homography::identity());
        let inv = Homography::translation(3.0, 4.0).invert().unwrap();
        assert_eq!(inv, Homography::translation(-3.0, -4.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_h(&mut rng);
        assert!(Homography::compose(&h, &h.invert().unwrap()).unwrap().is_identity(1e-9));
    }

    #[test]
    fn compose_order_is_inner_first() {
        let scale = Homography::scaling(2.0, 2.0).unwrap();
        let shift = Homography::translation(1.0, 0.0);
        let h = Homography::compose(&scale, &shift).unwrap();
        assert_eq!(h.apply(p(0.0, 0.0)).unwrap(), p(2.0, 0.0));
    }

    #[test]
    fn dlt_examples() {
        let ident = estimate_dlt(&square(&Homography::identity())).unwrap();
        assert!(ident.is_identity(1e-9));
        let t = estimate_dlt(&square(&Homography::translation(3.0, 4.0))).unwrap();
        assert!(t.max_abs_diff(&Homography::translation(3.0, 4.0)) < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_h(&mut rng);
        let corrs: Vec<_> = (0..8)
            .map(|_| {
                let s = p(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
                Correspondence::new(s, h.apply(s).unwrap())
            })
            .collect();
        let est = estimate_dlt(&corrs).unwrap();
        for c in &corrs {
            assert!(transfer_error(&est, c) <= 1e-6);
        }
    }

    #[test]
    fn dlt_errors() {
        let corrs = square(&Homography::identity());
        assert_eq!(estimate_dlt(&corrs[..3]), Err(GeometryError::TooFewPoints { needed: 4, got: 3 }));
        let collinear: Vec<_> = (0..4).map(|k| Correspondence::new(p(k as f64, 0.0), p(0.0, k as f64))).collect();
        assert!(matches!(estimate_dlt(&collinear), Err(GeometryError::Degenerate(_))));
        let three = vec![
            Correspondence::new(p(0.0, 0.0), p(0.0, 0.0)),
            Correspondence::new(p(1.0, 1.0), p(1.0, 0.0)),
            Correspondence::new(p(2.0, 2.0), p(0.0, 1.0)),
            Correspondence::new(p(0.0, 5.0), p(1.0, 1.0)),
        ];
        assert!(matches!(estimate_dlt(&three), Err(GeometryError::Degenerate(_))));
        let same = vec![Correspondence::new(p(1.0, 1.0), p(2.0, 2.0)); 5];
        assert!(matches!(estimate_dlt(&same), Err(GeometryError::Degenerate(_))));
    }

    #[test]
    fn ransac_all_inliers_matches_dlt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_h(&mut rng);
        let corrs: Vec<_> = (0..30)
            .map(|_| {
                let s = p(rng.random_range(0.0..300.0), rng.random_range(0.0..300.0));
                Correspondence::new(s, h.apply(s).unwrap())
            })
            .collect();
        let r = estimate_ransac(&corrs, &RansacConfig::default()).unwrap();
        assert!(r.inlier_mask.iter().all(|&m| m));
        let dlt = estimate_dlt(&corrs).unwrap();
        assert!(corner_error(&r.model, &dlt, 300, 300).unwrap() < 1e-6);
        assert!(r.inlier_rms < 1e-6);
        assert!(r.iterations_used >= 1);
    }

    #[test]
    fn ransac_rejects_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_h(&mut rng);
        let mut corrs: Vec<_> = (0..60)
            .map(|_| {
                let s = p(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
                Correspondence::new(s, h.apply(s).unwrap())
            })
            .collect();
        for _ in 0..40 {
            corrs.push(Correspondence::new(
                p(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0)),
                p(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0)),
            ));
        }
        let cfg = RansacConfig { seed: 5, ..Default::default() };
        let r = estimate_ransac(&corrs, &cfg).unwrap();
        assert!(r.inlier_mask[..60].iter().all(|&m| m));
        assert!(corner_error(&r.model, &h, 320, 240).unwrap() < 1.0);
        assert!(r.inlier_rms <= cfg.threshold);

        let again = estimate_ransac(&corrs, &cfg).unwrap();
        assert_eq!(again.model.to_row_major(), r.model.to_row_major());
        assert_eq!(again.inlier_mask, r.inlier_mask);
        let seq = estimate_ransac(&corrs, &RansacConfig { exec: Execution::Sequential, ..cfg }).unwrap();
        assert_eq!(seq.model.to_row_major(), r.model.to_row_major());
        assert_eq!(seq.iterations_used, r.iterations_used);
    }

    #[test]
    fn ransac_preconditions() {
        let corrs = square(&Homography::identity());
        assert_eq!(estimate_ransac(&corrs[..3], &RansacConfig::default()).unwrap_err(), GeometryError::TooFewPoints { needed: 4, got: 3 });
        let bad = RansacConfig { threshold: 0.0, ..Default::default() };
        assert!(matches!(estimate_ransac(&corrs, &bad), Err(GeometryError::Argument(_))));
        let collinear: Vec<_> = (0..6).map(|k| Correspondence::new(p(k as f64, 0.0), p(k as f64, 1.0))).collect();
        assert!(matches!(estimate_ransac(&collinear, &RansacConfig::default()), Err(GeometryError::NoConsensus { .. })));
    }

    #[test]
    fn corner_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_h(&mut rng);
        assert_eq!(corner_error(&gt, &gt, 640, 480).unwrap(), 0.0);
        let shifted = Homography::compose(&Homography::translation(3.0, 4.0), &gt).unwrap();
        assert!((corner_error(&shifted, &gt, 640, 480).unwrap() - 5.0).abs() < 1e-9);
        let other = random_h(&mut rng);
        let brute: f64 = [(0.0, 0.0), (639.0, 0.0), (0.0, 479.0), (639.0, 479.0)]
            .iter()
            .map(|&(x, y)| {
                let a = other.matrix() * Vector3::new(x, y, 1.0);
                let b = gt.matrix() * Vector3::new(x, y, 1.0);
                (a.x / a.z - b.x / b.z).hypot(a.y / a.z - b.y / b.z)
            })
            .sum::<f64>()
            / 4.0;
        assert!((corner_error(&other, &gt, 640, 480).unwrap() - brute).abs() < 1e-9);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_corner_error(&[0.0, 0.0], 3.0).unwrap(), 100.0);
        assert_eq!(auc_corner_error(&[3.0, 7.0, f64::INFINITY], 3.0).unwrap(), 0.0);
        assert!((auc_corner_error(&[2.5], 5.0).unwrap() - 50.0).abs() < 1e-12);
        assert!((auc_corner_error(&[1.0, 2.0, 4.0], 3.0).unwrap() - 100.0 / 3.0).abs() < 1e-9);
        assert!(auc_corner_error(&[], 3.0).is_err());
        assert!(auc_corner_error(&[-1.0], 3.0).is_err());
    }

    proptest! {
        #[test]
        fn normalization_idempotent(vals in proptest::array::uniform9(-10.0f64..10.0)) {
            if let Ok(h) = Homography::from_row_major(vals) {
                let again = Homography::from_matrix(*h.matrix()).unwrap();
                prop_assert_eq!(again.to_row_major(), h.to_row_major());
            }
        }

        #[test]
        fn compose_associative_and_invert_roundtrip(seed in any::<u64>(), x in 0.0f64..200.0, y in 0.0f64..200.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_h(&mut rng), random_h(&mut rng), random_h(&mut rng));
            let left = Homography::compose(&a, &Homography::compose(&b, &c).unwrap()).unwrap();
            let right = Homography::compose(&Homography::compose(&a, &b).unwrap(), &c).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
            let pt = p(x, y);
            let back = a.invert().unwrap().apply(a.apply(pt).unwrap()).unwrap();
            prop_assert!(back.distance(&pt) < 1e-9);
            let direct = left.apply(pt).unwrap();
            let chained = a.apply(b.apply(c.apply(pt).unwrap()).unwrap()).unwrap();
            prop_assert!(direct.distance(&chained) < 1e-7);
        }

        #[test]
        fn auc_monotone(errors in proptest::collection::vec(0.0f64..20.0, 1..30), shrink in 0.0f64..1.0, t in 0.5f64..15.0) {
            let smaller: Vec<f64> = errors.iter().map(|e| e * shrink).collect();
            prop_assert!(auc_corner_error(&smaller, t).unwrap() >= auc_corner_error(&errors, t).unwrap() - 1e-12);
            prop_assert!(auc_corner_error(&errors, t * 1.5).unwrap() >= auc_corner_error(&errors, t).unwrap() - 1e-12);
        }
    }
}
