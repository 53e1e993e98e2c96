//! Gradient-histogram descriptor matching and coarse-level score matrices.
//!
//! Keypoints sit on a dense grid. Each descriptor is a 4x4 grid of
//! `K`-bin magnitude-weighted orientation histograms using the same bin
//! convention as [`crate::gradient::orientation_bin`], L2-normalized.
//! [`GridMatcher`] adds mutual nearest-neighbour matching, a ratio test and
//! an NCC sub-pixel refinement of the B-side location.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Correspondence, GeometryError, Homography};
use crate::gradient::orientation_bin;
use crate::image::{compute_gradient_field, GradientField, Image, ImageError, PixelCoord};
use crate::par::Execution;
use crate::warp::sample_bilinear;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
const CELLS: usize = 4;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("patch of side {scale} at ({x}, {y}) leaves the {width}x{height} image")]
    OutOfBounds { x: f64, y: f64, scale: usize, width: usize, height: usize },
    #[error("non-finite score matrix entry")]
    NonFinite,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Patch center.
    pub position: PixelCoord,
    /// Patch side in pixels.
    pub scale: usize,
    pub response: f64,
}

impl Keypoint {
    /// Integer top-left corner of the patch.
    pub fn origin(&self) -> (f64, f64) {
        let half = (self.scale as f64 - 1.0) / 2.0;
        ((self.position.x - half).round(), (self.position.y - half).round())
    }

    fn window(&self, width: usize, height: usize) -> Result<(usize, usize), MatchError> {
        let (x0, y0) = self.origin();
        if x0 < 0.0 || y0 < 0.0 || x0 as usize + self.scale > width || y0 as usize + self.scale > height {
            return Err(MatchError::OutOfBounds { x: self.position.x, y: self.position.y, scale: self.scale, width, height });
        }
        Ok((x0 as usize, y0 as usize))
    }
}

/// Regular grid of patches of side `scale`, origins every `stride` pixels
/// starting at 0. Empty when no patch fits.
pub fn detect_grid_keypoints(img: &Image, stride: usize, scale: usize) -> Vec<Keypoint> {
    grid_keypoints(img.width(), img.height(), stride, scale)
}

pub fn grid_keypoints(width: usize, height: usize, stride: usize, scale: usize) -> Vec<Keypoint> {
    if stride == 0 || scale == 0 || scale > width || scale > height {
        return Vec::new();
    }
    let half = (scale as f64 - 1.0) / 2.0;
    let mut out = Vec::new();
    for y0 in (0..=height - scale).step_by(stride) {
        for x0 in (0..=width - scale).step_by(stride) {
            out.push(Keypoint { position: PixelCoord::new(x0 as f64 + half, y0 as f64 + half), scale, response: 1.0 });
        }
    }
    out
}

/// Unit-norm descriptor of length `16 K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    values: Vec<f64>,
}

impl Descriptor {
    /// Normalizes non-negative raw values; an all-zero vector becomes the
    /// uniform unit vector.
    pub fn from_raw(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        } else {
            let u = 1.0 / (values.len() as f64).sqrt();
            values.iter_mut().for_each(|v| *v = u);
        }
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        self.squared_distance(other).sqrt()
    }

    /// Summed in four interleaved lanes so the loop vectorizes.
    pub fn squared_distance(&self, other: &Descriptor) -> f64 {
        let (a, b) = (&self.values, &other.values);
        let n = a.len().min(b.len());
        let mut lanes = [0.0f64; 4];
        let (ca, cb) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
        let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
        for (x, y) in ca.zip(cb) {
            let (x, y): (&[f64; 4], &[f64; 4]) = (x.try_into().expect("chunk of 4"), y.try_into().expect("chunk of 4"));
            for k in 0..4 {
                let d = x[k] - y[k];
                lanes[k] += d * d;
            }
        }
        (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
    }

    pub fn dot(&self, other: &Descriptor) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

fn raw_histogram(field: &GradientField, x0: usize, y0: usize, scale: usize, bins: usize) -> Vec<f64> {
    let mut hist = vec![0.0; CELLS * CELLS * bins];
    for r in 0..scale {
        let cy = r * CELLS / scale;
        for c in 0..scale {
            let cx = c * CELLS / scale;
            let (i, j) = (y0 + r, x0 + c);
            let k = orientation_bin(field.orientation(i, j), bins);
            hist[(cy * CELLS + cx) * bins + k] += field.magnitude(i, j);
        }
    }
    hist
}

pub fn extract_descriptor(field: &GradientField, kp: &Keypoint, bins: usize) -> Result<Descriptor, MatchError> {
    if bins < 2 {
        return Err(MatchError::Argument(format!("bin count {bins} < 2")));
    }
    if kp.scale < CELLS {
        return Err(MatchError::Argument(format!("keypoint scale {} < {CELLS}", kp.scale)));
    }
    let (x0, y0) = kp.window(field.width(), field.height())?;
    Ok(Descriptor::from_raw(raw_histogram(field, x0, y0, kp.scale, bins)))
}

pub fn extract_descriptors(field: &GradientField, kps: &[Keypoint], bins: usize, exec: Execution) -> Result<Vec<Descriptor>, MatchError> {
    exec.map(kps, |kp| extract_descriptor(field, kp, bins)).into_iter().collect()
}

/// Index pair produced by descriptor matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexMatch {
    pub a: usize,
    pub b: usize,
    pub confidence: f64,
}

const NN_ROW_BLOCK: usize = 64;

/// Per row of `a`: nearest index, nearest and second-nearest squared
/// distance. Per column of `b`: nearest row. Each distance is computed once;
/// ties keep the lowest index.
struct NearestTables {
    rows: Vec<(usize, f64, f64)>,
    cols: Vec<(usize, f64)>,
}

fn nearest_tables(desc_a: &[Descriptor], desc_b: &[Descriptor], exec: Execution) -> NearestTables {
    let blocks = desc_a.len().div_ceil(NN_ROW_BLOCK);
    let partial = exec.map_range(blocks, |blk| {
        let lo = blk * NN_ROW_BLOCK;
        let hi = (lo + NN_ROW_BLOCK).min(desc_a.len());
        let mut cols = vec![(usize::MAX, f64::INFINITY); desc_b.len()];
        let mut rows = Vec::with_capacity(hi - lo);
        for (i, qa) in desc_a.iter().enumerate().take(hi).skip(lo) {
            let mut best = (usize::MAX, f64::INFINITY);
            let mut second = f64::INFINITY;
            for (j, qb) in desc_b.iter().enumerate() {
                let d = qa.squared_distance(qb);
                if d < best.1 {
                    second = best.1;
                    best = (j, d);
                } else if d < second {
                    second = d;
                }
                if d < cols[j].1 {
                    cols[j] = (i, d);
                }
            }
            rows.push((best.0, best.1, second));
        }
        (rows, cols)
    });
    let mut rows = Vec::with_capacity(desc_a.len());
    let mut cols = vec![(usize::MAX, f64::INFINITY); desc_b.len()];
    for (r, c) in partial {
        rows.extend(r);
        for (acc, cand) in cols.iter_mut().zip(c) {
            if cand.1 < acc.1 {
                *acc = cand;
            }
        }
    }
    NearestTables { rows, cols }
}

/// Mutual nearest neighbours passing the ratio test `d1 / d2 <= ratio`.
pub fn match_mutual_nn(desc_a: &[Descriptor], desc_b: &[Descriptor], ratio: f64) -> Vec<IndexMatch> {
    match_mutual_nn_with(desc_a, desc_b, ratio, Execution::default())
}

pub fn match_mutual_nn_with(desc_a: &[Descriptor], desc_b: &[Descriptor], ratio: f64, exec: Execution) -> Vec<IndexMatch> {
    if desc_a.is_empty() || desc_b.is_empty() {
        return Vec::new();
    }
    let tables = nearest_tables(desc_a, desc_b, exec);
    tables
        .rows
        .into_iter()
        .enumerate()
        .filter_map(|(i, (j, s1, s2))| {
            if tables.cols[j].0 != i {
                return None;
            }
            let (d1, d2) = (s1.sqrt(), s2.is_finite().then(|| s2.sqrt()));
            let passes = match d2 {
                None => true,
                Some(d2) if d2 > 0.0 => d1 / d2 <= ratio,
                Some(_) => ratio >= 1.0,
            };
            passes.then(|| IndexMatch { a: i, b: j, confidence: (1.0 - d1 / 2.0).clamp(0.0, 1.0) })
        })
        .collect()
}

/// A resolved match between pixel locations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    #[serde(skip)]
    pub index_a: usize,
    #[serde(skip)]
    pub index_b: usize,
    pub a: PixelCoord,
    pub b: PixelCoord,
    #[serde(rename = "conf")]
    pub confidence: f64,
}

/// One-to-one matches; serializes as rows `{a: [x, y], b: [x, y], conf}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn from_indices(indices: &[IndexMatch], kps_a: &[Keypoint], kps_b: &[Keypoint]) -> Self {
        let matches = indices
            .iter()
            .map(|m| Match { index_a: m.a, index_b: m.b, a: kps_a[m.a].position, b: kps_b[m.b].position, confidence: m.confidence })
            .collect();
        Self { matches }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn correspondences(&self) -> Vec<Correspondence> {
        self.matches.iter().map(|m| Correspondence { src: m.a, dst: m.b, weight: Some(m.confidence) }).collect()
    }

    /// Keeps the `max` most confident matches, ordering by
    /// `(confidence desc, index asc)`.
    pub fn cap(&mut self, max: usize) {
        let mut order: Vec<usize> = (0..self.matches.len()).collect();
        order.sort_by(|&i, &j| self.matches[j].confidence.total_cmp(&self.matches[i].confidence).then(i.cmp(&j)));
        order.truncate(max);
        order.sort_unstable();
        self.matches = order.into_iter().map(|k| self.matches[k]).collect();
    }
}

/// Dense row-major score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatchError> {
        if data.len() != rows * cols {
            return Err(MatchError::Argument(format!("{} entries for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Inner-product similarity between two descriptor sets.
pub fn similarity_matrix(desc_a: &[Descriptor], desc_b: &[Descriptor], exec: Execution) -> ScoreMatrix {
    let rows = exec.map(desc_a, |a| desc_b.iter().map(|b| a.dot(b)).collect::<Vec<_>>());
    ScoreMatrix { rows: desc_a.len(), cols: desc_b.len(), data: rows.concat() }
}

/// Entrywise product of the row-wise and column-wise softmax of `S / τ`.
pub fn dual_softmax(sim: &ScoreMatrix, temperature: f64) -> Result<ScoreMatrix, MatchError> {
    if !(temperature > 0.0) {
        return Err(MatchError::Argument(format!("temperature {temperature} must be positive")));
    }
    if sim.data.iter().any(|v| !v.is_finite()) {
        return Err(MatchError::NonFinite);
    }
    let (n, m) = (sim.rows, sim.cols);
    let scaled: Vec<f64> = sim.data.iter().map(|v| v / temperature).collect();
    let mut row_soft = vec![0.0; n * m];
    for i in 0..n {
        let row = &scaled[i * m..(i + 1) * m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for j in 0..m {
            row_soft[i * m + j] = (row[j] - max).exp() / z;
        }
    }
    let mut out = row_soft;
    for j in 0..m {
        let max = (0..n).map(|i| scaled[i * m + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).map(|i| (scaled[i * m + j] - max).exp()).sum();
        for i in 0..n {
            out[i * m + j] *= (scaled[i * m + j] - max).exp() / z;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(MatchError::NonFinite);
    }
    Ok(ScoreMatrix { rows: n, cols: m, data: out })
}

/// Coarse cell lattice over an image: `cols x rows` cells of side `cell`,
/// centers at `k * cell + (cell - 1) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseGrid {
    pub width: usize,
    pub height: usize,
    pub cell: usize,
}

impl CoarseGrid {
    pub fn new(width: usize, height: usize, cell: usize) -> Result<Self, MatchError> {
        if cell == 0 || cell > width || cell > height {
            return Err(MatchError::Argument(format!("cell {cell} does not fit {width}x{height}")));
        }
        Ok(Self { width, height, cell })
    }

    pub fn cols(&self) -> usize {
        self.width / self.cell
    }

    pub fn rows(&self) -> usize {
        self.height / self.cell
    }

    pub fn len(&self) -> usize {
        self.cols() * self.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, k: usize) -> PixelCoord {
        let off = (self.cell as f64 - 1.0) / 2.0;
        let c = self.cell as f64;
        PixelCoord::new((k % self.cols()) as f64 * c + off, (k / self.cols()) as f64 * c + off)
    }

    pub fn keypoints(&self) -> Vec<Keypoint> {
        (0..self.len()).map(|k| Keypoint { position: self.center(k), scale: self.cell, response: 1.0 }).collect()
    }

    fn contains(&self, p: PixelCoord) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }

    /// Nearest cell center to `p`, or `None` when `p` is outside the image
    /// or equidistant from two centers.
    pub fn nearest_cell(&self, p: PixelCoord) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let axis = |v: f64, n: usize| -> Option<usize> {
            let t = (v - (self.cell as f64 - 1.0) / 2.0) / self.cell as f64;
            if t <= 0.0 {
                return Some(0);
            }
            if t >= (n - 1) as f64 {
                return Some(n - 1);
            }
            if t.fract() == 0.5 {
                return None;
            }
            Some(t.round() as usize)
        };
        let cx = axis(p.x, self.cols())?;
        let cy = axis(p.y, self.rows())?;
        Some(cy * self.cols() + cx)
    }
}

/// Ground-truth assignment cells; each row and column appears at most once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GtMatrix {
    pub cells: Vec<(usize, usize)>,
}

impl GtMatrix {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Mutual-nearest-cell assignment between the A and B lattices under `h_gt`.
pub fn build_gt_matrix(h_gt: &Homography, grid_a: &CoarseGrid, grid_b: &CoarseGrid) -> Result<GtMatrix, MatchError> {
    let inv = h_gt.invert()?;
    let mut cells = Vec::new();
    for i in 0..grid_a.len() {
        let Ok(pb) = h_gt.apply(grid_a.center(i)) else { continue };
        let Some(j) = grid_b.nearest_cell(pb) else { continue };
        let Ok(pa) = inv.apply(grid_b.center(j)) else { continue };
        if grid_a.nearest_cell(pa) == Some(i) {
            cells.push((i, j));
        }
    }
    Ok(GtMatrix { cells })
}

/// Context a pair matcher may use.
#[derive(Debug, Clone, Copy, Default)]
pub struct MatchContext<'a> {
    /// Ground truth, for oracle matchers only.
    pub h_gt: Option<&'a Homography>,
    /// Per-pixel validity of image A (e.g. after warping).
    pub valid_a: Option<&'a [bool]>,
}

/// Produces matches between two images.
pub trait PairMatcher: Sync {
    fn name(&self) -> &str;
    fn match_pair(&self, a: &Image, b: &Image, ctx: &MatchContext<'_>) -> Result<MatchSet, MatchError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub stride: usize,
    pub scale: usize,
    pub bins: usize,
    /// Ratio-test bound in `(0, 1]`.
    pub ratio: f64,
    /// Sub-pixel refinement search radius, pixels; 0 disables refinement.
    pub fine_radius: usize,
    /// Patches with mean gradient magnitude below this are not described.
    pub min_mean_gradient: f64,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self { stride: 8, scale: 16, bins: 8, ratio: 0.9, fine_radius: 8, min_mean_gradient: 2e-3, exec: Execution::default() }
    }
}

/// Dense-grid gradient-histogram matcher with NCC sub-pixel refinement.
#[derive(Debug, Clone, Default)]
pub struct GridMatcher {
    pub config: MatcherConfig,
}

impl GridMatcher {
    pub fn new(config: MatcherConfig) -> Self {
        Self { config }
    }

    fn textured(&self, field: &GradientField, kps: Vec<Keypoint>, valid: Option<&[bool]>) -> Vec<Keypoint> {
        let w = field.width();
        let s = self.config.scale;
        kps.into_iter()
            .filter(|kp| {
                let (x0, y0) = kp.origin();
                let (x0, y0) = (x0 as usize, y0 as usize);
                if let Some(valid) = valid {
                    if !(y0..y0 + s).all(|i| (x0..x0 + s).all(|j| valid[i * w + j])) {
                        return false;
                    }
                }
                let total: f64 = (y0..y0 + s).flat_map(|i| (x0..x0 + s).map(move |j| (i, j))).map(|(i, j)| field.magnitude(i, j)).sum();
                total / (s * s) as f64 >= self.config.min_mean_gradient
            })
            .collect()
    }
}

impl PairMatcher for GridMatcher {
    fn name(&self) -> &str {
        "grid-sift-lite"
    }

    fn match_pair(&self, a: &Image, b: &Image, ctx: &MatchContext<'_>) -> Result<MatchSet, MatchError> {
        let cfg = &self.config;
        if !(cfg.ratio > 0.0 && cfg.ratio <= 1.0) {
            return Err(MatchError::Argument(format!("ratio {} outside (0, 1]", cfg.ratio)));
        }
        let (ga, gb) = (a.to_gray(), b.to_gray());
        if ga.width() < 3 || ga.height() < 3 || gb.width() < 3 || gb.height() < 3 {
            return Ok(MatchSet::default());
        }
        let (fa, fb) = (compute_gradient_field(&ga)?, compute_gradient_field(&gb)?);
        let kps_a = self.textured(&fa, detect_grid_keypoints(&ga, cfg.stride, cfg.scale), ctx.valid_a);
        let kps_b = self.textured(&fb, detect_grid_keypoints(&gb, cfg.stride, cfg.scale), None);
        let da = extract_descriptors(&fa, &kps_a, cfg.bins, cfg.exec)?;
        let db = extract_descriptors(&fb, &kps_b, cfg.bins, cfg.exec)?;
        let indices = match_mutual_nn_with(&da, &db, cfg.ratio, cfg.exec);
        let mut set = MatchSet::from_indices(&indices, &kps_a, &kps_b);
        if cfg.fine_radius > 0 {
            let refined = cfg.exec.map(&set.matches, |m| refine_subpixel(&ga, &gb, m, cfg.scale, cfg.fine_radius));
            set.matches = refined;
        }
        Ok(set)
    }
}

/// Zero-mean copy of an A window with its L2 norm.
struct Template {
    values: Vec<f64>,
    norm: f64,
}

impl Template {
    fn new(img: &Image, x0: usize, y0: usize, s: usize) -> Self {
        let w = img.width();
        let data = img.data();
        let mut values = Vec::with_capacity(s * s);
        for i in y0..y0 + s {
            values.extend_from_slice(&data[i * w + x0..i * w + x0 + s]);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.iter_mut().for_each(|v| *v -= mean);
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { values, norm }
    }

    /// NCC against the `s x s` window of `b` at `(x0, y0)`; -1 for flat windows.
    fn ncc(&self, b: &Image, x0: usize, y0: usize, s: usize) -> f64 {
        let w = b.width();
        let data = b.data();
        let (mut sum, mut sq, mut dot) = (0.0, 0.0, 0.0);
        for (r, t) in self.values.chunks_exact(s).enumerate() {
            let row = &data[(y0 + r) * w + x0..(y0 + r) * w + x0 + s];
            for (&v, &tv) in row.iter().zip(t) {
                sum += v;
                sq += v * v;
                dot += tv * v;
            }
        }
        // the template sums to zero, so the B mean drops out of the dot product
        let var = (sq - sum * sum / self.values.len() as f64).max(0.0);
        let norm_b = var.sqrt();
        if self.norm < 1e-12 || norm_b < FLAT_WINDOW_NORM {
            return -1.0;
        }
        dot / (self.norm * norm_b)
    }
}

/// Single-pass variance carries cancellation noise around 1e-7 in the norm.
const FLAT_WINDOW_NORM: f64 = 1e-6;

fn parabola_peak(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom.abs() < 1e-12 {
        0.0
    } else {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    }
}

/// Moves `m.b` to the NCC maximum within `radius` pixels, then to a
/// sub-pixel peak by separable parabola fits and a Gauss-Newton polish.
fn refine_subpixel(a: &Image, b: &Image, m: &Match, s: usize, radius: usize) -> Match {
    let half = (s as f64 - 1.0) / 2.0;
    let ax = (m.a.x - half).round();
    let ay = (m.a.y - half).round();
    let bx = (m.b.x - half).round();
    let by = (m.b.y - half).round();
    if ax < 0.0 || ay < 0.0 || ax as usize + s > a.width() || ay as usize + s > a.height() {
        return *m;
    }
    let (ax, ay) = (ax as usize, ay as usize);
    let template = Template::new(a, ax, ay, s);
    let r = radius as i64;
    let side = (2 * r + 1) as usize;
    let mut scores = vec![f64::NEG_INFINITY; side * side];
    let mut best = (f64::NEG_INFINITY, 0i64, 0i64);
    for dy in -r..=r {
        for dx in -r..=r {
            let (x0, y0) = (bx as i64 + dx, by as i64 + dy);
            if x0 < 0 || y0 < 0 || x0 as usize + s > b.width() || y0 as usize + s > b.height() {
                continue;
            }
            let v = template.ncc(b, x0 as usize, y0 as usize, s);
            scores[((dy + r) as usize) * side + (dx + r) as usize] = v;
            if v > best.0 {
                best = (v, dx, dy);
            }
        }
    }
    if !best.0.is_finite() {
        return *m;
    }
    let (_, dx, dy) = best;
    let at = |dx: i64, dy: i64| -> Option<f64> {
        if dx.abs() > r || dy.abs() > r {
            return None;
        }
        let v = scores[((dy + r) as usize) * side + (dx + r) as usize];
        v.is_finite().then_some(v)
    };
    let c = best.0;
    let sx = match (at(dx - 1, dy), at(dx + 1, dy)) {
        (Some(l), Some(rr)) => parabola_peak(l, c, rr),
        _ => 0.0,
    };
    let sy = match (at(dx, dy - 1), at(dx, dy + 1)) {
        (Some(u), Some(d)) => parabola_peak(u, c, d),
        _ => 0.0,
    };
    let (x0, y0) = (bx + dx as f64 + sx, by + dy as f64 + sy);
    let (x0, y0) = gauss_newton_translation(a, (ax, ay), b, (x0, y0), s).unwrap_or((x0, y0));
    // the A window may sit off the keypoint by the rounding of its corner
    let (ox, oy) = (m.a.x - (ax as f64 + half), m.a.y - (ay as f64 + half));
    Match { b: PixelCoord::new(x0 + half + ox, y0 + half + oy), ..*m }
}

const GN_MAX_ITERS: usize = 10;
const GN_TOL: f64 = 1e-3;

/// Lucas-Kanade refinement of the window position in `b` under a gain and
/// bias intensity model. Returns `None` if it leaves the image, diverges or
/// stalls on a flat window.
fn gauss_newton_translation(a: &Image, (ax, ay): (usize, usize), b: &Image, start: (f64, f64), s: usize) -> Option<(f64, f64)> {
    let (mut x, mut y) = start;
    let (mut gain, mut bias) = (1.0, 0.0);
    let max_x = (b.width() - 1) as f64 - 0.5;
    let max_y = (b.height() - 1) as f64 - 0.5;
    for _ in 0..GN_MAX_ITERS {
        if x < 0.5 || y < 0.5 || x + (s - 1) as f64 > max_x || y + (s - 1) as f64 > max_y {
            return None;
        }
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jte = Vector4::<f64>::zeros();
        for r in 0..s {
            for c in 0..s {
                let (px, py) = (x + c as f64, y + r as f64);
                let at = |u: f64, v: f64| sample_bilinear(b, u, v, 0).unwrap_or(0.0);
                let bv = at(px, py);
                let gx = at(px + 0.5, py) - at(px - 0.5, py);
                let gy = at(px, py + 0.5) - at(px, py - 0.5);
                let e = a.at(ay + r, ax + c) - (gain * bv + bias);
                let j = Vector4::new(gain * gx, gain * gy, bv, 1.0);
                jtj += j * j.transpose();
                jte += j * e;
            }
        }
        let delta = jtj.lu().solve(&jte)?;
        if !delta.iter().all(|v| v.is_finite()) {
            return None;
        }
        x += delta[0];
        y += delta[1];
        gain += delta[2];
        bias += delta[3];
        if (x - start.0).abs() > 1.5 || (y - start.1).abs() > 1.5 || gain <= 0.0 {
            return None;
        }
        if delta[0].abs() < GN_TOL && delta[1].abs() < GN_TOL {
            return Some((x, y));
        }
    }
    Some((x, y))
}

/// Returns ground-truth correspondences on a grid over A; for evaluation
/// plumbing and tests.
#[derive(Debug, Clone)]
pub struct OracleMatcher {
    pub stride: usize,
}

impl Default for OracleMatcher {
    fn default() -> Self {
        Self { stride: 16 }
    }
}

impl PairMatcher for OracleMatcher {
    fn name(&self) -> &str {
        "oracle"
    }

    fn match_pair(&self, a: &Image, b: &Image, ctx: &MatchContext<'_>) -> Result<MatchSet, MatchError> {
        let h = ctx.h_gt.ok_or_else(|| MatchError::Argument("oracle matcher needs a ground-truth homography".into()))?;
        let mut matches = Vec::new();
        let step = self.stride.max(1);
        for y in (0..a.height()).step_by(step) {
            for x in (0..a.width()).step_by(step) {
                let pa = PixelCoord::new(x as f64, y as f64);
                let Ok(pb) = h.apply(pa) else { continue };
                if pb.x >= 0.0 && pb.y >= 0.0 && pb.x <= (b.width() - 1) as f64 && pb.y <= (b.height() - 1) as f64 {
                    let k = matches.len();
                    matches.push(Match { index_a: k, index_b: k, a: pa, b: pb, confidence: 1.0 });
                }
            }
        }
        Ok(MatchSet { matches })
    }
}

/// Always returns no matches.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullMatcher;

impl PairMatcher for NullMatcher {
    fn name(&self) -> &str {
        "null"
    }

    fn match_pair(&self, _: &Image, _: &Image, _: &MatchContext<'_>) -> Result<MatchSet, MatchError> {
        Ok(MatchSet::default())
    }
}
