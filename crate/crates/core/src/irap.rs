//! The annotation pipeline: quadruplets, seed and residual homographies,
//! ground-truth composition, cross-modality transfer and the dataset
//! manifest. Also hosts the synthetic scene and pseudo-NIR generators.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    estimate_dlt, estimate_ransac, image_corners, transfer_error, Correspondence, GeometryError, Homography, RansacConfig, RansacResult,
};
use crate::image::{Image, ImageError, PixelCoord};
use crate::matcher::{MatchContext, MatchError, PairMatcher};
use crate::semantic::{SemanticError, SemanticLabelMap};
use crate::warp::warp_perspective;

pub const MANIFEST_VERSION: &str = "irap-manifest/1";

/// Tolerance under which a ground truth counts as the identity for split tagging.
pub const ALIGNED_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum IrapError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error("residual estimation failed with {matches} matches: {source}")]
    Residual { matches: usize, source: GeometryError },
    #[error("record {id} is {status}: {reason}")]
    State { id: String, status: Status, reason: String },
    #[error("unsupported manifest version {found:?} (expected {MANIFEST_VERSION:?})")]
    Version { found: Option<String> },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("manifest i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One of the four images in a quadruplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    ARgb,
    ANir,
    BRgb,
    BNir,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::ARgb, Slot::ANir, Slot::BRgb, Slot::BNir];

    pub fn as_str(self) -> &'static str {
        match self {
            Slot::ARgb => "a_rgb",
            Slot::ANir => "a_nir",
            Slot::BRgb => "b_rgb",
            Slot::BNir => "b_nir",
        }
    }

    pub fn parse(s: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|slot| slot.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSet {
    pub a_rgb: String,
    pub a_nir: String,
    pub b_rgb: String,
    pub b_nir: String,
}

impl ImageSet {
    pub fn get(&self, slot: Slot) -> &str {
        match slot {
            Slot::ARgb => &self.a_rgb,
            Slot::ANir => &self.a_nir,
            Slot::BRgb => &self.b_rgb,
            Slot::BNir => &self.b_nir,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Draft,
    Refined,
    Accepted,
    Rejected,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Draft => "draft",
            Status::Refined => "refined",
            Status::Accepted => "accepted",
            Status::Rejected => "rejected",
        }
    }

    /// Refined or accepted.
    pub fn has_ground_truth(self) -> bool {
        matches!(self, Status::Refined | Status::Accepted)
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A human click pair: `a` in `a_rgb`, `b` in `b_rgb`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickPair {
    pub a: PixelCoord,
    pub b: PixelCoord,
}

impl From<ClickPair> for Correspondence {
    fn from(c: ClickPair) -> Self {
        Correspondence::new(c.a, c.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub quadruplet_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h1: Option<Homography>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h2: Option<Homography>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_gt: Option<Homography>,
    #[serde(default)]
    pub clicks: Vec<ClickPair>,
    #[serde(default)]
    pub residual_inlier_count: usize,
    pub status: Status,
}

impl AnnotationRecord {
    pub fn draft(quadruplet_id: impl Into<String>) -> Self {
        Self {
            quadruplet_id: quadruplet_id.into(),
            h1: None,
            h2: None,
            h_gt: None,
            clicks: Vec::new(),
            residual_inlier_count: 0,
            status: Status::Draft,
        }
    }

    pub fn validate(&self) -> Result<(), IrapError> {
        let bad = |reason: &str| IrapError::State { id: self.quadruplet_id.clone(), status: self.status, reason: reason.into() };
        match self.status {
            Status::Draft if self.h_gt.is_some() => Err(bad("draft records carry no ground truth")),
            Status::Refined | Status::Accepted if self.h_gt.is_none() => Err(bad("ground truth missing")),
            Status::Accepted if self.residual_inlier_count < 4 => Err(bad("fewer than 4 residual inliers")),
            _ => Ok(()),
        }
    }

    fn state_error(&self, reason: &str) -> IrapError {
        IrapError::State { id: self.quadruplet_id.clone(), status: self.status, reason: reason.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadruplet {
    pub id: String,
    pub images: ImageSet,
    pub record: AnnotationRecord,
    /// Generator ground truth for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<Homography>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub illumination: String,
    pub quadruplets: Vec<Quadruplet>,
}

/// Source and target modality of a derived pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairKind {
    #[serde(rename = "rgb-rgb")]
    RgbRgb,
    #[serde(rename = "nir-nir")]
    NirNir,
    #[serde(rename = "rgb-nir")]
    RgbNir,
    #[serde(rename = "nir-rgb")]
    NirRgb,
}

impl PairKind {
    pub const ALL: [PairKind; 4] = [PairKind::RgbRgb, PairKind::NirNir, PairKind::RgbNir, PairKind::NirRgb];

    pub fn slots(self) -> (Slot, Slot) {
        match self {
            PairKind::RgbRgb => (Slot::ARgb, Slot::BRgb),
            PairKind::NirNir => (Slot::ANir, Slot::BNir),
            PairKind::RgbNir => (Slot::ARgb, Slot::BNir),
            PairKind::NirRgb => (Slot::ANir, Slot::BRgb),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::RgbRgb => "rgb-rgb",
            PairKind::NirNir => "nir-nir",
            PairKind::RgbNir => "rgb-nir",
            PairKind::NirRgb => "nir-rgb",
        }
    }

    pub fn parse(s: &str) -> Option<PairKind> {
        PairKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn is_cross_modality(self) -> bool {
        matches!(self, PairKind::RgbNir | PairKind::NirRgb)
    }
}

/// Evaluation split: identical viewpoints or not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Aligned,
    Viewpoint,
}

impl Split {
    pub fn of(h_gt: &Homography) -> Split {
        if h_gt.is_identity(ALIGNED_TOL) {
            Split::Aligned
        } else {
            Split::Viewpoint
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedPair {
    pub quadruplet_id: String,
    pub kind: PairKind,
    pub source: Slot,
    pub target: Slot,
    pub h_gt: Homography,
    pub split: Split,
}

/// The four pair annotations implied by one refined record. Pair A and pair
/// B are pixel-aligned, so every pair carries the same ground truth.
pub fn transfer_cross_modality(record: &AnnotationRecord) -> Result<Vec<DerivedPair>, IrapError> {
    if !record.status.has_ground_truth() {
        return Err(record.state_error("only refined or accepted records can be transferred"));
    }
    let h_gt = record.h_gt.ok_or_else(|| record.state_error("ground truth missing"))?;
    let split = Split::of(&h_gt);
    Ok(PairKind::ALL
        .into_iter()
        .map(|kind| {
            let (source, target) = kind.slots();
            DerivedPair { quadruplet_id: record.quadruplet_id.clone(), kind, source, target, h_gt, split }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub scenes: Vec<Scene>,
    /// Pair annotations derived from the accepted records.
    #[serde(default)]
    pub pairs: Vec<DerivedPair>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self { version: MANIFEST_VERSION.into(), scenes: Vec::new(), pairs: Vec::new() }
    }
}

impl DatasetManifest {
    pub fn new(scenes: Vec<Scene>) -> Result<Self, IrapError> {
        let mut m = Self { scenes, ..Self::default() };
        m.rebuild_pairs()?;
        Ok(m)
    }

    pub fn quadruplets(&self) -> impl Iterator<Item = &Quadruplet> {
        self.scenes.iter().flat_map(|s| s.quadruplets.iter())
    }

    pub fn quadruplet(&self, id: &str) -> Option<&Quadruplet> {
        self.quadruplets().find(|q| q.id == id)
    }

    pub fn quadruplet_mut(&mut self, id: &str) -> Option<&mut Quadruplet> {
        self.scenes.iter_mut().flat_map(|s| s.quadruplets.iter_mut()).find(|q| q.id == id)
    }

    pub fn accepted(&self) -> impl Iterator<Item = &Quadruplet> {
        self.quadruplets().filter(|q| q.record.status == Status::Accepted)
    }

    /// Re-derives `pairs` from the accepted records.
    pub fn rebuild_pairs(&mut self) -> Result<(), IrapError> {
        let mut pairs = Vec::new();
        for q in self.accepted() {
            pairs.extend(transfer_cross_modality(&q.record)?);
        }
        self.pairs = pairs;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), IrapError> {
        if self.version != MANIFEST_VERSION {
            return Err(IrapError::Version { found: Some(self.version.clone()) });
        }
        let mut ids = HashSet::new();
        for q in self.quadruplets() {
            if !ids.insert(q.id.as_str()) {
                return Err(IrapError::Manifest(format!("duplicate quadruplet id {:?}", q.id)));
            }
            if q.record.quadruplet_id != q.id {
                return Err(IrapError::Manifest(format!("record of {:?} names {:?}", q.id, q.record.quadruplet_id)));
            }
            q.record.validate()?;
        }
        let expected = self.accepted().count() * 4;
        if self.pairs.len() != expected {
            return Err(IrapError::Manifest(format!("{} derived pairs for {} accepted records", self.pairs.len(), expected / 4)));
        }
        for p in &self.pairs {
            let q = self
                .quadruplet(&p.quadruplet_id)
                .ok_or_else(|| IrapError::Manifest(format!("pair names unknown {:?}", p.quadruplet_id)))?;
            if q.record.status != Status::Accepted || q.record.h_gt != Some(p.h_gt) || p.kind.slots() != (p.source, p.target) {
                return Err(IrapError::Manifest(format!(
                    "derived {} pair of {:?} disagrees with its record",
                    p.kind.as_str(),
                    p.quadruplet_id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, IrapError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, IrapError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("version").and_then(|v| v.as_str()) {
            Some(MANIFEST_VERSION) => {}
            other => return Err(IrapError::Version { found: other.map(str::to_owned) }),
        }
        let m: DatasetManifest = serde_json::from_value(value)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IrapError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Writes the manifest atomically.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IrapError> {
        self.validate()?;
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())?;
        Ok(())
    }

    /// Image path resolved against the manifest location.
    pub fn resolve(manifest_path: &Path, relative: &str) -> PathBuf {
        manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(relative)
    }
}

/// Writes `bytes` to a sibling temporary file, syncs it, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| Path::new("."));
    let name = path.file_name().ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// `H₁` from human clicks, with per-click transfer residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub h1: Homography,
    pub residuals: Vec<f64>,
}

impl SeedResult {
    /// Index of the click with the largest residual.
    pub fn worst_click(&self) -> Option<usize> {
        (0..self.residuals.len()).max_by(|&a, &b| self.residuals[a].total_cmp(&self.residuals[b]))
    }
}

pub fn seed_homography(clicks: &[Correspondence]) -> Result<SeedResult, IrapError> {
    if clicks.len() < 4 {
        return Err(GeometryError::TooFewPoints { needed: 4, got: clicks.len() }.into());
    }
    let h1 = estimate_dlt(clicks)?;
    let residuals = clicks.iter().map(|c| transfer_error(&h1, c)).collect();
    Ok(SeedResult { h1, residuals })
}

#[derive(Debug, Clone)]
pub struct ResidualResult {
    /// Maps warped-A coordinates to B coordinates.
    pub h2: Homography,
    pub ransac: RansacResult,
    pub match_count: usize,
}

/// Warp, match and RANSAC rounds in [`refine_residual`]. Later rounds start
/// from the previous composite, so their windows are nearly aligned.
pub const RESIDUAL_PASSES: usize = 2;

fn residual_pass(
    a_rgb: &Image,
    b_rgb: &Image,
    h: &Homography,
    matcher: &dyn PairMatcher,
    ransac: &RansacConfig,
) -> Result<ResidualResult, IrapError> {
    let warped = warp_perspective(a_rgb, h, b_rgb.width(), b_rgb.height())?;
    let ctx = MatchContext { h_gt: None, valid_a: Some(&warped.valid) };
    let matches = matcher.match_pair(&warped.image, b_rgb, &ctx)?;
    let corrs = matches.correspondences();
    let result = estimate_ransac(&corrs, ransac).map_err(|source| IrapError::Residual { matches: corrs.len(), source })?;
    Ok(ResidualResult { h2: result.model, ransac: result, match_count: corrs.len() })
}

/// Estimates the residual `H₂` after warping `a_rgb` into B's frame with `h1`.
///
/// The first round must succeed. A later round that fails leaves the
/// previous estimate in place. `ransac` and `match_count` describe the last
/// successful round.
pub fn refine_residual(
    a_rgb: &Image,
    b_rgb: &Image,
    h1: &Homography,
    matcher: &dyn PairMatcher,
    ransac: &RansacConfig,
) -> Result<ResidualResult, IrapError> {
    let mut out = residual_pass(a_rgb, b_rgb, h1, matcher, ransac)?;
    for _ in 1..RESIDUAL_PASSES {
        let current = Homography::compose(&out.h2, h1)?;
        let Ok(next) = residual_pass(a_rgb, b_rgb, &current, matcher, ransac) else { break };
        let h2 = Homography::compose(&next.h2, &out.h2)?;
        out = ResidualResult { h2, ..next };
    }
    Ok(out)
}

/// Ground truth from seed and residual: `H_gt(p) = H₂(H₁(p))`.
pub fn compose_gt(h2: &Homography, h1: &Homography) -> Result<Homography, IrapError> {
    Ok(Homography::compose(h2, h1)?)
}

/// Per-region intensity remap used for pseudo-NIR synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionRemap {
    Identity,
    Gamma(f64),
    Invert,
}

impl RegionRemap {
    pub fn apply(self, v: f64) -> f64 {
        let v = v.clamp(0.0, 1.0);
        match self {
            RegionRemap::Identity => v,
            RegionRemap::Gamma(g) => v.powf(g),
            RegionRemap::Invert => 1.0 - v,
        }
    }
}

/// One seeded remap per class: inversion or a gamma in `[0.5, 2]`.
pub fn draw_remaps(num_classes: u32, seed: u64) -> Vec<RegionRemap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_classes)
        .map(|_| if rng.random_bool(0.5) { RegionRemap::Invert } else { RegionRemap::Gamma(rng.random_range(0.5..=2.0)) })
        .collect()
}

/// Applies `remaps[class - 1]` to every pixel of a single-channel image.
pub fn apply_region_remaps(img: &Image, regions: &SemanticLabelMap, remaps: &[RegionRemap]) -> Result<Image, IrapError> {
    if img.channels() != 1 {
        return Err(ImageError::InvalidChannels { expected: 1, found: img.channels() }.into());
    }
    if !regions.covers(img.width(), img.height()) {
        return Err(SemanticError::Dimension(format!(
            "{}x{} region grid of cell {} does not cover a {}x{} image",
            regions.grid_width,
            regions.grid_height,
            regions.cell,
            img.width(),
            img.height()
        ))
        .into());
    }
    if remaps.len() != regions.num_classes as usize {
        return Err(SemanticError::Dimension(format!("{} remaps for {} classes", remaps.len(), regions.num_classes)).into());
    }
    Ok(Image::from_fn(img.width(), img.height(), |i, j| {
        remaps[regions.class_at_pixel(i, j) as usize - 1].apply(img.at(i, j)).clamp(0.0, 1.0)
    }))
}

pub fn synthesize_pseudo_nir(img: &Image, regions: &SemanticLabelMap, seed: u64) -> Result<Image, IrapError> {
    apply_region_remaps(img, regions, &draw_remaps(regions.num_classes, seed))
}

/// Region map from mean patch intensity quantized into `num_classes` levels.
pub fn intensity_regions(gray: &Image, cell: usize, num_classes: u32) -> Result<SemanticLabelMap, IrapError> {
    let (w, h) = (gray.width(), gray.height());
    let (gw, gh) = (w.div_ceil(cell), h.div_ceil(cell));
    let mut ids = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            let (mut sum, mut n) = (0.0, 0usize);
            for i in gy * cell..((gy + 1) * cell).min(h) {
                for j in gx * cell..((gx + 1) * cell).min(w) {
                    sum += gray.at(i, j);
                    n += 1;
                }
            }
            let level = ((sum / n as f64) * num_classes as f64).floor() as u32;
            ids.push(level.min(num_classes - 1) + 1);
        }
    }
    Ok(SemanticLabelMap::new(gw, gh, cell, num_classes, ids, vec![1.0; gw * gh])?)
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    // anti-aliased inside test with a one-pixel ramp
    (0.5 - x / edge).clamp(0.0, 1.0)
}

/// Seeded RGB test scene: smooth color gradients plus textured shapes.
pub fn synthetic_scene(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            [
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.08),
            ]
        })
        .collect();
    struct Shape {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        cos: f64,
        sin: f64,
        ellipse: bool,
        color: [f64; 3],
        stripe: f64,
    }
    let shapes: Vec<Shape> = (0..60)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Shape {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                rx: rng.random_range(3.0..w / 8.0),
                ry: rng.random_range(3.0..h / 8.0),
                cos: angle.cos(),
                sin: angle.sin(),
                ellipse: rng.random_bool(0.5),
                color: [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)],
                stripe: rng.random_range(0.2..1.2),
            }
        })
        .collect();
    let mut data = Vec::with_capacity(width * height * 3);
    for i in 0..height {
        for j in 0..width {
            let (x, y) = (j as f64, i as f64);
            let mut px = [0.5; 3];
            for (k, wv) in waves.iter().enumerate() {
                px[k % 3] += wv[3] * (wv[0] * x + wv[1] * y + wv[2]).sin();
            }
            for s in &shapes {
                let (dx, dy) = (x - s.cx, y - s.cy);
                let u = (s.cos * dx + s.sin * dy) / s.rx;
                let v = (-s.sin * dx + s.cos * dy) / s.ry;
                let d = if s.ellipse { (u * u + v * v).sqrt() - 1.0 } else { u.abs().max(v.abs()) - 1.0 };
                let alpha = smoothstep(2.0 / s.rx.min(s.ry), d);
                if alpha > 0.0 {
                    let tex = 0.85 + 0.15 * (s.stripe * (s.cos * dx + s.sin * dy)).sin();
                    for (v, col) in px.iter_mut().zip(s.color) {
                        *v = *v * (1.0 - alpha) + alpha * col * tex;
                    }
                }
            }
            data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    Image::new(width, height, 3, data).expect("scene dimensions")
}

/// Seeded homography that moves each image corner by at most
/// `max_fraction` of the side length, with the displacement drawn uniformly
/// from a disc in side-normalized units. Folded quads are redrawn.
pub fn random_homography(width: usize, height: usize, max_fraction: f64, rng: &mut impl Rng) -> Homography {
    let (w, h) = (width as f64, height as f64);
    let corners = image_corners(width, height);
    loop {
        let moved: Vec<PixelCoord> = corners
            .iter()
            .map(|c| {
                let r = max_fraction * rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                PixelCoord::new(c.x + r * t.cos() * w, c.y + r * t.sin() * h)
            })
            .collect();
        // corners come as (0,0), (w,0), (0,h), (w,h); walk them as a loop
        let quad = [moved[0], moved[1], moved[3], moved[2]];
        let convex = (0..4).all(|k| {
            let (p, q, r) = (quad[k], quad[(k + 1) % 4], quad[(k + 2) % 4]);
            (q.x - p.x) * (r.y - q.y) - (q.y - p.y) * (r.x - q.x) > 1.0
        });
        if !convex {
            continue;
        }
        let corrs: Vec<Correspondence> = corners.iter().zip(&moved).map(|(a, b)| Correspondence::new(*a, *b)).collect();
        if let Ok(hm) = estimate_dlt(&corrs) {
            return hm;
        }
    }
}

/// The four images of a synthetic quadruplet and the planted ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticQuadruplet {
    pub a_rgb: Image,
    pub a_nir: Image,
    pub b_rgb: Image,
    pub b_nir: Image,
    pub planted: Homography,
    pub regions: SemanticLabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisConfig {
    pub max_corner_fraction: f64,
    pub region_cell: usize,
    pub region_classes: u32,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { max_corner_fraction: 0.25, region_cell: 32, region_classes: 4 }
    }
}

/// Builds a quadruplet from an RGB base: pair A is the base with its
/// pseudo-NIR, pair B is pair A warped by `planted`.
pub fn synthesize_quadruplet(
    base: &Image,
    planted: Homography,
    seed: u64,
    config: &SynthesisConfig,
) -> Result<SyntheticQuadruplet, IrapError> {
    let a_rgb = if base.channels() == 3 { base.clone() } else { base.to_gray() };
    let gray = a_rgb.to_gray();
    let regions = intensity_regions(&gray, config.region_cell, config.region_classes)?;
    let a_nir = synthesize_pseudo_nir(&gray, &regions, seed)?;
    let (w, h) = (a_rgb.width(), a_rgb.height());
    let b_rgb = warp_perspective(&a_rgb, &planted, w, h)?.image;
    let b_nir = warp_perspective(&a_nir, &planted, w, h)?.image;
    Ok(SyntheticQuadruplet { a_rgb, a_nir, b_rgb, b_nir, planted, regions })
}

/// `n` points spread over the interior of A whose images under `h` stay
/// inside a `width x height` B frame, as exact click pairs.
pub fn exact_clicks(h: &Homography, width: usize, height: usize, n: usize) -> Vec<Correspondence> {
    let (w, hh) = (width as f64, height as f64);
    let mut out = Vec::new();
    let steps = 12usize;
    'outer: for gy in 0..steps {
        for gx in 0..steps {
            // visit the lattice in a scattered order so a prefix covers the image
            let (fx, fy) = (((gx * 7 + gy * 5) % steps) as f64 + 0.5, ((gy * 7 + gx * 3) % steps) as f64 + 0.5);
            let p = PixelCoord::new(fx / steps as f64 * (w - 1.0), fy / steps as f64 * (hh - 1.0));
            if let Ok(q) = h.apply(p) {
                if q.x >= 0.0 && q.y >= 0.0 && q.x <= w - 1.0 && q.y <= hh - 1.0 && !out.iter().any(|c: &Correspondence| c.src == p) {
                    out.push(Correspondence::new(p, q));
                    if out.len() == n {
                        break 'outer;
                    }
                }
            }
        }
    }
    out
}
