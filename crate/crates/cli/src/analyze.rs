//! Gradient-distribution and inconsistency analysis over a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use irap_core::geometry::{estimate_ransac, Homography, RansacConfig};
use irap_core::gradient::{
    bin_epe_by_q, grid_patch_gradients, inconsistency_q, patch_gradient_at, write_q_epe_csv, GradientDistribution, InconsistencyCurve,
    PatchGradient, QEpeSample,
};
use irap_core::image::{compute_gradient_field, GradientField, Image, PixelCoord};
use irap_core::irap::{PairKind, Slot};
use irap_core::matcher::{MatchContext, PairMatcher};
use irap_core::par::Execution;
use serde::{Deserialize, Serialize};

use crate::error::CommandError;
use crate::{load_manifest, load_slot};

/// How (Q, EPE) samples are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// One sample per match: Q between the patch at the match's A point and
    /// the patch at its ground-truth image in B; EPE of the matched B point.
    Matches,
    /// One sample per grid patch of A; EPE of the pair's RANSAC estimate at
    /// the patch center.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub patch_size: usize,
    pub bins: usize,
    pub q_bins: usize,
    pub pairing: Pairing,
    pub kinds: Vec<PairKind>,
    pub ransac: RansacConfig,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            patch_size: 16,
            bins: 8,
            q_bins: 10,
            pairing: Pairing::Matches,
            kinds: vec![PairKind::RgbNir, PairKind::NirRgb],
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityDistributions {
    pub benchmark: String,
    pub rgb: GradientDistribution,
    pub nir: GradientDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub method: String,
    pub pairs: usize,
    pub samples: usize,
    pub mean_q: Option<f64>,
    pub curve: InconsistencyCurve,
    pub distributions: ModalityDistributions,
    pub files: Vec<PathBuf>,
}

fn field_of(img: &Image) -> Result<GradientField, CommandError> {
    compute_gradient_field(&img.to_gray()).map_err(|e| CommandError::Argument(e.to_string()))
}

fn pair_samples(
    a: &GradientField,
    b: &GradientField,
    img_a: &Image,
    img_b: &Image,
    h_gt: &Homography,
    matcher: &dyn PairMatcher,
    opts: &AnalyzeOptions,
) -> Result<Vec<QEpeSample>, CommandError> {
    let (l, k) = (opts.patch_size, opts.bins);
    let sample =
        |pa: &PatchGradient, center_b| -> Option<f64> { patch_gradient_at(b, center_b, l, k).and_then(|pb| inconsistency_q(pa, &pb).ok()) };
    let set = matcher
        .match_pair(img_a, img_b, &MatchContext { h_gt: Some(h_gt), valid_a: None })
        .map_err(|e| CommandError::Argument(e.to_string()))?;
    let mut out = Vec::new();
    match opts.pairing {
        Pairing::Matches => {
            for m in &set.matches {
                let Ok(gt) = h_gt.apply(m.a) else { continue };
                let Some(pa) = patch_gradient_at(a, m.a, l, k) else { continue };
                if let Some(q) = sample(&pa, gt) {
                    out.push(QEpeSample { q, epe: m.b.distance(&gt) });
                }
            }
        }
        Pairing::Dense => {
            let Ok(est) = estimate_ransac(&set.correspondences(), &opts.ransac) else {
                return Ok(out);
            };
            let patches = grid_patch_gradients(a, l, k, Execution::Sequential).map_err(|e| CommandError::Argument(e.to_string()))?;
            let half = (l as f64 - 1.0) / 2.0;
            for pa in &patches {
                let c = PixelCoord::new(pa.origin.x + half, pa.origin.y + half);
                let (Ok(gt), Ok(p)) = (h_gt.apply(c), est.model.apply(c)) else { continue };
                if let Some(q) = sample(pa, gt) {
                    out.push(QEpeSample { q, epe: p.distance(&gt) });
                }
            }
        }
    }
    Ok(out)
}

/// Runs the gradient analysis and writes `distributions.json`,
/// `q_epe_<method>.csv` and `curve_<method>.json` into `out_dir`.
pub fn analyze(
    manifest_path: &Path,
    out_dir: &Path,
    matcher: &dyn PairMatcher,
    opts: &AnalyzeOptions,
) -> Result<AnalyzeSummary, CommandError> {
    if opts.patch_size == 0 || opts.bins == 0 || opts.q_bins < 2 {
        return Err(CommandError::Argument("patch size and bins must be positive, Q bins at least 2".into()));
    }
    let manifest = load_manifest(manifest_path)?;
    let quads: Vec<_> = manifest.quadruplets().collect();
    if quads.is_empty() {
        return Err(CommandError::Input(format!("{} lists no quadruplets", manifest_path.display())));
    }

    let mut rgb_patches = Vec::new();
    let mut nir_patches = Vec::new();
    for q in &quads {
        for slot in Slot::ALL {
            let field = field_of(&load_slot(manifest_path, q, slot)?)?;
            let sink = if matches!(slot, Slot::ARgb | Slot::BRgb) { &mut rgb_patches } else { &mut nir_patches };
            sink.extend(
                grid_patch_gradients(&field, opts.patch_size, opts.bins, Execution::default())
                    .map_err(|e| CommandError::Argument(e.to_string()))?,
            );
        }
    }
    let dist = |p: &[PatchGradient]| GradientDistribution::from_patches(p).map_err(|e| CommandError::Argument(e.to_string()));
    let distributions = ModalityDistributions {
        benchmark: manifest_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        rgb: dist(&rgb_patches)?,
        nir: dist(&nir_patches)?,
    };

    let pairs: Vec<_> = manifest.pairs.iter().filter(|p| opts.kinds.contains(&p.kind)).collect();
    let per_pair = Execution::default().map(&pairs, |p| -> Result<Vec<QEpeSample>, CommandError> {
        let q = manifest.quadruplet(&p.quadruplet_id).expect("validated manifest");
        let (img_a, img_b) = (load_slot(manifest_path, q, p.source)?, load_slot(manifest_path, q, p.target)?);
        pair_samples(&field_of(&img_a)?, &field_of(&img_b)?, &img_a, &img_b, &p.h_gt, matcher, opts)
    });
    let mut samples = Vec::new();
    for s in per_pair {
        samples.extend(s?);
    }
    let curve = bin_epe_by_q(&samples, opts.q_bins).map_err(|e| CommandError::Argument(e.to_string()))?;
    let mean_q = (!samples.is_empty()).then(|| samples.iter().map(|s| s.q).sum::<f64>() / samples.len() as f64);

    fs::create_dir_all(out_dir).map_err(|e| CommandError::Input(format!("{}: {e}", out_dir.display())))?;
    let method = matcher.name().to_owned();
    let files =
        vec![out_dir.join("distributions.json"), out_dir.join(format!("q_epe_{method}.csv")), out_dir.join(format!("curve_{method}.json"))];
    let io = |e: std::io::Error| CommandError::Other(e.into());
    fs::write(&files[0], serde_json::to_string_pretty(&distributions).expect("serializable")).map_err(io)?;
    let csv = fs::File::create(&files[1]).map_err(io)?;
    write_q_epe_csv(&samples, csv).map_err(|e| CommandError::Argument(e.to_string()))?;
    fs::write(&files[2], serde_json::to_string_pretty(&curve).expect("serializable")).map_err(io)?;

    Ok(AnalyzeSummary { method, pairs: pairs.len(), samples: samples.len(), mean_q, curve, distributions, files })
}
