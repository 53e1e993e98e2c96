//! Homography-estimation evaluation over the derived pairs of a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use irap_core::geometry::{auc_corner_error, corner_error, estimate_ransac, RansacConfig};
use irap_core::irap::{DatasetManifest, DerivedPair, PairKind, Split};
use irap_core::matcher::{MatchContext, PairMatcher};
use irap_core::par::Execution;
use irap_core::warp::{rescale_homography, resize, resize_scale, resized_dims};
use serde::{Deserialize, Serialize};

use crate::error::CommandError;
use crate::{load_manifest, load_slot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub resize_shorter_side: usize,
    pub max_matches: usize,
    pub auc_thresholds: Vec<f64>,
    pub ransac: RansacConfig,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { resize_shorter_side: 480, max_matches: 1000, auc_thresholds: vec![3.0, 5.0, 10.0], ransac: RansacConfig::default() }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), CommandError> {
        if self.resize_shorter_side == 0 || self.max_matches == 0 {
            return Err(CommandError::Argument("shorter side and match cap must be positive".into()));
        }
        if self.auc_thresholds.is_empty()
            || self.auc_thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0))
            || self.auc_thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(CommandError::Argument(format!("thresholds {:?} must be positive and strictly increasing", self.auc_thresholds)));
        }
        Ok(())
    }

    /// RANSAC seed for the `index`-th evaluated pair.
    pub fn pair_seed(&self, index: usize) -> u64 {
        self.ransac.seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub quadruplet_id: String,
    pub kind: PairKind,
    pub split: Split,
    /// `None` when estimation failed; such pairs count as infinite error.
    pub corner_error: Option<f64>,
    pub matches: usize,
    pub inliers: usize,
}

impl PairOutcome {
    pub fn error_or_inf(&self) -> f64 {
        self.corner_error.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub pair_count: usize,
    /// AUC per protocol threshold, percent.
    pub auc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub protocol: EvalProtocol,
    pub pairs: Vec<PairOutcome>,
    /// `all` first, then each split present.
    pub summary: Vec<SplitSummary>,
}

impl EvalReport {
    pub fn summary_for(&self, split: &str) -> Option<&SplitSummary> {
        self.summary.iter().find(|s| s.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let heads: Vec<String> = self.protocol.auc_thresholds.iter().map(|t| format!("AUC@{t}px")).collect();
        let _ =
            writeln!(s, "{:<16} {:<10} {:>6} {}", "method", "split", "pairs", heads.iter().map(|h| format!("{h:>10}")).collect::<String>());
        for row in &self.summary {
            let vals: String = row.auc.iter().map(|v| format!("{v:>10.2}")).collect();
            let _ = writeln!(s, "{:<16} {:<10} {:>6} {vals}", self.method, row.split, row.pair_count);
        }
        s
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Aligned => "aligned",
        Split::Viewpoint => "viewpoint",
    }
}

fn summarize(errors: &[f64], split: &str, thresholds: &[f64]) -> Result<SplitSummary, CommandError> {
    let auc = thresholds
        .iter()
        .map(|&t| auc_corner_error(errors, t).map_err(|e| CommandError::Argument(e.to_string())))
        .collect::<Result<_, _>>()?;
    Ok(SplitSummary { split: split.into(), pair_count: errors.len(), auc })
}

fn evaluate_pair(
    manifest_path: &Path,
    manifest: &DatasetManifest,
    pair: &DerivedPair,
    index: usize,
    protocol: &EvalProtocol,
    matcher: &dyn PairMatcher,
) -> Result<PairOutcome, CommandError> {
    let quad = manifest
        .quadruplet(&pair.quadruplet_id)
        .ok_or_else(|| CommandError::Argument(format!("pair names unknown quadruplet {}", pair.quadruplet_id)))?;
    let (a, b) = (load_slot(manifest_path, quad, pair.source)?, load_slot(manifest_path, quad, pair.target)?);
    let (aw, ah) = resized_dims(a.width(), a.height(), protocol.resize_shorter_side);
    let (bw, bh) = resized_dims(b.width(), b.height(), protocol.resize_shorter_side);
    let h_gt = rescale_homography(&pair.h_gt, &resize_scale(a.width(), a.height(), aw, ah), &resize_scale(b.width(), b.height(), bw, bh))
        .map_err(|e| CommandError::Argument(e.to_string()))?;
    let (a, b) = (resize(&a, aw, ah), resize(&b, bw, bh));
    let mut outcome = PairOutcome {
        quadruplet_id: pair.quadruplet_id.clone(),
        kind: pair.kind,
        split: pair.split,
        corner_error: None,
        matches: 0,
        inliers: 0,
    };
    let mut set = match matcher.match_pair(&a, &b, &MatchContext { h_gt: Some(&h_gt), valid_a: None }) {
        Ok(set) => set,
        Err(e) => {
            log::warn!("{} {}: matcher failed: {e}", pair.quadruplet_id, pair.kind.as_str());
            return Ok(outcome);
        }
    };
    set.cap(protocol.max_matches);
    outcome.matches = set.len();
    let config = RansacConfig { seed: protocol.pair_seed(index), ..protocol.ransac };
    match estimate_ransac(&set.correspondences(), &config) {
        Ok(r) => {
            outcome.inliers = r.inlier_count();
            outcome.corner_error = corner_error(&r.model, &h_gt, aw, ah).ok().filter(|e| e.is_finite());
        }
        Err(e) => log::debug!("{} {}: {e}", pair.quadruplet_id, pair.kind.as_str()),
    }
    Ok(outcome)
}

/// Evaluates `matcher` on every derived pair (optionally restricted to
/// `kinds`) of the manifest.
pub fn evaluate(
    manifest_path: &Path,
    protocol: &EvalProtocol,
    matcher: &dyn PairMatcher,
    kinds: Option<&[PairKind]>,
) -> Result<EvalReport, CommandError> {
    protocol.validate()?;
    let manifest = load_manifest(manifest_path)?;
    if manifest.accepted().next().is_none() {
        return Err(CommandError::NoAcceptedRecords);
    }
    let pairs: Vec<&DerivedPair> = manifest.pairs.iter().filter(|p| kinds.is_none_or(|k| k.contains(&p.kind))).collect();
    if pairs.is_empty() {
        return Err(CommandError::Argument("no derived pairs of the requested kinds".into()));
    }
    let outcomes = Execution::default().map_range(pairs.len(), |i| evaluate_pair(manifest_path, &manifest, pairs[i], i, protocol, matcher));
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;

    let all: Vec<f64> = outcomes.iter().map(PairOutcome::error_or_inf).collect();
    let mut summary = vec![summarize(&all, "all", &protocol.auc_thresholds)?];
    let mut by_split: BTreeMap<Split, Vec<f64>> = BTreeMap::new();
    for o in &outcomes {
        by_split.entry(o.split).or_default().push(o.error_or_inf());
    }
    for (split, errors) in by_split {
        summary.push(summarize(&errors, split_name(split), &protocol.auc_thresholds)?);
    }
    Ok(EvalReport { method: matcher.name().to_owned(), protocol: protocol.clone(), pairs: outcomes, summary })
}
