//! Semantic injection and the matching loss terms.
//!
//! [`sim_refine`] standardizes every descriptor channel across positions and
//! re-scales it with a scale and shift predicted from a pooled semantic
//! vector:
//!
//! ```text
//! out_c = γ_c(h_s) · (in_c − μ_c) / max(σ_c, ε) + β_c(h_s)
//! ```
//!
//! `γ` and `β` are affine maps of `h_s`. The semantic triplet loss uses the
//! top-`T` most confident patches of each class with hardest-positive and
//! hardest-negative mining.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, PixelCoord};
use crate::matcher::{GtMatrix, ScoreMatrix};
use crate::par::Execution;

/// Floor for the channel standard deviation.
pub const STD_EPS: f64 = 1e-6;
/// Floor applied to dual-softmax probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SemanticError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("only one semantic class among the selected patches")]
    SingleClass,
    #[error("no patches selected")]
    EmptySelection,
    #[error("empty ground-truth matrix")]
    EmptyGroundTruth,
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Per-patch class ids in `1..=num_classes` with confidences in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticLabelMap {
    pub grid_width: usize,
    pub grid_height: usize,
    /// Patch side in pixels.
    pub cell: usize,
    pub num_classes: u32,
    pub class_ids: Vec<u32>,
    pub confidences: Vec<f64>,
}

impl SemanticLabelMap {
    pub fn new(
        grid_width: usize,
        grid_height: usize,
        cell: usize,
        num_classes: u32,
        class_ids: Vec<u32>,
        confidences: Vec<f64>,
    ) -> Result<Self, SemanticError> {
        let n = grid_width * grid_height;
        if n == 0 || cell == 0 || num_classes == 0 {
            return Err(SemanticError::Argument("empty label grid".into()));
        }
        if class_ids.len() != n || confidences.len() != n {
            return Err(SemanticError::Dimension(format!(
                "{grid_width}x{grid_height} grid with {} ids and {} confidences",
                class_ids.len(),
                confidences.len()
            )));
        }
        if let Some(c) = class_ids.iter().find(|&&c| c == 0 || c > num_classes) {
            return Err(SemanticError::Argument(format!("class id {c} outside 1..={num_classes}")));
        }
        if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(SemanticError::Argument(format!("confidence {c} outside [0, 1]")));
        }
        Ok(Self { grid_width, grid_height, cell, num_classes, class_ids, confidences })
    }

    /// Every patch labelled `class` with confidence 1.
    pub fn uniform(grid_width: usize, grid_height: usize, cell: usize, num_classes: u32, class: u32) -> Result<Self, SemanticError> {
        let n = grid_width * grid_height;
        Self::new(grid_width, grid_height, cell, num_classes, vec![class; n], vec![1.0; n])
    }

    /// Builds a map from an 8-bit index image (class id = pixel value, capped
    /// into `1..=num_classes`) and a confidence image (value / 255). One
    /// image pixel per patch.
    pub fn from_index_images(index: &Image, confidence: &Image, cell: usize, num_classes: u32) -> Result<Self, SemanticError> {
        if index.channels() != 1 || confidence.channels() != 1 {
            return Err(SemanticError::Dimension("label images must be single-channel".into()));
        }
        if (index.width(), index.height()) != (confidence.width(), confidence.height()) {
            return Err(SemanticError::Dimension("index and confidence images differ in size".into()));
        }
        let ids = index.to_bytes().into_iter().map(|v| u32::from(v).clamp(1, num_classes)).collect();
        Self::new(index.width(), index.height(), cell, num_classes, ids, confidence.data().to_vec())
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Label of the patch containing pixel `(i, j)`.
    pub fn class_at_pixel(&self, i: usize, j: usize) -> u32 {
        let gy = (i / self.cell).min(self.grid_height - 1);
        let gx = (j / self.cell).min(self.grid_width - 1);
        self.class_ids[gy * self.grid_width + gx]
    }

    /// True when the grid covers a `width x height` image exactly to the cell.
    pub fn covers(&self, width: usize, height: usize) -> bool {
        self.grid_width == width.div_ceil(self.cell) && self.grid_height == height.div_ceil(self.cell)
    }

    /// Global average pooling of confidence-weighted one-hot class maps.
    pub fn pooled_vector(&self) -> SemanticVector {
        let mut v = vec![0.0; self.num_classes as usize];
        for (&c, &p) in self.class_ids.iter().zip(&self.confidences) {
            v[c as usize - 1] += p;
        }
        let n = self.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        SemanticVector(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticVector(pub Vec<f64>);

/// `y = W x + b` with `W` stored row-major (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineMap {
    pub fn constant(inputs: usize, outputs: usize, value: f64) -> Self {
        Self { inputs, outputs, weight: vec![0.0; inputs * outputs], bias: vec![value; outputs] }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, SemanticError> {
        if x.len() != self.inputs || self.weight.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(SemanticError::Dimension(format!("affine map {}->{} applied to a {}-vector", self.inputs, self.outputs, x.len())));
        }
        Ok((0..self.outputs)
            .map(|o| self.bias[o] + self.weight[o * self.inputs..(o + 1) * self.inputs].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Semantic-conditioned scale and shift maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub gamma: AffineMap,
    pub beta: AffineMap,
}

impl SimParams {
    /// `γ ≡ 1`, `β ≡ 0`: plain channel standardization.
    pub fn standardizing(semantic_dim: usize, channels: usize) -> Self {
        Self { gamma: AffineMap::constant(semantic_dim, channels, 1.0), beta: AffineMap::constant(semantic_dim, channels, 0.0) }
    }

    /// Standardization plus small seeded weights.
    pub fn seeded(semantic_dim: usize, channels: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::standardizing(semantic_dim, channels);
        for w in p.gamma.weight.iter_mut().chain(p.beta.weight.iter_mut()) {
            *w = rng.random_range(-scale..=scale);
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.gamma.param_count() + self.beta.param_count()
    }

    /// Flattened parameters: gamma weight, gamma bias, beta weight, beta bias.
    pub fn to_vec(&self) -> Vec<f64> {
        [&self.gamma.weight, &self.gamma.bias, &self.beta.weight, &self.beta.bias].into_iter().flatten().copied().collect()
    }

    pub fn set_from_slice(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.param_count());
        let mut it = v.iter().copied();
        for slot in self
            .gamma
            .weight
            .iter_mut()
            .chain(self.gamma.bias.iter_mut())
            .chain(self.beta.weight.iter_mut())
            .chain(self.beta.bias.iter_mut())
        {
            *slot = it.next().expect("length checked");
        }
    }
}

/// `n` descriptors of `d` channels, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorBatch {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    /// Optional spatial layout `(grid_width, grid_height)` with `w * h = n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<(usize, usize)>,
}

impl DescriptorBatch {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self, SemanticError> {
        if data.len() != n * d {
            return Err(SemanticError::Dimension(format!("{} values for {n}x{d}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SemanticError::Argument("non-finite descriptor value".into()));
        }
        Ok(Self { n, d, data, grid: None })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SemanticError> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(SemanticError::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.d..(k + 1) * self.d]
    }

    /// Channel means and population standard deviations across positions.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n as f64;
        let mut mean = vec![0.0; self.d];
        for k in 0..self.n {
            for (m, v) in mean.iter_mut().zip(self.row(k)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.d];
        for k in 0..self.n {
            for ((s, v), m) in var.iter_mut().zip(self.row(k)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        (mean, var.into_iter().map(|s| (s / n).sqrt()).collect())
    }
}

pub fn sim_refine(batch: &DescriptorBatch, semantic: &SemanticVector, params: &SimParams) -> Result<DescriptorBatch, SemanticError> {
    if batch.n < 2 {
        return Err(SemanticError::Dimension(format!("need at least 2 positions, got {}", batch.n)));
    }
    let gamma = params.gamma.apply(&semantic.0)?;
    let beta = params.beta.apply(&semantic.0)?;
    if gamma.len() != batch.d || beta.len() != batch.d {
        return Err(SemanticError::Dimension(format!("{} channels but maps produce {} and {}", batch.d, gamma.len(), beta.len())));
    }
    let (mean, std) = batch.channel_stats();
    let mut data = Vec::with_capacity(batch.data.len());
    for k in 0..batch.n {
        for (c, v) in batch.row(k).iter().enumerate() {
            data.push(gamma[c] * (v - mean[c]) / std[c].max(STD_EPS) + beta[c]);
        }
    }
    Ok(DescriptorBatch { n: batch.n, d: batch.d, data, grid: batch.grid })
}

/// Descriptor-space distance used by the triplet loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            Metric::Euclidean => sq.sqrt(),
            Metric::SquaredEuclidean => sq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_st: f64,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub margin: f64,
    pub top_t: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_st: 1e-2, lambda_c: 1.0, lambda_f: 1.0, margin: 0.3, top_t: 100 }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<(), SemanticError> {
        let ok = [self.lambda_st, self.lambda_c, self.lambda_f, self.margin].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !ok || self.top_t == 0 {
            return Err(SemanticError::Argument(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Indices of the top-`t` patches of every class present, ordered by
/// confidence (descending) then index.
pub fn select_top_t(labels: &SemanticLabelMap, t: usize) -> Vec<(u32, Vec<usize>)> {
    let mut out = Vec::new();
    for class in 1..=labels.num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&k| labels.class_ids[k] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.sort_by(|&a, &b| labels.confidences[b].total_cmp(&labels.confidences[a]).then(a.cmp(&b)));
        members.truncate(t);
        out.push((class, members));
    }
    out
}

pub fn semantic_triplet_loss(batch: &DescriptorBatch, labels: &SemanticLabelMap, weights: &LossWeights) -> Result<f64, SemanticError> {
    semantic_triplet_loss_with(batch, labels, weights, Metric::Euclidean)
}

/// Sum over classes and selected anchors of
/// `[m + max_p D(a, p) − min_n D(a, n)]₊`. Anchors without another
/// same-class patch are skipped.
pub fn semantic_triplet_loss_with(
    batch: &DescriptorBatch,
    labels: &SemanticLabelMap,
    weights: &LossWeights,
    metric: Metric,
) -> Result<f64, SemanticError> {
    weights.validate()?;
    if batch.n != labels.len() {
        return Err(SemanticError::Dimension(format!("{} descriptors but {} labels", batch.n, labels.len())));
    }
    let selected = select_top_t(labels, weights.top_t);
    if selected.is_empty() {
        return Err(SemanticError::EmptySelection);
    }
    if selected.len() < 2 {
        return Err(SemanticError::SingleClass);
    }
    let mut loss = 0.0;
    for (ci, (_, members)) in selected.iter().enumerate() {
        for &a in members {
            let anchor = batch.row(a);
            let hardest_pos = members
                .iter()
                .filter(|&&p| p != a)
                .map(|&p| metric.distance(anchor, batch.row(p)))
                .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |m| m.max(d))));
            let Some(hardest_pos) = hardest_pos else { continue };
            let hardest_neg = selected
                .iter()
                .enumerate()
                .filter(|(cj, _)| *cj != ci)
                .flat_map(|(_, (_, other))| other.iter())
                .map(|&n| metric.distance(anchor, batch.row(n)))
                .fold(f64::INFINITY, f64::min);
            loss += (weights.margin + hardest_pos - hardest_neg).max(0.0);
        }
    }
    Ok(loss)
}

/// Cross entropy over ground-truth cells: `−mean log M_ds(i, j)`.
pub fn coarse_matching_loss(m_ds: &ScoreMatrix, m_gt: &GtMatrix) -> Result<f64, SemanticError> {
    if m_gt.is_empty() {
        return Err(SemanticError::EmptyGroundTruth);
    }
    // compensated sum, so equal terms add up exactly whenever representable
    let (mut total, mut carry) = (0.0f64, 0.0f64);
    for &(i, j) in &m_gt.cells {
        if i >= m_ds.rows || j >= m_ds.cols {
            return Err(SemanticError::Dimension(format!("cell ({i}, {j}) outside {}x{}", m_ds.rows, m_ds.cols)));
        }
        let p = m_ds.get(i, j);
        if !(p <= 1.0) {
            return Err(SemanticError::Argument(format!("probability {p} at ({i}, {j})")));
        }
        let term = -p.max(PROB_FLOOR).ln();
        let next = total + term;
        carry += if total.abs() >= term.abs() { (total - next) + term } else { (term - next) + total };
        total = next;
    }
    Ok((total + carry) / m_gt.len() as f64)
}

/// Mean squared distance between predicted and ground-truth fine positions.
pub fn fine_matching_loss(pred: &[PixelCoord], gt: &[PixelCoord]) -> Result<f64, SemanticError> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(SemanticError::Dimension(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

/// `λ₁ L_st + λ₂ L_c + λ₃ L_f`.
pub fn total_loss(l_st: f64, l_c: f64, l_f: f64, weights: &LossWeights) -> f64 {
    weights.lambda_st * l_st + weights.lambda_c * l_c + weights.lambda_f * l_f
}

/// One batch of descriptors with its labels and pooled semantic vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub batch: DescriptorBatch,
    pub labels: SemanticLabelMap,
    pub semantic: SemanticVector,
}

impl TrainingSample {
    /// Pairs a batch with its labels, pooling the semantic vector from them.
    pub fn new(batch: DescriptorBatch, labels: SemanticLabelMap) -> Self {
        let semantic = labels.pooled_vector();
        Self { batch, labels, semantic }
    }
}

/// Summed triplet loss of the refined samples under `params`.
pub fn refined_triplet_loss(samples: &[TrainingSample], params: &SimParams, weights: &LossWeights) -> Result<f64, SemanticError> {
    samples.iter().try_fold(0.0, |acc, s| {
        let refined = sim_refine(&s.batch, &s.semantic, params)?;
        Ok(acc + semantic_triplet_loss(&refined, &s.labels, weights)?)
    })
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient<F>(f: F, x: &[f64], h: f64, exec: Execution) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    exec.map_range(x.len(), |k| {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[k] += h;
        minus[k] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: SimParams,
    /// Loss before the first step and after every step.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Range of the seeded initial weights.
    pub init_scale: f64,
    pub exec: Execution,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { steps: 100, step_size: 0.01, seed: 0, init_scale: 0.01, exec: Execution::default() }
    }
}

/// Gradient descent on [`SimParams`] using numeric gradients of the refined
/// triplet loss.
pub fn fit_sim_params(samples: &[TrainingSample], weights: &LossWeights, config: &FitConfig) -> Result<FitResult, SemanticError> {
    let first = samples.first().ok_or(SemanticError::EmptySelection)?;
    if config.steps == 0 {
        return Err(SemanticError::Argument("steps must be at least 1".into()));
    }
    if !(config.step_size >= 0.0 && config.step_size.is_finite()) {
        return Err(SemanticError::Argument(format!("step size {}", config.step_size)));
    }
    let init = SimParams::seeded(first.semantic.0.len(), first.batch.d, config.init_scale, config.seed);
    fit_sim_params_from(samples, weights, init, config)
}

/// Like [`fit_sim_params`] but starting from the given parameters.
pub fn fit_sim_params_from(
    samples: &[TrainingSample],
    weights: &LossWeights,
    init: SimParams,
    config: &FitConfig,
) -> Result<FitResult, SemanticError> {
    let mut params = init;
    let mut trace = vec![refined_triplet_loss(samples, &params, weights)?];
    let template = params.clone();
    let objective = |theta: &[f64]| {
        let mut p = template.clone();
        p.set_from_slice(theta);
        refined_triplet_loss(samples, &p, weights).unwrap_or(f64::INFINITY)
    };
    let mut theta = params.to_vec();
    for _ in 0..config.steps {
        if config.step_size > 0.0 {
            let grad = numeric_gradient(objective, &theta, FD_STEP, config.exec);
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= config.step_size * g;
            }
            params.set_from_slice(&theta);
        }
        trace.push(refined_triplet_loss(samples, &params, weights)?);
    }
    Ok(FitResult { params, trace })
}
