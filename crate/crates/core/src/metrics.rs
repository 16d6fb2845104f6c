//! Discrimination, calibration and embedding-geometry metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::ndcore::DenseArray;

pub const DEFAULT_ECE_BINS: usize = 10;

/// Relative ridge added to the pooled covariance before inversion,
/// scaled by `tr(Σ̂)/d`.
pub const MAHALANOBIS_RIDGE: f64 = 1e-6;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig("scores must be finite".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidConfig("labels must be 0 or 1".into()));
    }
    Ok(())
}

fn check_probabilities(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::InvalidConfig("probabilities must lie in [0, 1]".into()));
    }
    Ok(())
}

fn positives(labels: &[u8]) -> usize {
    labels.iter().filter(|&&l| l == 1).count()
}

/// Mann–Whitney estimate of `P(s⁺ > s⁻)` with ties counted as one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n1 = positives(labels);
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::MetricUndefined(
            "AUROC undefined: both classes must be present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based midranks of the positives.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + end) as f64 / 2.0 + 1.0;
        let group_pos = order[start..=end].iter().filter(|&&i| labels[i] == 1).count();
        rank_sum += midrank * group_pos as f64;
        start = end + 1;
    }
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 as f64 * n0 as f64))
}

/// Average precision; tied scores enter the ranking together.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let total_pos = positives(labels);
    if total_pos == 0 {
        return Err(Error::MetricUndefined(
            "AUPRC undefined: no positive labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let group_pos = order[start..=end].iter().filter(|&&i| labels[i] == 1).count();
        tp += group_pos;
        fp += end + 1 - start - group_pos;
        if group_pos > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += precision * group_pos as f64 / total_pos as f64;
        }
        start = end + 1;
    }
    Ok(ap)
}

pub fn brier(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    check_probabilities(scores)?;
    if scores.is_empty() {
        return Err(Error::MetricUndefined("Brier score of an empty set".into()));
    }
    let sum: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - f64::from(y)).powi(2))
        .sum();
    Ok(sum / scores.len() as f64)
}

/// Bin of `p` among `bins` equal-width bins over `[0, 1]`; 1.0 falls in the last.
pub fn ece_bin(p: f64, bins: usize) -> usize {
    ((p * bins as f64) as usize).min(bins - 1)
}

/// Expected calibration error over equal-width score bins.
pub fn ece(scores: &[f64], labels: &[u8], bins: usize) -> Result<f64> {
    check_inputs(scores, labels)?;
    check_probabilities(scores)?;
    if bins == 0 {
        return Err(Error::InvalidConfig("ECE needs at least one bin".into()));
    }
    if scores.is_empty() {
        return Err(Error::MetricUndefined("ECE of an empty set".into()));
    }
    let mut count = vec![0usize; bins];
    let mut score_sum = vec![0.0; bins];
    let mut pos_sum = vec![0.0; bins];
    for (&p, &y) in scores.iter().zip(labels) {
        let b = ece_bin(p, bins);
        count[b] += 1;
        score_sum[b] += p;
        pos_sum[b] += f64::from(y);
    }
    let n = scores.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (score_sum[b] / c - pos_sum[b] / c).abs()
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub auprc: f64,
    pub brier: f64,
    pub ece: f64,
    pub n: usize,
    pub prevalence: f64,
}

impl MetricsReport {
    pub fn compute(scores: &[f64], labels: &[u8], bins: usize) -> Result<Self> {
        Ok(Self {
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
            brier: brier(scores, labels)?,
            ece: ece(scores, labels, bins)?,
            n: labels.len(),
            prevalence: positives(labels) as f64 / labels.len() as f64,
        })
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "auroc={}\nauprc={}\nbrier={}\nece={}\nn={}\nprevalence={}\n",
            self.auroc, self.auprc, self.brier, self.ece, self.n, self.prevalence
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub mean_gap_sq: f64,
    pub scatter_trace: f64,
    pub rayleigh: f64,
    /// `None` when the pooled covariance cannot be inverted.
    pub mahalanobis_sq: Option<f64>,
    pub epsilon: f64,
}

impl GeometryReport {
    pub fn to_kv_text(&self) -> String {
        let mut out = format!(
            "mean_gap_sq={}\nscatter_trace={}\nrayleigh={}\n",
            self.mean_gap_sq, self.scatter_trace, self.rayleigh
        );
        match self.mahalanobis_sq {
            Some(v) => writeln!(out, "mahalanobis_sq={v}").unwrap(),
            None => out.push_str("mahalanobis_sq=NA\n"),
        }
        writeln!(out, "epsilon={}", self.epsilon).unwrap();
        out
    }
}

struct ClassMoments {
    mean: Vec<f64>,
    count: usize,
}

fn class_moments(embeddings: &DenseArray, labels: &[u8], class: u8) -> ClassMoments {
    let d = embeddings.cols();
    let mut mean = vec![0.0; d];
    let mut count = 0;
    for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == class) {
        for (m, v) in mean.iter_mut().zip(embeddings.row_slice(i)) {
            *m += v;
        }
        count += 1;
    }
    if count > 0 {
        mean.iter_mut().for_each(|m| *m /= count as f64);
    }
    ClassMoments { mean, count }
}

fn check_embeddings(embeddings: &DenseArray, labels: &[u8]) -> Result<()> {
    if !embeddings.is_matrix() || embeddings.rows() != labels.len() {
        return Err(Error::shape(
            "geometry_report",
            format!("embeddings {:?} for {} labels", embeddings.shape(), labels.len()),
        ));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidConfig("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// `(‖μ₁ − μ₀‖², tr Σ_w)` with `Σ_w` weighted `1/N_c` per class, or `None` if
/// a class is absent.
pub fn mean_gap_and_scatter(embeddings: &DenseArray, labels: &[u8]) -> Result<Option<(f64, f64)>> {
    check_embeddings(embeddings, labels)?;
    let m0 = class_moments(embeddings, labels, 0);
    let m1 = class_moments(embeddings, labels, 1);
    if m0.count == 0 || m1.count == 0 {
        return Ok(None);
    }
    let gap = m1
        .mean
        .iter()
        .zip(&m0.mean)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let mut trace = 0.0;
    for (class, m) in [(0u8, &m0), (1u8, &m1)] {
        let ss: f64 = (0..labels.len())
            .filter(|&i| labels[i] == class)
            .map(|i| {
                embeddings
                    .row_slice(i)
                    .iter()
                    .zip(&m.mean)
                    .map(|(z, mu)| (z - mu).powi(2))
                    .sum::<f64>()
            })
            .sum();
        trace += ss / m.count as f64;
    }
    Ok(Some((gap, trace)))
}

/// Dataset-level embedding geometry.
pub fn geometry_report(embeddings: &DenseArray, labels: &[u8], epsilon: f64) -> Result<GeometryReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (gap, trace) = mean_gap_and_scatter(embeddings, labels)?.ok_or_else(|| {
        Error::MetricUndefined("geometry undefined: both classes must be present".into())
    })?;
    Ok(GeometryReport {
        mean_gap_sq: gap,
        scatter_trace: trace,
        rayleigh: gap / (trace + epsilon),
        mahalanobis_sq: mahalanobis_sq(embeddings, labels),
        epsilon,
    })
}

/// `(μ₁ − μ₀)ᵀ (Σ̂ + δI)⁻¹ (μ₁ − μ₀)` with `Σ̂` the average of the two
/// `1/N_c` class covariances.
fn mahalanobis_sq(embeddings: &DenseArray, labels: &[u8]) -> Option<f64> {
    let d = embeddings.cols();
    let m0 = class_moments(embeddings, labels, 0);
    let m1 = class_moments(embeddings, labels, 1);
    let mut pooled = vec![0.0; d * d];
    for (class, m) in [(0u8, &m0), (1u8, &m1)] {
        let w = 0.5 / m.count as f64;
        for i in (0..labels.len()).filter(|&i| labels[i] == class) {
            let dev: Vec<f64> = embeddings
                .row_slice(i)
                .iter()
                .zip(&m.mean)
                .map(|(z, mu)| z - mu)
                .collect();
            for r in 0..d {
                for c in 0..d {
                    pooled[r * d + c] += w * dev[r] * dev[c];
                }
            }
        }
    }
    let trace: f64 = (0..d).map(|i| pooled[i * d + i]).sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return None;
    }
    let ridge = MAHALANOBIS_RIDGE * trace / d as f64;
    for i in 0..d {
        pooled[i * d + i] += ridge;
    }
    let diff: Vec<f64> = m1.mean.iter().zip(&m0.mean).map(|(a, b)| a - b).collect();
    let chol = cholesky(&pooled, d)?;
    // Solve L y = diff; the quadratic form is ‖y‖².
    let mut y = vec![0.0; d];
    for i in 0..d {
        let s: f64 = (0..i).map(|j| chol[i * d + j] * y[j]).sum();
        y[i] = (diff[i] - s) / chol[i * d + i];
    }
    Some(y.iter().map(|v| v * v).sum())
}

/// Lower-triangular Cholesky factor, or `None` if the matrix is not
/// numerically positive definite.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    let scale = (0..d).map(|i| a[i * d + i]).fold(0.0, f64::max);
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let pivot = a[i * d + i] - s;
                if !(pivot > f64::EPSILON * scale) {
                    return None;
                }
                l[i * d + i] = pivot.sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Bayes AUROC `Φ(Δ/√2)` for two Gaussian classes at Mahalanobis distance `Δ`.
pub fn gaussian_bayes_auroc(mahalanobis: f64) -> Result<f64> {
    if !(mahalanobis >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "Mahalanobis distance must be >= 0, got {mahalanobis}"
        )));
    }
    // Φ(x) = erfc(−x/√2)/2 with x = Δ/√2.
    Ok(0.5 * erfc(-mahalanobis / 2.0))
}
