//! Independent reference computations shared by the integration tests and
//! the acceptance runner. Everything here is written in the most direct form
//! available (explicit loops, pair enumeration) rather than reusing library
//! code paths.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// A random `n × d` batch (row-major) with both classes present.
pub fn random_batch(rng: &mut impl Rng, n: usize, d: usize) -> (Vec<f64>, Vec<u8>) {
    assert!(n >= 2);
    let shift: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.4)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scale = rng.random_range(0.1..3.0);
    let z = (0..n * d)
        .map(|k| scale * normal(rng) + f64::from(labels[k / d]) * shift[k % d])
        .collect();
    (z, labels)
}

/// Class means, per-class counts and `Σ_c (1/N_c) Σ_{i∈c} ‖z_i − μ_c‖²`.
pub struct NaiveStats {
    pub mu: [Vec<f64>; 2],
    pub counts: [usize; 2],
    pub trace: f64,
    pub gap_sq: f64,
    /// `Σ_c (1/N_c) Σ_{i∈c} (z_i − μ_c)(z_i − μ_c)ᵀ / 2`, row-major.
    pub pooled: Vec<f64>,
}

pub fn naive_stats(z: &[f64], labels: &[u8], d: usize) -> NaiveStats {
    let n = labels.len();
    let mut mu = [vec![0.0; d], vec![0.0; d]];
    let mut counts = [0usize; 2];
    for i in 0..n {
        let c = labels[i] as usize;
        counts[c] += 1;
        for j in 0..d {
            mu[c][j] += z[i * d + j];
        }
    }
    for c in 0..2 {
        for j in 0..d {
            mu[c][j] /= counts[c] as f64;
        }
    }
    let mut trace = 0.0;
    let mut pooled = vec![0.0; d * d];
    for c in 0..2 {
        let mut class_sum = 0.0;
        for i in 0..n {
            if labels[i] as usize != c {
                continue;
            }
            for j in 0..d {
                let dj = z[i * d + j] - mu[c][j];
                class_sum += dj * dj;
                for k in 0..d {
                    let dk = z[i * d + k] - mu[c][k];
                    pooled[j * d + k] += 0.5 * dj * dk / counts[c] as f64;
                }
            }
        }
        trace += class_sum / counts[c] as f64;
    }
    let mut gap_sq = 0.0;
    for j in 0..d {
        gap_sq += (mu[1][j] - mu[0][j]).powi(2);
    }
    NaiveStats {
        mu,
        counts,
        trace,
        gap_sq,
        pooled,
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut m: Vec<Vec<f64>> = (0..d)
        .map(|r| {
            let mut row = a[r * d..(r + 1) * d].to_vec();
            row.push(b[r]);
            row
        })
        .collect();
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        for r in col + 1..d {
            let f = m[r][col] / m[col][col];
            for k in col..=d {
                m[r][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; d];
    for r in (0..d).rev() {
        let s: f64 = (r + 1..d).map(|k| m[r][k] * x[k]).sum();
        x[r] = (m[r][d] - s) / m[r][r];
    }
    x
}

/// Squared Mahalanobis gap under the pooled covariance with a
/// `ridge · tr/d` diagonal load.
pub fn naive_mahalanobis_sq(stats: &NaiveStats, d: usize, ridge: f64) -> f64 {
    let mut a = stats.pooled.clone();
    let tr: f64 = (0..d).map(|i| a[i * d + i]).sum();
    for i in 0..d {
        a[i * d + i] += ridge * tr / d as f64;
    }
    let diff: Vec<f64> = (0..d).map(|j| stats.mu[1][j] - stats.mu[0][j]).collect();
    let x = solve(&a, &diff, d);
    diff.iter().zip(&x).map(|(u, v)| u * v).sum()
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting ½.
pub fn pair_count_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Average precision by sweeping every distinct score as a threshold
/// `score ≥ t` and weighting precision by the recall gained there.
pub fn threshold_average_precision(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let total_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = (0..scores.len()).filter(|&i| scores[i] >= t && labels[i] == 1).count() as f64;
        let fp = (0..scores.len()).filter(|&i| scores[i] >= t && labels[i] == 0).count() as f64;
        let recall = tp / total_pos;
        if tp + fp > 0.0 {
            ap += (recall - prev_recall) * tp / (tp + fp);
        }
        prev_recall = recall;
    }
    ap
}

pub fn direct_brier(p: &[f64], y: &[u8]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - f64::from(y[i])).powi(2);
    }
    s / p.len() as f64
}

/// Equal-width calibration error; bin `b` covers `[b/B, (b+1)/B)` and the
/// last bin also holds 1.0.
pub fn direct_ece(p: &[f64], y: &[u8], bins: usize) -> f64 {
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..p.len())
            .filter(|&i| p[i] >= lo && (p[i] < hi || (b + 1 == bins && p[i] <= 1.0)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let conf: f64 = members.iter().map(|&i| p[i]).sum::<f64>() / members.len() as f64;
        let freq: f64 =
            members.iter().map(|&i| f64::from(y[i])).sum::<f64>() / members.len() as f64;
        total += members.len() as f64 / p.len() as f64 * (conf - freq).abs();
    }
    total
}

/// A Haar-ish random orthogonal matrix via Gram–Schmidt on Gaussian columns.
pub fn random_orthogonal(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut q = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            q[i * d + j] = c[i];
        }
    }
    q
}

/// `n × d` times `d × d`, both row-major.
pub fn right_multiply(z: &[f64], q: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| z[i * d + k] * q[k * d + j]).sum();
        }
    }
    out
}
