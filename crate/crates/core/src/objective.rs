//! Training objective: binary cross-entropy minus `λ` times a Rayleigh
//! quotient of the embedding geometry,
//!
//! ```text
//! R = ‖μ₁ − μ₀‖² / (tr Σ_w + ε),   Σ_w = Σ_c (1/N_c) Σ_{i: yᵢ=c} (zᵢ − μ_c)(zᵢ − μ_c)ᵀ
//! ```
//!
//! Σ_w weights each class by `1/N_c` and sums over the two classes. This is
//! neither the unnormalised LDA scatter nor the `1/(N_c − 1)` sample
//! covariance. Only its trace is ever formed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingBatch;
use crate::ndcore::{DenseArray, NodeId, Tape};

/// Probabilities are clamped into `[PROB_CLIP, 1 − PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-7;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_LAMBDA: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleClassPolicy {
    /// Drop the regularizer for a batch that lacks a class.
    #[default]
    Skip,
    /// Substitute the running mean of the missing class, once one exists.
    UseEma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub epsilon: f64,
    /// Decay of the running class means; `None` disables them.
    pub ema_decay: Option<f64>,
    pub single_class_policy: SingleClassPolicy,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            ema_decay: None,
            single_class_policy: SingleClassPolicy::Skip,
        }
    }
}

impl ObjectiveConfig {
    pub fn new(lambda: f64, epsilon: f64) -> Result<Self> {
        let config = Self {
            lambda,
            epsilon,
            ..Self::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_ema(mut self, decay: f64, policy: SingleClassPolicy) -> Result<Self> {
        self.ema_decay = Some(decay);
        self.single_class_policy = policy;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be finite and > 0, got {}",
                self.epsilon
            )));
        }
        if let Some(decay) = self.ema_decay {
            check_decay(decay)?;
        }
        Ok(())
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidConfig(format!(
            "ema decay must lie in [0, 1), got {decay}"
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy of `probs` (an `N × 1` node) against `labels`.
pub fn bce_loss(probs: NodeId, labels: &[u8], tape: &mut Tape) -> Result<NodeId> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidConfig("bce_loss of an empty batch".into()));
    }
    if tape.value(probs).len() != n {
        return Err(Error::shape(
            "bce_loss",
            format!(
                "{} probabilities for {} labels",
                tape.value(probs).len(),
                n
            ),
        ));
    }
    let shape = tape.value(probs).shape().to_vec();
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let y_node = tape.constant(DenseArray::new(shape.clone(), y.clone())?);
    let not_y = tape.constant(DenseArray::new(shape.clone(), y.iter().map(|v| 1.0 - v).collect())?);
    let ones = tape.constant(DenseArray::filled(shape, 1.0));

    let p = tape.clamp(probs, PROB_CLIP, 1.0 - PROB_CLIP)?;
    let log_p = tape.ln(p)?;
    let q = tape.sub(ones, p)?;
    let log_q = tape.ln(q)?;
    let pos = tape.mul(y_node, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let ll = tape.add(pos, neg)?;
    let mean_ll = tape.mean(ll)?;
    tape.scale(mean_ll, -1.0)
}

/// Class-conditional statistics of one batch, recorded on the tape.
#[derive(Clone, Debug)]
pub struct BatchStats {
    /// `1 × d` class means; `None` when the class is absent.
    pub mu0: Option<NodeId>,
    pub mu1: Option<NodeId>,
    pub n0: usize,
    pub n1: usize,
    /// Scalar `tr Σ_w`.
    pub scatter_trace: NodeId,
    /// Running means after [`update_ema`]; `None` until that class has been seen.
    pub ema_mu0: Option<NodeId>,
    pub ema_mu1: Option<NodeId>,
}

impl BatchStats {
    pub fn len(&self) -> usize {
        self.n0 + self.n1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn both_classes(&self) -> bool {
        self.n0 > 0 && self.n1 > 0
    }

    pub fn ema_initialized(&self) -> (bool, bool) {
        (self.ema_mu0.is_some(), self.ema_mu1.is_some())
    }
}

/// Class means and `tr Σ_w` of the `N × d` node `embeddings`.
pub fn class_statistics(embeddings: NodeId, labels: &[u8], tape: &mut Tape) -> Result<BatchStats> {
    let n = labels.len();
    let z = tape.value(embeddings);
    if n == 0 || z.rows() != n || !z.is_matrix() {
        return Err(Error::shape(
            "class_statistics",
            format!("embeddings {:?} for {} labels", z.shape(), n),
        ));
    }

    let mut means = [None, None];
    let mut counts = [0usize; 2];
    let mut scatter: Option<NodeId> = None;
    for class in 0..2u8 {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        let count = members.len();
        counts[class as usize] = count;
        if count == 0 {
            continue;
        }
        let mut select = vec![0.0; count * n];
        for (r, &i) in members.iter().enumerate() {
            select[r * n + i] = 1.0;
        }
        let weights = (0..n)
            .map(|i| if labels[i] == class { 1.0 / count as f64 } else { 0.0 })
            .collect::<Vec<_>>();
        let select = tape.constant(DenseArray::from_rows(count, n, select)?);
        let weights = tape.constant(DenseArray::from_rows(1, n, weights)?);

        let mu = tape.matmul(weights, embeddings)?;
        let rows = tape.matmul(select, embeddings)?;
        let neg_mu = tape.scale(mu, -1.0)?;
        let centered = tape.add_row(rows, neg_mu)?;
        let sq = tape.square(centered)?;
        let ss = tape.sum(sq)?;
        let contribution = tape.scale(ss, 1.0 / count as f64)?;
        scatter = Some(match scatter {
            Some(acc) => tape.add(acc, contribution)?,
            None => contribution,
        });
        means[class as usize] = Some(mu);
    }

    Ok(BatchStats {
        mu0: means[0],
        mu1: means[1],
        n0: counts[0],
        n1: counts[1],
        scatter_trace: scatter.expect("non-empty batch has a class"),
        ema_mu0: None,
        ema_mu1: None,
    })
}

/// Running class means carried across batches. Stored values are plain
/// arrays, so no gradient ever flows into earlier batches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmaState {
    pub mu0: Option<DenseArray>,
    pub mu1: Option<DenseArray>,
}

/// Folds this batch's class means into `state`.
///
/// A present class moves to `decay·old + (1 − decay)·μ_c`, or to `μ_c` on its
/// first observation; absent classes keep their previous running mean. The
/// running means enter the tape as constants, so a Rayleigh quotient built on
/// them is differentiated through the batch scatter only.
pub fn update_ema(
    mut stats: BatchStats,
    state: &mut EmaState,
    decay: f64,
    tape: &mut Tape,
) -> Result<BatchStats> {
    check_decay(decay)?;
    let slots = [
        (stats.mu0, &mut state.mu0, &mut stats.ema_mu0),
        (stats.mu1, &mut state.mu1, &mut stats.ema_mu1),
    ];
    for (batch_mu, running, out) in slots {
        if let Some(mu) = batch_mu {
            let mu = tape.value(mu);
            *running = Some(match running.as_ref() {
                Some(prev) => prev.zip_map(mu, |old, new| decay * old + (1.0 - decay) * new),
                None => mu.clone(),
            });
        }
        *out = running.as_ref().map(|v| tape.constant(v.clone()));
    }
    Ok(stats)
}

/// `‖μ₁ − μ₀‖² / (tr Σ_w + ε)`, or `None` when a class mean is unavailable
/// under `policy`.
pub fn rayleigh_quotient(
    stats: &BatchStats,
    epsilon: f64,
    policy: SingleClassPolicy,
    tape: &mut Tape,
) -> Result<Option<NodeId>> {
    let pick = |batch: Option<NodeId>, ema: Option<NodeId>| match (batch, policy) {
        (Some(_), _) => ema.or(batch),
        (None, SingleClassPolicy::UseEma) => ema,
        (None, SingleClassPolicy::Skip) => None,
    };
    let (Some(mu0), Some(mu1)) = (pick(stats.mu0, stats.ema_mu0), pick(stats.mu1, stats.ema_mu1))
    else {
        return Ok(None);
    };
    let diff = tape.sub(mu1, mu0)?;
    let sq = tape.square(diff)?;
    let gap = tape.sum(sq)?;
    let eps = tape.constant(DenseArray::scalar(epsilon));
    let denom = tape.add(stats.scatter_trace, eps)?;
    Ok(Some(tape.div(gap, denom)?))
}

/// `sup − λ·rdisc`.
///
/// With `λ = 0` the supervised node is returned untouched. Otherwise a
/// missing regularizer also returns `sup` and bumps `skipped`.
pub fn total_loss(
    sup: NodeId,
    rdisc: Option<NodeId>,
    lambda: f64,
    tape: &mut Tape,
    skipped: &mut usize,
) -> Result<NodeId> {
    if lambda == 0.0 {
        return Ok(sup);
    }
    match rdisc {
        Some(r) => {
            let penalty = tape.scale(r, lambda)?;
            tape.sub(sup, penalty)
        }
        None => {
            *skipped += 1;
            Ok(sup)
        }
    }
}

/// Nodes produced by [`Objective::record`].
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub sup: NodeId,
    pub rdisc: Option<NodeId>,
    pub total: NodeId,
}

/// The objective plus the state it carries between batches.
#[derive(Clone, Debug)]
pub struct Objective {
    config: ObjectiveConfig,
    ema: EmaState,
    skipped_batches: usize,
}

impl Objective {
    pub fn new(config: ObjectiveConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            ema: EmaState::default(),
            skipped_batches: 0,
        })
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.config
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn skipped_batches(&self) -> usize {
        self.skipped_batches
    }

    /// Records the full loss for one batch.
    pub fn record(&mut self, probs: NodeId, emb: &EmbeddingBatch, tape: &mut Tape) -> Result<LossTerms> {
        let sup = bce_loss(probs, &emb.labels, tape)?;
        let mut stats = class_statistics(emb.embeddings, &emb.labels, tape)?;
        if let Some(decay) = self.config.ema_decay {
            stats = update_ema(stats, &mut self.ema, decay, tape)?;
        }
        let rdisc = rayleigh_quotient(
            &stats,
            self.config.epsilon,
            self.config.single_class_policy,
            tape,
        )?;
        let total = total_loss(sup, rdisc, self.config.lambda, tape, &mut self.skipped_batches)?;
        Ok(LossTerms { sup, rdisc, total })
    }
}
