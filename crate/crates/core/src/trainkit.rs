//! Mini-batch SGD training, evaluation, checkpoints and the
//! sample-efficiency sweep.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, GeometryReport, MetricsReport, DEFAULT_ECE_BINS};
use crate::model::{self, init_params, ModelDims, ModelParams, Schema, Trajectory};
use crate::ndcore::{DenseArray, Tape};
use crate::objective::{Objective, ObjectiveConfig};
use crate::synthcohort::{subsample_fraction, substream, Cohort};

const SHUFFLE_SALT: u64 = 0x5348_5546_464C_4521;
const EVAL_CHUNK: usize = 256;

/// Default SGD step size. With momentum 0.9 the effective step is ten times
/// larger.
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    /// When false the objective's regularizer is never evaluated; only the
    /// cross-entropy is recorded.
    pub regularizer_enabled: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate on the validation cohort every this many epochs (0 = never).
    /// The final epoch is always evaluated when this is non-zero.
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::default(),
            regularizer_enabled: true,
            batch_size: 64,
            epochs: 20,
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: 0.9,
            seed: 0,
            eval_every: 1,
            checkpoint_path: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.objective.lambda > 0.0 && self.regularizer_enabled && self.batch_size < 2 {
            return bad("batch_size must be at least 2 when lambda > 0".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    pub mean_sup: f64,
    /// Mean batch Rayleigh quotient of the embeddings over batches that
    /// contain both classes.
    pub mean_rdisc: Option<f64>,
    pub mean_total: f64,
    pub skipped_batches: usize,
    pub val_metrics: Option<MetricsReport>,
    pub val_geometry: Option<GeometryReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }
}

/// SGD with classical momentum: `v ← μv + g`, `θ ← θ − ηv`.
#[derive(Clone, Debug)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<DenseArray>,
}

impl Sgd {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: params
                .trainable()
                .iter()
                .map(|b| DenseArray::zeros(b.shape().to_vec()))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[&DenseArray]) {
        for ((block, v), g) in params
            .trainable_mut()
            .into_iter()
            .zip(&mut self.velocity)
            .zip(grads)
        {
            for ((p, v), g) in block.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = self.momentum * *v + g;
                *p -= self.learning_rate * *v;
            }
        }
    }
}

/// Visiting order of the training set in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut substream(seed ^ SHUFFLE_SALT, epoch as u64));
    }
    order
}

struct BatchOutcome {
    sup: f64,
    total: f64,
    rdisc: Option<f64>,
}

fn train_batch(
    batch: &[Trajectory],
    params: &mut ModelParams,
    optimizer: &mut Sgd,
    objective: &mut Objective,
    regularizer_enabled: bool,
    epsilon: f64,
    position: (usize, usize),
) -> Result<BatchOutcome> {
    let mut tape = Tape::new();
    let handles = params.register(&mut tape);
    let emb = model::encode(batch, params, &handles, &mut tape)?;
    let probs = model::predict_risk(&emb, &handles, &mut tape)?;
    let (sup, total) = if regularizer_enabled {
        let terms = objective.record(probs, &emb, &mut tape)?;
        (terms.sup, terms.total)
    } else {
        let sup = crate::objective::bce_loss(probs, &emb.labels, &mut tape)?;
        (sup, sup)
    };
    let sup_value = tape.value(sup).item();
    let total_value = tape.value(total).item();
    if !sup_value.is_finite() || !total_value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: position.0,
            batch: position.1,
            param_norm: params.l2_norm(),
        });
    }
    let rdisc = metrics::mean_gap_and_scatter(tape.value(emb.embeddings), &emb.labels)?
        .map(|(gap, trace)| gap / (trace + epsilon));

    let grads = tape.backward(total)?;
    let ordered: Vec<&DenseArray> = handles
        .ids()
        .into_iter()
        .map(|id| grads.get(id).expect("every parameter leaf has a gradient"))
        .collect();
    optimizer.step(params, &ordered);
    Ok(BatchOutcome {
        sup: sup_value,
        total: total_value,
        rdisc,
    })
}

/// Single-stage training of encoder and head on `train`, evaluated on `val`.
pub fn train(
    config: &TrainConfig,
    train: &Cohort,
    val: &Cohort,
    schema: Schema,
    dims: &ModelDims,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    for (name, c) in [("train", train), ("validation", val)] {
        if c.schema != schema {
            return Err(Error::SchemaMismatch(format!(
                "{name} cohort schema {:?} differs from {:?}",
                c.schema, schema
            )));
        }
        if c.is_empty() {
            return Err(Error::InvalidConfig(format!("{name} cohort is empty")));
        }
    }
    if !train.has_both_classes() {
        return Err(Error::MetricUndefined(
            "training cohort must contain both classes".into(),
        ));
    }

    let mut params = init_params(schema, dims, config.seed)?;
    let mut optimizer = Sgd::new(&params, config.learning_rate, config.momentum);
    let mut objective = Objective::new(config.objective.clone())?;
    let epsilon = config.objective.epsilon;
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let order = epoch_order(train.len(), config.seed, epoch, config.shuffle);
        let skipped_before = objective.skipped_batches();
        let (mut sup_sum, mut total_sum, mut rdisc_sum, mut rdisc_n, mut batches) =
            (0.0, 0.0, 0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Trajectory> =
                chunk.iter().map(|&i| train.trajectories[i].clone()).collect();
            let out = train_batch(
                &batch,
                &mut params,
                &mut optimizer,
                &mut objective,
                config.regularizer_enabled,
                epsilon,
                (epoch, b),
            )?;
            sup_sum += out.sup;
            total_sum += out.total;
            if let Some(r) = out.rdisc {
                rdisc_sum += r;
                rdisc_n += 1;
            }
            batches += 1;
        }

        let evaluate_now = config.eval_every > 0
            && ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs);
        let (val_metrics, val_geometry) = if evaluate_now {
            let (m, g) = evaluate(&params, val, epsilon)?;
            (Some(m), Some(g))
        } else {
            (None, None)
        };
        history.records.push(EpochRecord {
            epoch,
            batches,
            mean_sup: sup_sum / batches as f64,
            mean_rdisc: (rdisc_n > 0).then(|| rdisc_sum / rdisc_n as f64),
            mean_total: total_sum / batches as f64,
            skipped_batches: objective.skipped_batches() - skipped_before,
            val_metrics,
            val_geometry,
        });
    }

    if let Some(path) = &config.checkpoint_path {
        save_checkpoint(&params, path)?;
    }
    Ok((params, history))
}

/// Embeddings and risk probabilities for every patient of `cohort`.
pub fn predict_cohort(params: &ModelParams, cohort: &Cohort) -> Result<(DenseArray, Vec<f64>)> {
    if cohort.schema != params.schema {
        return Err(Error::SchemaMismatch(format!(
            "cohort schema {:?} differs from model schema {:?}",
            cohort.schema, params.schema
        )));
    }
    let d = params.dims.embedding_dim;
    let mut embeddings = Vec::with_capacity(cohort.len() * d);
    let mut probs = Vec::with_capacity(cohort.len());
    for chunk in cohort.trajectories.chunks(EVAL_CHUNK) {
        let (z, p) = model::forward_values(chunk, params)?;
        embeddings.extend_from_slice(z.data());
        probs.extend(p);
    }
    Ok((DenseArray::from_rows(cohort.len(), d, embeddings)?, probs))
}

pub fn evaluate(params: &ModelParams, cohort: &Cohort, epsilon: f64) -> Result<(MetricsReport, GeometryReport)> {
    evaluate_with_bins(params, cohort, epsilon, DEFAULT_ECE_BINS)
}

/// Dataset-level metrics and embedding geometry, from one forward pass.
pub fn evaluate_with_bins(
    params: &ModelParams,
    cohort: &Cohort,
    epsilon: f64,
    bins: usize,
) -> Result<(MetricsReport, GeometryReport)> {
    let (embeddings, probs) = predict_cohort(params, cohort)?;
    let labels = cohort.labels();
    let report = MetricsReport::compute(&probs, &labels, bins)?;
    let geometry = metrics::geometry_report(&embeddings, &labels, epsilon)?;
    Ok((report, geometry))
}

pub const CHECKPOINT_FORMAT: &str = "outcome-align-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    schema: Schema,
    dims: ModelDims,
    params: ModelParams,
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_to_string(params: &ModelParams) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        schema: params.schema,
        dims: params.dims.clone(),
        params: params.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    Ok(text)
}

pub fn checkpoint_from_str(text: &str) -> Result<ModelParams> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::SchemaMismatch(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    if file.schema != file.params.schema || file.dims != file.params.dims {
        return Err(Error::SchemaMismatch(
            "checkpoint header disagrees with its parameters".into(),
        ));
    }
    file.params.validate()?;
    Ok(file.params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), checkpoint_to_string(params)?.as_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}

/// Loads a checkpoint and checks it against the expected schema and dims.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    schema: Schema,
    dims: Option<&ModelDims>,
) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if params.schema != schema {
        return Err(Error::SchemaMismatch(format!(
            "checkpoint schema {:?}, expected {:?}",
            params.schema, schema
        )));
    }
    if let Some(dims) = dims {
        if &params.dims != dims {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint dims {:?}, expected {:?}",
                params.dims, dims
            )));
        }
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub seed: u64,
    pub lambda: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub rdisc: f64,
}

pub const SWEEP_CSV_HEADER: &str = "fraction,seed,lambda,auroc,auprc,rdisc";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.fraction, r.seed, r.lambda, r.auroc, r.auprc, r.rdisc
        ));
    }
    out
}

/// Trains λ = 0 and λ = `config.objective.lambda` on nested subsamples of
/// `train` for every `(fraction, seed)` and evaluates each on `val`.
///
/// Rows come out ordered by fraction, then seed, then λ, whatever order the
/// cells finish in.
pub fn sweep_sample_efficiency(
    config: &TrainConfig,
    train_cohort: &Cohort,
    val_cohort: &Cohort,
    dims: &ModelDims,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() || fractions.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one fraction and one seed".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::InvalidConfig(format!("fraction must lie in (0, 1], got {f}")));
    }
    let lambdas = [0.0, config.objective.lambda];
    let cells: Vec<(f64, u64, f64)> = fractions
        .iter()
        .flat_map(|&f| seeds.iter().flat_map(move |&s| lambdas.map(|l| (f, s, l))))
        .collect();
    cells
        .par_iter()
        .map(|&(fraction, seed, lambda)| {
            let subset = subsample_fraction(train_cohort, fraction, seed)?;
            let mut cell = config.clone();
            cell.seed = seed;
            cell.objective.lambda = lambda;
            cell.eval_every = 0;
            cell.checkpoint_path = None;
            let (params, _) = train(&cell, &subset, val_cohort, train_cohort.schema, dims)?;
            let (m, g) = evaluate(&params, val_cohort, cell.objective.epsilon)?;
            Ok(SweepRow {
                fraction,
                seed,
                lambda,
                auroc: m.auroc,
                auprc: m.auprc,
                rdisc: g.rayleigh,
            })
        })
        .collect()
}
