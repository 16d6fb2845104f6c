//! Longitudinal encoder and logistic risk head.
//!
//! Each event becomes `feature_embedding[id] + value · value_projection +
//! time_projection · [sin(ω·Δt), cos(ω·Δt)]`, with `Δt` measured back from the
//! prediction time. Event vectors are mean-pooled per patient and passed
//! through a tanh MLP whose last layer is linear. Static features are
//! concatenated to the embedding before the head `σ(wᵀ[z; s] + b)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{DenseArray, NodeId, Tape};

/// Feature vocabulary size and static feature width shared by a cohort.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub features: usize,
    pub static_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Days since the index date.
    pub time: f64,
    pub feature_id: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub patient_id: String,
    pub events: Vec<Event>,
    pub static_features: Vec<f64>,
    pub label: u8,
    pub prediction_time: f64,
}

impl Trajectory {
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidTrajectory {
                patient_id: self.patient_id.clone(),
                reason,
            })
        };
        if self.label > 1 {
            return fail(format!("label {} is not binary", self.label));
        }
        if self.static_features.len() != schema.static_dim {
            return fail(format!(
                "{} static features, schema expects {}",
                self.static_features.len(),
                schema.static_dim
            ));
        }
        if !self.prediction_time.is_finite() {
            return fail("prediction time is not finite".into());
        }
        if self.static_features.iter().any(|v| !v.is_finite()) {
            return fail("static features must be finite".into());
        }
        let mut last = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            if e.feature_id >= schema.features {
                return fail(format!(
                    "event {i}: feature_id {} out of range for {} features",
                    e.feature_id, schema.features
                ));
            }
            if !e.time.is_finite() || !e.value.is_finite() {
                return fail(format!("event {i}: non-finite time or value"));
            }
            if e.time < 0.0 || e.time > self.prediction_time {
                return fail(format!(
                    "event {i}: time {} outside [0, {}]",
                    e.time, self.prediction_time
                ));
            }
            if e.time < last {
                return fail(format!("event {i}: events are not sorted by time"));
            }
            last = e.time;
        }
        Ok(())
    }
}

/// Encoder widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Event representation width.
    pub event_dim: usize,
    /// Number of sinusoidal time frequencies.
    pub time_frequencies: usize,
    /// Embedding width.
    pub embedding_dim: usize,
    /// Hidden MLP widths between the pooled events and the embedding.
    pub hidden: Vec<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            event_dim: 16,
            time_frequencies: 4,
            embedding_dim: 16,
            hidden: vec![32],
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.event_dim == 0
            || self.time_frequencies == 0
            || self.embedding_dim == 0
            || self.hidden.iter().any(|&w| w == 0)
        {
            return Err(Error::InvalidConfig(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn layer_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.event_dim];
        widths.extend(&self.hidden);
        widths.push(self.embedding_dim);
        widths
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `in × out`.
    pub weight: DenseArray,
    /// `1 × out`.
    pub bias: DenseArray,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub schema: Schema,
    pub dims: ModelDims,
    /// `F × k`.
    pub feature_embedding: DenseArray,
    /// `1 × k`.
    pub value_projection: DenseArray,
    /// Angular frequencies in radians per day. Not trained.
    pub time_frequencies: Vec<f64>,
    /// `2m × k`, rows interleaved as `sin ω₁, cos ω₁, sin ω₂, …`.
    pub time_projection: DenseArray,
    pub mlp_layers: Vec<DenseLayer>,
    /// `(d + S) × 1`.
    pub head_weight: DenseArray,
    /// `1 × 1`.
    pub head_bias: DenseArray,
}

/// Tape handles for every trainable block, in [`ModelParams::trainable`] order.
#[derive(Clone, Debug)]
pub struct ParamHandles {
    pub feature_embedding: NodeId,
    pub value_projection: NodeId,
    pub time_projection: NodeId,
    pub mlp_layers: Vec<(NodeId, NodeId)>,
    pub head_weight: NodeId,
    pub head_bias: NodeId,
}

impl ParamHandles {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = vec![
            self.feature_embedding,
            self.value_projection,
            self.time_projection,
        ];
        for &(w, b) in &self.mlp_layers {
            ids.push(w);
            ids.push(b);
        }
        ids.push(self.head_weight);
        ids.push(self.head_bias);
        ids
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseArray {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    DenseArray::new(vec![rows, cols], data).expect("consistent shape")
}

/// Time scales spaced geometrically from one day to one year.
pub fn time_scales(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![1.0];
    }
    (0..m)
        .map(|j| 365f64.powf(j as f64 / (m - 1) as f64))
        .collect()
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(schema: Schema, dims: &ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    if schema.features == 0 {
        return Err(Error::InvalidConfig("feature vocabulary must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = dims.event_dim;
    let m = dims.time_frequencies;
    let feature_embedding = glorot(&mut rng, schema.features, k);
    let value_projection = glorot(&mut rng, 1, k);
    let time_projection = glorot(&mut rng, 2 * m, k);
    let widths = dims.layer_widths();
    let mlp_layers = widths
        .windows(2)
        .map(|w| DenseLayer {
            weight: glorot(&mut rng, w[0], w[1]),
            bias: DenseArray::zeros(vec![1, w[1]]),
        })
        .collect();
    let head_weight = glorot(&mut rng, dims.embedding_dim + schema.static_dim, 1);
    Ok(ModelParams {
        schema,
        dims: dims.clone(),
        feature_embedding,
        value_projection,
        time_frequencies: time_scales(m).into_iter().map(|tau| 1.0 / tau).collect(),
        time_projection,
        mlp_layers,
        head_weight,
        head_bias: DenseArray::zeros(vec![1, 1]),
    })
}

impl ModelParams {
    pub fn trainable(&self) -> Vec<&DenseArray> {
        let mut blocks = vec![
            &self.feature_embedding,
            &self.value_projection,
            &self.time_projection,
        ];
        for layer in &self.mlp_layers {
            blocks.push(&layer.weight);
            blocks.push(&layer.bias);
        }
        blocks.push(&self.head_weight);
        blocks.push(&self.head_bias);
        blocks
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut blocks = vec![
            &mut self.feature_embedding,
            &mut self.value_projection,
            &mut self.time_projection,
        ];
        for layer in &mut self.mlp_layers {
            blocks.push(&mut layer.weight);
            blocks.push(&mut layer.bias);
        }
        blocks.push(&mut self.head_weight);
        blocks.push(&mut self.head_bias);
        blocks
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable().iter().map(|b| b.len()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.trainable()
            .iter()
            .map(|b| b.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Records every trainable block as a parameter leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamHandles {
        ParamHandles {
            feature_embedding: tape.param(self.feature_embedding.clone()),
            value_projection: tape.param(self.value_projection.clone()),
            time_projection: tape.param(self.time_projection.clone()),
            mlp_layers: self
                .mlp_layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
            head_weight: tape.param(self.head_weight.clone()),
            head_bias: tape.param(self.head_bias.clone()),
        }
    }

    /// Checks internal shape consistency.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let k = self.dims.event_dim;
        let m = self.dims.time_frequencies;
        let check = |name: &str, a: &DenseArray, shape: [usize; 2]| {
            if a.shape() != shape {
                Err(Error::SchemaMismatch(format!(
                    "{name} has shape {:?}, expected {:?}",
                    a.shape(),
                    shape
                )))
            } else {
                Ok(())
            }
        };
        check("feature_embedding", &self.feature_embedding, [self.schema.features, k])?;
        check("value_projection", &self.value_projection, [1, k])?;
        check("time_projection", &self.time_projection, [2 * m, k])?;
        if self.time_frequencies.len() != m {
            return Err(Error::SchemaMismatch(format!(
                "{} time frequencies, expected {m}",
                self.time_frequencies.len()
            )));
        }
        let widths = self.dims.layer_widths();
        if self.mlp_layers.len() != widths.len() - 1 {
            return Err(Error::SchemaMismatch(format!(
                "{} MLP layers, expected {}",
                self.mlp_layers.len(),
                widths.len() - 1
            )));
        }
        for (i, (layer, w)) in self.mlp_layers.iter().zip(widths.windows(2)).enumerate() {
            check(&format!("mlp[{i}].weight"), &layer.weight, [w[0], w[1]])?;
            check(&format!("mlp[{i}].bias"), &layer.bias, [1, w[1]])?;
        }
        check(
            "head_weight",
            &self.head_weight,
            [self.dims.embedding_dim + self.schema.static_dim, 1],
        )?;
        check("head_bias", &self.head_bias, [1, 1])?;
        if self.trainable().iter().any(|b| !b.all_finite())
            || self.time_frequencies.iter().any(|w| !w.is_finite())
        {
            return Err(Error::InvalidConfig("parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Encoder output for a batch: `N × d` embeddings, `N × S` static features
/// and the labels, all row-aligned.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub embeddings: NodeId,
    pub static_features: NodeId,
    pub labels: Vec<u8>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Runs the encoder over `batch`, recording on `tape`.
pub fn encode(
    batch: &[Trajectory],
    params: &ModelParams,
    handles: &ParamHandles,
    tape: &mut Tape,
) -> Result<EmbeddingBatch> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("cannot encode an empty batch".into()));
    }
    let schema = params.schema;
    let n = batch.len();
    let m = params.time_frequencies.len();
    let total_events: usize = batch.iter().map(|t| t.events.len()).sum();

    let mut one_hot = vec![0.0; total_events * schema.features];
    let mut values = Vec::with_capacity(total_events);
    let mut time_feats = Vec::with_capacity(total_events * 2 * m);
    let mut pool = vec![0.0; n * total_events];
    let mut statics = Vec::with_capacity(n * schema.static_dim);
    let mut labels = Vec::with_capacity(n);

    let mut row = 0;
    for (i, traj) in batch.iter().enumerate() {
        if traj.static_features.len() != schema.static_dim {
            return Err(Error::InvalidTrajectory {
                patient_id: traj.patient_id.clone(),
                reason: format!(
                    "{} static features, model expects {}",
                    traj.static_features.len(),
                    schema.static_dim
                ),
            });
        }
        let weight = 1.0 / traj.events.len().max(1) as f64;
        for event in &traj.events {
            if event.feature_id >= schema.features {
                return Err(Error::InvalidTrajectory {
                    patient_id: traj.patient_id.clone(),
                    reason: format!(
                        "feature_id {} out of range for {} features",
                        event.feature_id, schema.features
                    ),
                });
            }
            one_hot[row * schema.features + event.feature_id] = 1.0;
            values.push(event.value);
            let dt = traj.prediction_time - event.time;
            for &omega in &params.time_frequencies {
                time_feats.push((omega * dt).sin());
                time_feats.push((omega * dt).cos());
            }
            pool[i * total_events + row] = weight;
            row += 1;
        }
        statics.extend_from_slice(&traj.static_features);
        labels.push(traj.label);
    }

    let one_hot = tape.constant(DenseArray::from_rows(total_events, schema.features, one_hot)?);
    let values = tape.constant(DenseArray::from_rows(total_events, 1, values)?);
    let time_feats = tape.constant(DenseArray::from_rows(total_events, 2 * m, time_feats)?);
    let pool = tape.constant(DenseArray::from_rows(n, total_events, pool)?);

    let by_feature = tape.matmul(one_hot, handles.feature_embedding)?;
    let by_value = tape.matmul(values, handles.value_projection)?;
    let by_time = tape.matmul(time_feats, handles.time_projection)?;
    let events = tape.add(by_feature, by_value)?;
    let events = tape.add(events, by_time)?;
    let mut hidden = tape.matmul(pool, events)?;

    let last = handles.mlp_layers.len() - 1;
    for (i, &(w, b)) in handles.mlp_layers.iter().enumerate() {
        let pre = tape.matmul(hidden, w)?;
        hidden = tape.add_row(pre, b)?;
        if i < last {
            hidden = tape.tanh(hidden)?;
        }
    }

    let static_features = tape.constant(DenseArray::from_rows(n, schema.static_dim, statics)?);
    Ok(EmbeddingBatch {
        embeddings: hidden,
        static_features,
        labels,
    })
}

/// Logits `wᵀ[z; s] + b` as an `N × 1` node.
pub fn predict_logits(
    emb: &EmbeddingBatch,
    handles: &ParamHandles,
    tape: &mut Tape,
) -> Result<NodeId> {
    let width = tape.value(emb.embeddings).cols() + tape.value(emb.static_features).cols();
    let head_rows = tape.value(handles.head_weight).rows();
    if width != head_rows {
        return Err(Error::shape(
            "predict_risk",
            format!("head expects input width {head_rows}, embeddings give {width}"),
        ));
    }
    let joined = tape.concat_cols(emb.embeddings, emb.static_features)?;
    let logits = tape.matmul(joined, handles.head_weight)?;
    tape.add_row(logits, handles.head_bias)
}

/// Risk probabilities `σ(wᵀ[z; s] + b)` as an `N × 1` node.
pub fn predict_risk(
    emb: &EmbeddingBatch,
    handles: &ParamHandles,
    tape: &mut Tape,
) -> Result<NodeId> {
    let logits = predict_logits(emb, handles, tape)?;
    tape.sigmoid(logits)
}

/// Encodes and scores `batch` in one go, returning embeddings and probabilities
/// as plain arrays.
pub fn forward_values(
    batch: &[Trajectory],
    params: &ModelParams,
) -> Result<(DenseArray, Vec<f64>)> {
    let mut tape = Tape::new();
    let handles = params.register(&mut tape);
    let emb = encode(batch, params, &handles, &mut tape)?;
    let probs = predict_risk(&emb, &handles, &mut tape)?;
    Ok((
        tape.value(emb.embeddings).clone(),
        tape.value(probs).data().to_vec(),
    ))
}
