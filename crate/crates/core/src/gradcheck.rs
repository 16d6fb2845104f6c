//! On-demand finite-difference audit of the full training graph.
//!
//! Four components are checked, each as reverse-mode gradient against
//! central differences:
//!
//! * `encoder`: a fixed random weighting of the embeddings, w.r.t. all parameters
//! * `bce`: the cross-entropy of the risk head, w.r.t. all parameters
//! * `rayleigh`: the Rayleigh quotient, w.r.t. a random embedding batch
//! * `total`: cross-entropy minus `λ`·Rayleigh quotient, w.r.t. all parameters

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, init_params, ModelDims, ModelParams, Schema, Trajectory};
use crate::ndcore::{finite_difference_gradient, max_relative_discrepancy, DenseArray, NodeId, Tape};
use crate::objective::{self, SingleClassPolicy};
use crate::synthcohort::{generate_cohort, substream, CohortSpec};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Bce,
    Rayleigh,
    Total,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Encoder,
        Component::Bce,
        Component::Rayleigh,
        Component::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Bce => "bce",
            Component::Rayleigh => "rayleigh",
            Component::Total => "total",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Sizes of the randomly generated problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckDims {
    pub features: usize,
    pub static_dim: usize,
    pub event_dim: usize,
    pub time_frequencies: usize,
    pub embedding_dim: usize,
    pub hidden: usize,
    pub batch: usize,
}

impl Default for GradcheckDims {
    fn default() -> Self {
        Self {
            features: 6,
            static_dim: 2,
            event_dim: 4,
            time_frequencies: 2,
            embedding_dim: 4,
            hidden: 5,
            batch: 8,
        }
    }
}

impl GradcheckDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.features,
            self.static_dim,
            self.event_dim,
            self.time_frequencies,
            self.embedding_dim,
            self.hidden,
        ];
        if all.iter().any(|&v| v == 0 || v > 8) || self.features < 2 {
            return Err(Error::InvalidConfig(format!(
                "gradcheck dims must lie in 1..=8 (features >= 2), got {self:?}"
            )));
        }
        if !(4..=12).contains(&self.batch) {
            return Err(Error::InvalidConfig(format!(
                "gradcheck batch must lie in 4..=12, got {}",
                self.batch
            )));
        }
        Ok(())
    }

    fn schema(&self) -> Schema {
        Schema {
            features: self.features,
            static_dim: self.static_dim,
        }
    }

    fn model_dims(&self) -> ModelDims {
        ModelDims {
            event_dim: self.event_dim,
            time_frequencies: self.time_frequencies,
            embedding_dim: self.embedding_dim,
            hidden: vec![self.hidden],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub trials: usize,
    pub dims: GradcheckDims,
    pub lambda: f64,
    pub epsilon: f64,
    /// Corrupts the analytic gradient of one component; used to prove the
    /// check can fail.
    pub perturb: Option<Component>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 20,
            dims: GradcheckDims::default(),
            lambda: 0.5,
            epsilon: 1e-5,
            perturb: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub component: Component,
    pub max_discrepancy: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub components: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<Component> {
        self.components
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.component)
            .collect()
    }
}

fn flatten(params: &ModelParams) -> DenseArray {
    let data: Vec<f64> = params
        .trainable()
        .iter()
        .flat_map(|b| b.data().iter().copied())
        .collect();
    DenseArray::row(&data)
}

fn unflatten(template: &ModelParams, flat: &DenseArray) -> ModelParams {
    let mut params = template.clone();
    let mut offset = 0;
    for block in params.trainable_mut() {
        let n = block.len();
        block.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
        offset += n;
    }
    params
}

/// Analytic and numeric gradients of a scalar function of all parameters.
fn param_gradients<F>(params: &ModelParams, f: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&ModelParams, &mut Tape, &model::ParamHandles) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let handles = params.register(&mut tape);
    let root = f(params, &mut tape, &handles)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<f64> = handles
        .ids()
        .into_iter()
        .flat_map(|id| grads.get(id).unwrap().data().to_vec())
        .collect();
    let numeric = finite_difference_gradient(
        |flat| {
            let p = unflatten(params, flat);
            let mut tape = Tape::new();
            let handles = p.register(&mut tape);
            let root = f(&p, &mut tape, &handles)?;
            Ok(tape.value(root).item())
        },
        &flatten(params),
        FD_STEP,
    )?;
    Ok((analytic, numeric.into_data()))
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

struct Problem {
    batch: Vec<Trajectory>,
    params: ModelParams,
    weights: DenseArray,
}

fn random_problem(config: &GradcheckConfig, trial: usize) -> Result<Problem> {
    let d = &config.dims;
    let seed = config.seed.wrapping_add(trial as u64);
    let spec = CohortSpec {
        n_patients: d.batch,
        features: d.features,
        static_dim: d.static_dim,
        signal_dim: 1,
        nuisance_dim: (d.features - 1).min(3),
        events_min: 0,
        events_max: 5,
        horizon_days: 30.0,
        seed,
        ..CohortSpec::default()
    };
    let mut batch = generate_cohort(&spec)?.trajectories;
    // Both classes so every component is defined.
    batch[0].label = 0;
    batch[1].label = 1;

    let mut rng = substream(seed, 0xC0FFEE);
    let mut params = init_params(d.schema(), &d.model_dims(), seed)?;
    for layer in &mut params.mlp_layers {
        for b in layer.bias.data_mut() {
            *b = 0.1 * normal(&mut rng);
        }
    }
    params.head_bias.data_mut()[0] = rng.random_range(-0.5..0.5);
    let weights = DenseArray::from_rows(
        d.batch,
        d.embedding_dim,
        (0..d.batch * d.embedding_dim)
            .map(|_| normal(&mut rng))
            .collect(),
    )?;
    Ok(Problem {
        batch,
        params,
        weights,
    })
}

fn check_component(config: &GradcheckConfig, component: Component, p: &Problem) -> Result<f64> {
    let batch = &p.batch;
    let lambda = config.lambda;
    let epsilon = config.epsilon;
    let (mut analytic, numeric) = match component {
        Component::Encoder => {
            let weights = p.weights.clone();
            param_gradients(&p.params, move |params, tape, handles| {
                let emb = model::encode(batch, params, handles, tape)?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(emb.embeddings, w)?;
                tape.sum(prod)
            })?
        }
        Component::Bce => param_gradients(&p.params, |params, tape, handles| {
            let emb = model::encode(batch, params, handles, tape)?;
            let probs = model::predict_risk(&emb, handles, tape)?;
            objective::bce_loss(probs, &emb.labels, tape)
        })?,
        Component::Total => param_gradients(&p.params, |params, tape, handles| {
            let emb = model::encode(batch, params, handles, tape)?;
            let probs = model::predict_risk(&emb, handles, tape)?;
            let sup = objective::bce_loss(probs, &emb.labels, tape)?;
            let stats = objective::class_statistics(emb.embeddings, &emb.labels, tape)?;
            let r = objective::rayleigh_quotient(&stats, epsilon, SingleClassPolicy::Skip, tape)?;
            let mut skipped = 0;
            objective::total_loss(sup, r, lambda, tape, &mut skipped)
        })?,
        Component::Rayleigh => {
            let labels: Vec<u8> = batch.iter().map(|t| t.label).collect();
            let rayleigh = |z: &DenseArray| -> Result<(Tape, NodeId, NodeId)> {
                let mut tape = Tape::new();
                let leaf = tape.param(z.clone());
                let stats = objective::class_statistics(leaf, &labels, &mut tape)?;
                let r = objective::rayleigh_quotient(&stats, epsilon, SingleClassPolicy::Skip, &mut tape)?
                    .ok_or_else(|| Error::MetricUndefined("rayleigh needs both classes".into()))?;
                Ok((tape, leaf, r))
            };
            let (tape, leaf, r) = rayleigh(&p.weights)?;
            let analytic = tape.backward(r)?.get(leaf).unwrap().data().to_vec();
            let numeric = finite_difference_gradient(
                |z| {
                    let (tape, _, r) = rayleigh(z)?;
                    Ok(tape.value(r).item())
                },
                &p.weights,
                FD_STEP,
            )?;
            (analytic, numeric.into_data())
        }
    };
    if config.perturb == Some(component) {
        if let Some(first) = analytic.first_mut() {
            *first += 1e-2 * (1.0 + first.abs());
        }
    }
    Ok(max_relative_discrepancy(&analytic, &numeric))
}

/// Runs every component over `config.trials` random problems.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    config.dims.validate()?;
    if config.trials == 0 {
        return Err(Error::InvalidConfig("gradcheck needs at least one trial".into()));
    }
    let mut worst = [0.0f64; 4];
    for trial in 0..config.trials {
        let problem = random_problem(config, trial)?;
        for (slot, component) in worst.iter_mut().zip(Component::ALL) {
            *slot = slot.max(check_component(config, component, &problem)?);
        }
    }
    Ok(GradcheckReport {
        trials: config.trials,
        components: Component::ALL
            .into_iter()
            .zip(worst)
            .map(|(component, max_discrepancy)| ComponentResult {
                component,
                max_discrepancy,
                passed: max_discrepancy < GRADCHECK_TOLERANCE,
            })
            .collect(),
    })
}
