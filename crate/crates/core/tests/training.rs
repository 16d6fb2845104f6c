//! Training loop behaviour: an analytic two-step oracle, the λ = 0
//! reduction, convergence on an easy cohort, checkpoints and the sweep.

use outcome_align::metrics::auroc;
use outcome_align::model::{forward_values, init_params, Event, ModelDims, ModelParams, Schema, Trajectory};
use outcome_align::synthcohort::{generate_cohort, split_cohort, Cohort, CohortSpec, Provenance};
use outcome_align::trainkit::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, load_checkpoint_expecting,
    predict_cohort, save_checkpoint, sweep_sample_efficiency, sweep_to_csv, train, TrainConfig,
    TrainHistory, SWEEP_CSV_HEADER,
};
use outcome_align::Error;

fn cohort_of(schema: Schema, trajectories: Vec<Trajectory>) -> Cohort {
    Cohort {
        schema,
        trajectories,
        provenance: Provenance {
            generator: "hand-built".into(),
            spec: None,
        },
    }
}

/// Parameters flattened into plain vectors for the hand-derived gradient.
#[derive(Clone)]
struct Plain {
    e: Vec<f64>,
    wv: Vec<f64>,
    t: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    h: Vec<f64>,
    c: f64,
}

impl Plain {
    fn of(p: &ModelParams) -> Self {
        let layer = &p.mlp_layers[0];
        Self {
            e: p.feature_embedding.data().to_vec(),
            wv: p.value_projection.data().to_vec(),
            t: p.time_projection.data().to_vec(),
            w1: layer.weight.data().to_vec(),
            b1: layer.bias.data().to_vec(),
            h: p.head_weight.data().to_vec(),
            c: p.head_bias.item(),
        }
    }

    fn blocks(&self) -> Vec<&[f64]> {
        vec![&self.e, &self.wv, &self.t, &self.w1, &self.b1, &self.h, std::slice::from_ref(&self.c)]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.e,
            &mut self.wv,
            &mut self.t,
            &mut self.w1,
            &mut self.b1,
            &mut self.h,
            std::slice::from_mut(&mut self.c),
        ]
    }
}

/// Gradient of `BCE − λ‖z₁ − z₀‖² / (0 + ε)` for two single-event patients,
/// one per class, through a model without hidden layers.
fn hand_gradient(p: &Plain, patients: &[Trajectory], omegas: &[f64], k: usize, d: usize, lambda: f64, eps: f64) -> Plain {
    let s_dim = patients[0].static_features.len();
    let mut xs = Vec::new();
    let mut phis = Vec::new();
    let mut zs = Vec::new();
    let mut probs = Vec::new();
    for pt in patients {
        let ev = &pt.events[0];
        let dt = pt.prediction_time - ev.time;
        let phi: Vec<f64> = omegas.iter().flat_map(|w| [(w * dt).sin(), (w * dt).cos()]).collect();
        let x: Vec<f64> = (0..k)
            .map(|j| {
                p.e[ev.feature_id * k + j]
                    + ev.value * p.wv[j]
                    + (0..phi.len()).map(|r| phi[r] * p.t[r * k + j]).sum::<f64>()
            })
            .collect();
        let z: Vec<f64> = (0..d)
            .map(|j| p.b1[j] + (0..k).map(|i| x[i] * p.w1[i * d + j]).sum::<f64>())
            .collect();
        let logit = p.c
            + (0..d).map(|j| z[j] * p.h[j]).sum::<f64>()
            + (0..s_dim).map(|j| pt.static_features[j] * p.h[d + j]).sum::<f64>();
        probs.push(1.0 / (1.0 + (-logit).exp()));
        xs.push(x);
        phis.push(phi);
        zs.push(z);
    }
    let n = patients.len() as f64;
    let mut g = Plain {
        e: vec![0.0; p.e.len()],
        wv: vec![0.0; k],
        t: vec![0.0; p.t.len()],
        w1: vec![0.0; k * d],
        b1: vec![0.0; d],
        h: vec![0.0; d + s_dim],
        c: 0.0,
    };
    let (i0, i1) = if patients[0].label == 0 { (0, 1) } else { (1, 0) };
    for (i, pt) in patients.iter().enumerate() {
        let dlogit = (probs[i] - f64::from(pt.label)) / n;
        g.c += dlogit;
        for j in 0..d {
            g.h[j] += dlogit * zs[i][j];
        }
        for j in 0..s_dim {
            g.h[d + j] += dlogit * pt.static_features[j];
        }
        let sign = if i == i1 { 1.0 } else { -1.0 };
        let dz: Vec<f64> = (0..d)
            .map(|j| dlogit * p.h[j] - lambda * sign * 2.0 * (zs[i1][j] - zs[i0][j]) / eps)
            .collect();
        for j in 0..d {
            g.b1[j] += dz[j];
            for r in 0..k {
                g.w1[r * d + j] += xs[i][r] * dz[j];
            }
        }
        let dx: Vec<f64> = (0..k).map(|r| (0..d).map(|j| dz[j] * p.w1[r * d + j]).sum()).collect();
        let ev = &pt.events[0];
        for r in 0..k {
            g.e[ev.feature_id * k + r] += dx[r];
            g.wv[r] += ev.value * dx[r];
            for (q, phi) in phis[i].iter().enumerate() {
                g.t[q * k + r] += phi * dx[r];
            }
        }
    }
    g
}

#[test]
fn two_momentum_steps_match_hand_derived_gradients() {
    let schema = Schema {
        features: 3,
        static_dim: 1,
    };
    let dims = ModelDims {
        event_dim: 2,
        time_frequencies: 2,
        embedding_dim: 2,
        hidden: vec![],
    };
    let mk = |id: &str, f, v, t, s, y| Trajectory {
        patient_id: id.into(),
        events: vec![Event {
            time: t,
            feature_id: f,
            value: v,
        }],
        static_features: vec![s],
        label: y,
        prediction_time: 30.0,
    };
    let patients = vec![mk("a", 0, 0.8, 3.0, 0.4, 0), mk("b", 2, -1.3, 17.0, -0.9, 1)];
    let cohort = cohort_of(schema, patients.clone());
    let (lambda, eps, lr, mu) = (0.3, 1.0, 0.1, 0.9);
    let mut config = TrainConfig {
        batch_size: 2,
        epochs: 2,
        learning_rate: lr,
        momentum: mu,
        seed: 5,
        eval_every: 0,
        shuffle: false,
        ..TrainConfig::default()
    };
    config.objective.lambda = lambda;
    config.objective.epsilon = eps;

    let init = init_params(schema, &dims, config.seed).unwrap();
    let omegas = init.time_frequencies.clone();
    assert!((omegas[0] - 1.0).abs() < 1e-15 && (omegas[1] - 1.0 / 365.0).abs() < 1e-15);
    let mut theta = Plain::of(&init);
    let mut velocity: Option<Plain> = None;
    for _ in 0..2 {
        let g = hand_gradient(&theta, &patients, &omegas, 2, 2, lambda, eps);
        let mut v = g.clone();
        if let Some(prev) = &velocity {
            for (vb, pb) in v.blocks_mut().into_iter().zip(prev.blocks()) {
                vb.iter_mut().zip(pb).for_each(|(a, b)| *a += mu * b);
            }
        }
        for (tb, vb) in theta.blocks_mut().into_iter().zip(v.blocks()) {
            tb.iter_mut().zip(vb).for_each(|(a, b)| *a -= lr * b);
        }
        velocity = Some(v);
    }

    let (trained, _) = train(&config, &cohort, &cohort, schema, &dims).unwrap();
    let got = Plain::of(&trained);
    for (a, b) in got.blocks().into_iter().zip(theta.blocks()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }
}

fn toy() -> (Cohort, Cohort) {
    let cohort = generate_cohort(&CohortSpec {
        n_patients: 250,
        effect_size: 4.0,
        seed: 17,
        ..CohortSpec::default()
    })
    .unwrap();
    let (train_set, val, _) = split_cohort(&cohort, (0.8, 0.1, 0.1), 1).unwrap();
    (train_set, val)
}

#[test]
fn lambda_zero_equals_excised_regularizer_bit_for_bit() {
    let (train_set, val) = toy();
    let mut config = TrainConfig {
        epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    config.objective.lambda = 0.0;
    let dims = ModelDims::default();
    let (a, ha) = train(&config, &train_set, &val, train_set.schema, &dims).unwrap();
    config.regularizer_enabled = false;
    let (b, hb) = train(&config, &train_set, &val, train_set.schema, &dims).unwrap();
    assert_eq!(checkpoint_to_string(&a).unwrap(), checkpoint_to_string(&b).unwrap());
    assert_eq!(ha.to_jsonl().unwrap(), hb.to_jsonl().unwrap());
}

#[test]
fn default_config_loss_decreases_over_first_epochs() {
    let (train_set, val) = toy();
    assert_eq!(train_set.len(), 200);
    for seed in 0..5 {
        let config = TrainConfig {
            epochs: 5,
            seed,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let (_, history) = train(&config, &train_set, &val, train_set.schema, &ModelDims::default()).unwrap();
        let sup: Vec<f64> = history.records.iter().map(|r| r.mean_sup).collect();
        assert!(sup.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {sup:?}");
    }
}

#[test]
fn supervised_training_fits_easy_cohort_within_thirty_epochs() {
    let (train_set, val) = toy();
    for seed in 0..3 {
        let mut config = TrainConfig {
            epochs: 30,
            seed,
            eval_every: 0,
            ..TrainConfig::default()
        };
        config.objective.lambda = 0.0;
        let (params, _) = train(&config, &train_set, &val, train_set.schema, &ModelDims::default()).unwrap();
        let (_, probs) = predict_cohort(&params, &train_set).unwrap();
        let a = auroc(&probs, &train_set.labels()).unwrap();
        assert!(a > 0.95, "seed {seed}: train AUROC {a}");
    }
}

#[test]
fn regularized_training_reaches_high_train_auroc_within_thirty_epochs() {
    // On a nearly separable cohort the unbounded quotient can later pull the
    // embedding away from the head, so only the best epoch is asserted.
    let (train_set, _) = toy();
    for seed in 0..3 {
        let config = TrainConfig {
            epochs: 30,
            seed,
            ..TrainConfig::default()
        };
        let (_, history) = train(&config, &train_set, &train_set, train_set.schema, &ModelDims::default()).unwrap();
        let best = history
            .records
            .iter()
            .map(|r| r.val_metrics.as_ref().unwrap().auroc)
            .fold(0.0, f64::max);
        assert!(best > 0.95, "seed {seed}: best train AUROC {best}");
        assert!(history.records.iter().all(|r| r.skipped_batches <= r.batches));
    }
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let (train_set, val) = toy();
    let dims = ModelDims::default();
    let config = TrainConfig {
        epochs: 0,
        seed: 8,
        ..TrainConfig::default()
    };
    let (params, history) = train(&config, &train_set, &val, train_set.schema, &dims).unwrap();
    assert_eq!(params, init_params(train_set.schema, &dims, 8).unwrap());
    assert!(history.records.is_empty());
}

#[test]
fn single_class_training_set_is_rejected() {
    let (train_set, val) = toy();
    let positives: Vec<Trajectory> = train_set.trajectories.iter().filter(|t| t.label == 1).cloned().collect();
    let only = cohort_of(train_set.schema, positives);
    let err = train(&TrainConfig::default(), &only, &val, only.schema, &ModelDims::default()).unwrap_err();
    assert!(matches!(err, Error::MetricUndefined(_)));
}

#[test]
fn exploding_updates_abort_with_diagnostics() {
    let (train_set, val) = toy();
    let mut config = TrainConfig {
        epochs: 5,
        learning_rate: 1e300,
        ..TrainConfig::default()
    };
    config.objective.lambda = 10.0;
    let err = train(&config, &train_set, &val, train_set.schema, &ModelDims::default()).unwrap_err();
    match err {
        Error::NonFiniteLoss { param_norm, .. } => assert!(param_norm > 0.0 || param_norm.is_nan()),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn history_round_trips_through_jsonl() {
    let (train_set, val) = toy();
    let config = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let (_, history) = train(&config, &train_set, &val, train_set.schema, &ModelDims::default()).unwrap();
    let text = history.to_jsonl().unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(TrainHistory::from_jsonl(&text).unwrap(), history);
}

#[test]
fn checkpoints_round_trip_and_reject_mismatches() {
    let schema = Schema {
        features: 10,
        static_dim: 3,
    };
    let dims = ModelDims::default();
    let params = init_params(schema, &dims, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&params, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), params);
    assert_eq!(checkpoint_from_str(&checkpoint_to_string(&params).unwrap()).unwrap(), params);

    let other = Schema {
        features: 11,
        ..schema
    };
    assert!(matches!(load_checkpoint_expecting(&path, other, None), Err(Error::SchemaMismatch(_))));
    let wider = ModelDims {
        embedding_dim: 8,
        ..dims.clone()
    };
    assert!(matches!(load_checkpoint_expecting(&path, schema, Some(&wider)), Err(Error::SchemaMismatch(_))));
    assert!(load_checkpoint_expecting(&path, schema, Some(&dims)).is_ok());

    let tampered = checkpoint_to_string(&params).unwrap().replace("outcome-align-checkpoint", "something-else");
    assert!(checkpoint_from_str(&tampered).is_err());
}

#[test]
fn predictions_are_deterministic() {
    let (train_set, _) = toy();
    let params = init_params(train_set.schema, &ModelDims::default(), 3).unwrap();
    let (z1, p1) = predict_cohort(&params, &train_set).unwrap();
    let (z2, p2) = forward_values(&train_set.trajectories, &params).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(z1, z2);
}

#[test]
fn sweep_emits_full_factorial_table() {
    let (train_set, val) = toy();
    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let dims = ModelDims::default();
    let rows = sweep_sample_efficiency(&config, &train_set, &val, &dims, &[1.0], &[3]).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].lambda, 0.0);
    assert_eq!(rows[1].lambda, config.objective.lambda);

    let rows = sweep_sample_efficiency(&config, &train_set, &val, &dims, &[0.5, 1.0], &[1, 2]).unwrap();
    assert_eq!(rows.len(), 8);
    let csv = sweep_to_csv(&rows);
    assert_eq!(csv.lines().next().unwrap(), SWEEP_CSV_HEADER);
    assert_eq!(csv.lines().count(), 9);
    let again = sweep_sample_efficiency(&config, &train_set, &val, &dims, &[0.5, 1.0], &[1, 2]).unwrap();
    assert_eq!(sweep_to_csv(&again), csv);
    assert!(sweep_sample_efficiency(&config, &train_set, &val, &dims, &[0.0], &[1]).is_err());
}
