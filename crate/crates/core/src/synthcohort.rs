//! Deterministic synthetic longitudinal cohorts.
//!
//! Each patient has a label `y ~ Bernoulli(prevalence)`, an outcome latent
//! `u ~ N(0, I)` shifted by `Δ·ê` when `y = 1`, and a label-independent
//! nuisance latent `v ~ N(0, I)`. Events carry noisy linear readouts of
//! `[u; v]`: the value of an event on feature `f` is
//! `c_f·(êᵀu) + β·r_fᵀv + noise`, with per-feature loadings fixed by the seed.
//! Static features are the leading coordinates of `u` plus noise.
//!
//! The optimal score on the latents is `êᵀu`, whose AUROC is `Φ(Δ/√2)`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Event, Schema, Trajectory};

pub const GENERATOR_VERSION: &str = concat!("synthcohort/", env!("CARGO_PKG_VERSION"), "+1");
pub const FILE_FORMAT_VERSION: u32 = 1;

/// Scale of the nuisance component of each event value.
const NUISANCE_LOADING: f64 = 2.0;
/// Standard deviation of per-event measurement noise.
const READOUT_NOISE: f64 = 1.0;
/// Standard deviation of the noise added to static copies of `u`.
const STATIC_NOISE: f64 = 0.5;
/// Range of per-feature signal loadings `c_f`.
const SIGNAL_LOADING: (f64, f64) = (0.5, 1.5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub features: usize,
    pub static_dim: usize,
    pub prevalence: f64,
    pub signal_dim: usize,
    pub nuisance_dim: usize,
    /// Mahalanobis distance `Δ` between the class-conditional latents.
    pub effect_size: f64,
    pub events_min: usize,
    pub events_max: usize,
    pub horizon_days: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_patients: 5000,
            features: 48,
            static_dim: 4,
            prevalence: 0.3,
            signal_dim: 4,
            nuisance_dim: 32,
            effect_size: 2.0,
            events_min: 8,
            events_max: 32,
            horizon_days: 365.0,
            seed: 7,
        }
    }
}

impl CohortSpec {
    pub fn schema(&self) -> Schema {
        Schema {
            features: self.features,
            static_dim: self.static_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad(format!("prevalence must lie in (0, 1), got {}", self.prevalence));
        }
        if self.signal_dim == 0 {
            return bad("signal_dim must be positive".into());
        }
        if self.signal_dim + self.nuisance_dim > self.features {
            return bad(format!(
                "signal_dim + nuisance_dim ({}) exceeds the feature vocabulary ({})",
                self.signal_dim + self.nuisance_dim,
                self.features
            ));
        }
        if !(self.effect_size > 0.0) || !self.effect_size.is_finite() {
            return bad(format!("effect_size must be positive, got {}", self.effect_size));
        }
        if self.events_min > self.events_max {
            return bad(format!(
                "events_min ({}) exceeds events_max ({})",
                self.events_min, self.events_max
            ));
        }
        if !(self.horizon_days > 0.0) || !self.horizon_days.is_finite() {
            return bad(format!("horizon_days must be positive, got {}", self.horizon_days));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub spec: Option<CohortSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub schema: Schema,
    pub trajectories: Vec<Trajectory>,
    pub provenance: Provenance,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.trajectories.iter().map(|t| t.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.trajectories.iter().filter(|t| t.label == 1).count()
    }

    pub fn prevalence(&self) -> f64 {
        self.positives() as f64 / self.len().max(1) as f64
    }

    pub fn has_both_classes(&self) -> bool {
        let pos = self.positives();
        pos > 0 && pos < self.len()
    }

    fn with_indices(&self, indices: &[usize]) -> Cohort {
        Cohort {
            schema: self.schema,
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Latent draws behind one generated patient.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientLatent {
    pub label: u8,
    pub signal: Vec<f64>,
    pub nuisance: Vec<f64>,
}

/// Seed-fixed quantities shared by all patients.
struct World {
    direction: Vec<f64>,
    signal_loading: Vec<f64>,
    nuisance_loading: Vec<Vec<f64>>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for `(seed, stream)`.
pub(crate) fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

const WORLD_STREAM: u64 = u64::MAX;

impl World {
    fn new(spec: &CohortSpec) -> Self {
        let mut rng = substream(spec.seed, WORLD_STREAM);
        let direction = unit_vector(&mut rng, spec.signal_dim);
        let signal_loading = (0..spec.features)
            .map(|_| rng.random_range(SIGNAL_LOADING.0..=SIGNAL_LOADING.1))
            .collect();
        let nuisance_loading = (0..spec.features)
            .map(|_| {
                if spec.nuisance_dim == 0 {
                    Vec::new()
                } else {
                    unit_vector(&mut rng, spec.nuisance_dim)
                }
            })
            .collect();
        Self {
            direction,
            signal_loading,
            nuisance_loading,
        }
    }
}

/// The unit direction `ê` along which positives are shifted.
pub fn signal_direction(spec: &CohortSpec) -> Vec<f64> {
    World::new(spec).direction
}

fn generate_patient(spec: &CohortSpec, world: &World, index: usize) -> (Trajectory, PatientLatent) {
    let mut rng = substream(spec.seed, index as u64);
    let label = u8::from(rng.random::<f64>() < spec.prevalence);
    let mut signal: Vec<f64> = (0..spec.signal_dim).map(|_| normal(&mut rng)).collect();
    if label == 1 {
        for (u, e) in signal.iter_mut().zip(&world.direction) {
            *u += spec.effect_size * e;
        }
    }
    let nuisance: Vec<f64> = (0..spec.nuisance_dim).map(|_| normal(&mut rng)).collect();
    let projection: f64 = signal.iter().zip(&world.direction).map(|(u, e)| u * e).sum();

    let count = rng.random_range(spec.events_min..=spec.events_max);
    let mut events: Vec<Event> = (0..count)
        .map(|_| {
            let time = rng.random_range(0.0..=spec.horizon_days);
            let feature_id = rng.random_range(0..spec.features);
            let nuisance_part: f64 = world.nuisance_loading[feature_id]
                .iter()
                .zip(&nuisance)
                .map(|(r, v)| r * v)
                .sum();
            let value = world.signal_loading[feature_id] * projection
                + NUISANCE_LOADING * nuisance_part
                + READOUT_NOISE * normal(&mut rng);
            Event {
                time,
                feature_id,
                value,
            }
        })
        .collect();
    events.sort_by(|a, b| a.time.total_cmp(&b.time));

    let static_features = (0..spec.static_dim)
        .map(|j| {
            let noise = STATIC_NOISE * normal(&mut rng);
            match signal.get(j) {
                Some(u) => u + noise,
                None => normal(&mut rng),
            }
        })
        .collect();

    let trajectory = Trajectory {
        patient_id: format!("P{index:06}"),
        events,
        static_features,
        label,
        prediction_time: spec.horizon_days,
    };
    (
        trajectory,
        PatientLatent {
            label,
            signal,
            nuisance,
        },
    )
}

/// Generates the cohort together with the latent draws behind each patient.
pub fn generate_cohort_with_latents(spec: &CohortSpec) -> Result<(Cohort, Vec<PatientLatent>)> {
    spec.validate()?;
    let world = World::new(spec);
    let (trajectories, latents): (Vec<_>, Vec<_>) = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(spec, &world, i))
        .unzip();
    Ok((
        Cohort {
            schema: spec.schema(),
            trajectories,
            provenance: Provenance {
                generator: GENERATOR_VERSION.to_string(),
                spec: Some(spec.clone()),
            },
        },
        latents,
    ))
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    generate_cohort_with_latents(spec).map(|(c, _)| c)
}

fn shuffled_indices(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, stream));
    idx
}

/// Patient-level train/validation/test partition.
pub fn split_cohort(cohort: &Cohort, ratios: (f64, f64, f64), seed: u64) -> Result<(Cohort, Cohort, Cohort)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = cohort.len();
    let n_train = (a * n as f64).round() as usize;
    let n_val = (b * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidConfig(format!(
            "split ({a}, {b}, {c}) of {n} patients leaves a part empty"
        )));
    }
    let perm = shuffled_indices(n, seed, 0);
    let part = |range: std::ops::Range<usize>| {
        let mut idx = perm[range].to_vec();
        idx.sort_unstable();
        cohort.with_indices(&idx)
    };
    Ok((
        part(0..n_train),
        part(n_train..n_train + n_val),
        part(n_train + n_val..n),
    ))
}

const SUBSAMPLE_ATTEMPTS: u64 = 100;

/// Uniform patient-level subsample of `round(fraction · n)` patients.
///
/// For a given seed the subsample is a prefix of one fixed permutation, so a
/// smaller fraction is always contained in a larger one. If the prefix lacks
/// a class, a new permutation is drawn, up to 100 times.
pub fn subsample_fraction(cohort: &Cohort, fraction: f64, seed: u64) -> Result<Cohort> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let n = cohort.len();
    let size = (fraction * n as f64).round() as usize;
    if size < 2 {
        return Err(Error::InvalidConfig(format!(
            "fraction {fraction} of {n} patients keeps fewer than 2"
        )));
    }
    for attempt in 0..SUBSAMPLE_ATTEMPTS {
        let perm = shuffled_indices(n, seed, 1 + attempt);
        let mut idx = perm[..size].to_vec();
        idx.sort_unstable();
        let sub = cohort.with_indices(&idx);
        if sub.has_both_classes() {
            return Ok(sub);
        }
    }
    Err(Error::InvalidConfig(format!(
        "no subsample of {size} patients with both classes after {SUBSAMPLE_ATTEMPTS} attempts"
    )))
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    #[serde(rename = "F")]
    features: usize,
    #[serde(rename = "S")]
    static_dim: usize,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientRecord {
    patient_id: String,
    label: u8,
    prediction_time: f64,
    #[serde(rename = "static")]
    static_features: Vec<f64>,
    events: Vec<(f64, usize, f64)>,
}

/// Writes the cohort as line-delimited JSON: a header object, then one object
/// per patient.
pub fn write_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_cohort_to(cohort, &mut out).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_cohort_to(cohort: &Cohort, out: &mut impl Write) -> Result<()> {
    let io = |e| Error::io("<cohort>", e);
    let header = Header {
        version: FILE_FORMAT_VERSION,
        features: cohort.schema.features,
        static_dim: cohort.schema.static_dim,
        provenance: cohort.provenance.clone(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n").map_err(io)?;
    for t in &cohort.trajectories {
        let record = PatientRecord {
            patient_id: t.patient_id.clone(),
            label: t.label,
            prediction_time: t.prediction_time,
            static_features: t.static_features.clone(),
            events: t.events.iter().map(|e| (e.time, e.feature_id, e.value)).collect(),
        };
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

pub fn read_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort_from(BufReader::new(file))
}

pub fn read_cohort_from(reader: impl BufRead) -> Result<Cohort> {
    let mut lines = reader.lines().enumerate();
    let read_err = |line: usize, e: std::io::Error| Error::Parse {
        line,
        reason: e.to_string(),
    };
    let header: Header = loop {
        match lines.next() {
            None => return Err(Error::MissingHeader),
            Some((i, line)) => {
                let line = line.map_err(|e| read_err(i + 1, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    reason: format!("bad header: {e}"),
                })?;
            }
        }
    };
    if header.version != FILE_FORMAT_VERSION {
        return Err(Error::SchemaMismatch(format!(
            "cohort file version {}, expected {FILE_FORMAT_VERSION}",
            header.version
        )));
    }
    let schema = Schema {
        features: header.features,
        static_dim: header.static_dim,
    };
    let mut seen = HashSet::new();
    let mut trajectories = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| read_err(lineno, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        let traj = Trajectory {
            patient_id: rec.patient_id,
            events: rec
                .events
                .into_iter()
                .map(|(time, feature_id, value)| Event {
                    time,
                    feature_id,
                    value,
                })
                .collect(),
            static_features: rec.static_features,
            label: rec.label,
            prediction_time: rec.prediction_time,
        };
        traj.validate(&schema).map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if !seen.insert(traj.patient_id.clone()) {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("duplicate patient_id {}", traj.patient_id),
            });
        }
        trajectories.push(traj);
    }
    Ok(Cohort {
        schema,
        trajectories,
        provenance: header.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n: usize) -> CohortSpec {
        CohortSpec {
            n_patients: n,
            features: 12,
            static_dim: 3,
            signal_dim: 2,
            nuisance_dim: 6,
            events_min: 0,
            events_max: 5,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_cohort(&small_spec(50)).unwrap();
        let b = generate_cohort(&small_spec(50)).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec(50);
        other.seed += 1;
        assert_ne!(a, generate_cohort(&other).unwrap());
    }

    #[test]
    fn prefix_of_a_larger_cohort_is_the_smaller_cohort() {
        let small = generate_cohort(&small_spec(20)).unwrap();
        let large = generate_cohort(&small_spec(40)).unwrap();
        assert_eq!(small.trajectories[..], large.trajectories[..20]);
    }

    #[test]
    fn trajectories_satisfy_schema() {
        let c = generate_cohort(&small_spec(200)).unwrap();
        for t in &c.trajectories {
            t.validate(&c.schema).unwrap();
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec(10);
        s.prevalence = 1.5;
        assert!(s.validate().is_err());
        let mut s = small_spec(10);
        s.nuisance_dim = 20;
        assert!(s.validate().is_err());
        let mut s = small_spec(10);
        s.events_min = 9;
        assert!(s.validate().is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let c = generate_cohort(&small_spec(100)).unwrap();
        let (a, b, t) = split_cohort(&c, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((a.len(), b.len(), t.len()), (80, 10, 10));
        let ids = |c: &Cohort| c.trajectories.iter().map(|t| t.patient_id.clone()).collect::<HashSet<_>>();
        let (ia, ib, it) = (ids(&a), ids(&b), ids(&t));
        assert!(ia.is_disjoint(&ib) && ia.is_disjoint(&it) && ib.is_disjoint(&it));
        let union: HashSet<_> = ia.union(&ib).chain(&it).cloned().collect();
        assert_eq!(union, ids(&c));
        assert_eq!(split_cohort(&c, (0.8, 0.1, 0.1), 3).unwrap().1, b);
        assert!(split_cohort(&c, (0.8, 0.2, 0.0), 3).is_err());
        assert!(split_cohort(&c, (0.5, 0.3, 0.3), 3).is_err());
    }

    #[test]
    fn subsample_identity_count_and_nesting() {
        let c = generate_cohort(&small_spec(1000)).unwrap();
        assert_eq!(subsample_fraction(&c, 1.0, 5).unwrap(), c);
        let quarter = subsample_fraction(&c, 0.25, 5).unwrap();
        let half = subsample_fraction(&c, 0.5, 5).unwrap();
        assert_eq!(quarter.len(), 250);
        let half_ids: HashSet<_> = half.trajectories.iter().map(|t| &t.patient_id).collect();
        assert!(quarter.trajectories.iter().all(|t| half_ids.contains(&t.patient_id)));
        assert!(subsample_fraction(&c, 0.0, 5).is_err());
        assert!(subsample_fraction(&c, 0.001, 5).is_err());
    }

    #[test]
    fn subsample_without_both_classes_fails() {
        let mut c = generate_cohort(&small_spec(10)).unwrap();
        for t in &mut c.trajectories {
            t.label = 1;
        }
        assert!(subsample_fraction(&c, 0.5, 1).is_err());
    }

    #[test]
    fn round_trip_three_patients() {
        let c = generate_cohort(&small_spec(3)).unwrap();
        let mut buf = Vec::new();
        write_cohort_to(&c, &mut buf).unwrap();
        let back = read_cohort_from(buf.as_slice()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_input_has_no_header() {
        let err = read_cohort_from(&b""[..]).unwrap_err();
        assert_eq!(err.to_string(), "no header record");
    }

    #[test]
    fn out_of_range_feature_reports_line() {
        let c = generate_cohort(&small_spec(3)).unwrap();
        let mut buf = Vec::new();
        write_cohort_to(&c, &mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str(r#"{"patient_id":"X","label":0,"prediction_time":365.0,"static":[0,0,0],"events":[[1.0,12,0.5]]}"#);
        text.push('\n');
        let err = read_cohort_from(text.as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, reason } => {
                assert_eq!(line, 5);
                assert!(reason.contains("feature_id 12"), "{reason}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_line_reports_line() {
        let text = "{\"version\":1,\"F\":2,\"S\":0,\"provenance\":{\"generator\":\"x\",\"spec\":null}}\n{oops\n";
        assert!(matches!(
            read_cohort_from(text.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
