//! Seeded synthetic cohorts with a known latent risk per patient.
//!
//! Each patient carries a standard-normal risk `z`. Survival is
//! exponential with rate `base_hazard_per_day · exp(beta · z)` and
//! censoring is uniform on [450, 1400] days. Observations follow
//! per-modality Poisson processes over [−90, min(365, death, censor)].
//! Blood and imaging values mix a per-feature baseline, a patient
//! intercept, a modality-level latent `e_m + √s_m · z` on the loaded half of
//! the features, a linear drift and measurement noise. Medication events
//! draw risk codes (`N02*`, `H02*`) with probability logistic in `z`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::cohort::{write_cohort, Modality, ObservationEvent, PatientRecord, WINDOW_END_DAYS, WINDOW_START_DAYS};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const CENSOR_MIN_DAYS: f64 = 450.0;
pub const CENSOR_MAX_DAYS: f64 = 1400.0;
pub const FEATURE_MISSING: f64 = 0.10;
pub const SPARSE_BLOOD_MISSING: f64 = 0.70;
pub const SPARSE_IMAGING_MISSING: f64 = 0.55;
pub const RISK_CODE_PREFIXES: [&str; 2] = ["N02", "H02"];

const DAYS_PER_MONTH: f64 = 30.0;
const INTERCEPT_SD: f64 = 0.5;
const MODALITY_OFFSET_SD: f64 = 0.25;
const NOISE_SD: f64 = 0.8;
const MAX_DRIFT_PER_DAY: f64 = 1e-3;
const MED_LOGIT_INTERCEPT: f64 = -1.0;
const MED_LOGIT_SLOPE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerModality {
    pub blood: f64,
    pub imaging: f64,
    pub medication: f64,
}

impl PerModality {
    pub fn new(blood: f64, imaging: f64, medication: f64) -> Self {
        Self {
            blood,
            imaging,
            medication,
        }
    }

    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Blood => self.blood,
            Modality::Imaging => self.imaging,
            Modality::Medication => self.medication,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub seed: u64,
    pub beta: f64,
    pub base_hazard_per_day: f64,
    /// Fraction in [0, 1] of the variance of `z` expressed by each modality.
    pub modality_signal: PerModality,
    pub p_missing_imaging: f64,
    pub visit_rate_per_month: PerModality,
    pub n_blood_features: usize,
    pub n_imaging_features: usize,
    pub med_categories: Vec<String>,
    /// Append one mostly-missing, uninformative feature per numeric
    /// modality.
    pub sparse_features: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            seed: 7,
            beta: 2.0,
            base_hazard_per_day: 1.0 / 700.0,
            modality_signal: PerModality::new(0.6, 0.6, 0.3),
            p_missing_imaging: 0.42,
            visit_rate_per_month: PerModality::new(1.0, 0.5, 1.4),
            n_blood_features: 10,
            n_imaging_features: 8,
            med_categories: [
                "N02AA01", "N02AB03", "N02AX02", "H02AB06", "H02AB02", "A02BC01", "A04AA01", "B01AB05",
                "C09AA05", "C10AA05", "A06AD11", "N05BA06",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            sparse_features: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.beta.is_finite() {
            return bad(format!("beta must be finite, got {}", self.beta));
        }
        if !(self.base_hazard_per_day > 0.0 && self.base_hazard_per_day.is_finite()) {
            return bad(format!("base_hazard_per_day must be positive, got {}", self.base_hazard_per_day));
        }
        for m in Modality::ALL {
            let s = self.modality_signal.get(m);
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("modality_signal.{m} must lie in [0, 1], got {s}"));
            }
            let r = self.visit_rate_per_month.get(m);
            if !(r > 0.0 && r.is_finite()) {
                return bad(format!("visit_rate_per_month.{m} must be positive, got {r}"));
            }
        }
        if !(0.0..=1.0).contains(&self.p_missing_imaging) {
            return bad(format!("p_missing_imaging must lie in [0, 1], got {}", self.p_missing_imaging));
        }
        if self.n_blood_features == 0 || self.n_imaging_features == 0 {
            return bad("feature counts must be positive".into());
        }
        if self.med_categories.is_empty() {
            return bad("med_categories must not be empty".into());
        }
        if self.med_categories.iter().all(|c| !is_risk_code(c)) || self.med_categories.iter().all(|c| is_risk_code(c)) {
            return bad("med_categories needs both risk (N02*, H02*) and neutral codes".into());
        }
        Ok(())
    }

    /// Hazard rate per day for risk `z`.
    pub fn hazard(&self, z: f64) -> f64 {
        self.base_hazard_per_day * (self.beta * z).exp()
    }
}

pub fn is_risk_code(code: &str) -> bool {
    RISK_CODE_PREFIXES.iter().any(|p| code.starts_with(p))
}

/// Generative parameters of one numeric feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub baseline: f64,
    pub scale: f64,
    /// 1 for risk-loaded features, 0 otherwise.
    pub loading: f64,
    pub drift_per_day: f64,
    pub p_missing: f64,
}

impl FeatureSpec {
    /// Inverse of the affine map and drift applied at generation.
    pub fn standardize(&self, value: f64, t_days: f64) -> f64 {
        (value - self.baseline) / self.scale - self.drift_per_day * t_days
    }
}

/// Cohort-wide feature parameters, fixed by the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub blood: Vec<FeatureSpec>,
    pub imaging: Vec<FeatureSpec>,
}

impl FeatureLayout {
    pub fn new(config: &SynthConfig) -> Self {
        let mut rng = SeededRng::derive(config.seed, 0);
        let mut specs = |prefix: &str, n: usize, sparse_missing: f64| {
            let mut out: Vec<FeatureSpec> = (0..n)
                .map(|k| FeatureSpec {
                    name: format!("{prefix}_{k:02}"),
                    baseline: rng.uniform_range(5.0, 50.0),
                    scale: rng.uniform_range(0.5, 3.0),
                    loading: if k < n.div_ceil(2) { 1.0 } else { 0.0 },
                    drift_per_day: rng.uniform_range(-MAX_DRIFT_PER_DAY, MAX_DRIFT_PER_DAY),
                    p_missing: FEATURE_MISSING,
                })
                .collect();
            if config.sparse_features {
                out.push(FeatureSpec {
                    name: format!("{prefix}_sparse"),
                    baseline: rng.uniform_range(5.0, 50.0),
                    scale: rng.uniform_range(0.5, 3.0),
                    loading: 0.0,
                    drift_per_day: 0.0,
                    p_missing: sparse_missing,
                });
            }
            out
        };
        let blood = specs("blood", config.n_blood_features, SPARSE_BLOOD_MISSING);
        let imaging = specs("imaging", config.n_imaging_features, SPARSE_IMAGING_MISSING);
        Self { blood, imaging }
    }

    pub fn of(&self, m: Modality) -> &[FeatureSpec] {
        match m {
            Modality::Blood => &self.blood,
            Modality::Imaging => &self.imaging,
            Modality::Medication => &[],
        }
    }
}

/// Ground truth for one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthRow {
    pub patient_id: String,
    pub z: f64,
    /// Latent death time, whether or not it was observed.
    pub t_death_days: f64,
}

#[derive(Clone, Debug)]
pub struct SynthCohort {
    pub layout: FeatureLayout,
    pub records: Vec<PatientRecord>,
    pub truth: Vec<TruthRow>,
}

fn poisson_times(rng: &mut SeededRng, rate_per_month: f64, end: f64) -> Vec<f64> {
    let rate = rate_per_month / DAYS_PER_MONTH;
    let mut times = Vec::new();
    let mut t = WINDOW_START_DAYS;
    loop {
        t += rng.exponential(rate);
        if t > end {
            return times;
        }
        times.push(t.floor());
    }
}

fn numeric_events(
    rng: &mut SeededRng,
    modality: Modality,
    specs: &[FeatureSpec],
    times: &[f64],
    latent: f64,
) -> Vec<ObservationEvent> {
    let intercepts: Vec<f64> = specs.iter().map(|_| INTERCEPT_SD * rng.normal()).collect();
    times
        .iter()
        .map(|&t| {
            let features = specs
                .iter()
                .zip(&intercepts)
                .map(|(f, u)| {
                    let standard = u + f.loading * latent + f.drift_per_day * t + NOISE_SD * rng.normal();
                    let value = f.baseline + f.scale * standard;
                    let observed = !rng.bernoulli(f.p_missing);
                    (f.name.clone(), observed.then_some(value))
                })
                .collect::<BTreeMap<_, _>>();
            ObservationEvent {
                t_days: t,
                modality,
                features: Some(features),
                codes: None,
            }
        })
        .collect()
}

/// Draws one patient from `rng`.
pub fn generate_patient(
    rng: &mut SeededRng,
    config: &SynthConfig,
    layout: &FeatureLayout,
    patient_id: String,
) -> (PatientRecord, TruthRow) {
    let z = rng.normal();
    let death = rng.exponential(config.hazard(z));
    let censor = rng.uniform_range(CENSOR_MIN_DAYS, CENSOR_MAX_DAYS);
    let died = death <= censor;
    let end = WINDOW_END_DAYS.min(death).min(censor);

    let mut events = Vec::new();
    for m in [Modality::Blood, Modality::Imaging] {
        let absent = m == Modality::Imaging && rng.bernoulli(config.p_missing_imaging);
        let times = poisson_times(rng, config.visit_rate_per_month.get(m), end);
        let latent = MODALITY_OFFSET_SD * rng.normal() + config.modality_signal.get(m).sqrt() * z;
        let generated = numeric_events(rng, m, layout.of(m), &times, latent);
        if !absent {
            events.extend(generated);
        }
    }

    let (risk, neutral): (Vec<&String>, Vec<&String>) = config.med_categories.iter().partition(|c| is_risk_code(c));
    let p_risk = sigmoid(MED_LOGIT_INTERCEPT + MED_LOGIT_SLOPE * config.modality_signal.medication * z);
    for t in poisson_times(rng, config.visit_rate_per_month.medication, end) {
        let n_codes = 1 + rng.index(2);
        let codes = (0..n_codes)
            .map(|_| {
                let pool = if rng.bernoulli(p_risk) { &risk } else { &neutral };
                pool[rng.index(pool.len())].clone()
            })
            .collect();
        events.push(ObservationEvent {
            t_days: t,
            modality: Modality::Medication,
            features: None,
            codes: Some(codes),
        });
    }
    events.sort_by(|a, b| a.t_days.total_cmp(&b.t_days).then(a.modality.index().cmp(&b.modality.index())));

    let record = PatientRecord {
        patient_id: patient_id.clone(),
        event_indicator: died,
        time_to_event_days: died.then_some(death),
        last_followup_days: if died { death } else { censor },
        events,
    };
    let truth = TruthRow {
        patient_id,
        z,
        t_death_days: death,
    };
    (record, truth)
}

pub fn patient_id(index: usize) -> String {
    format!("P{:05}", index + 1)
}

/// Generates every patient sequentially from a single stream.
pub fn generate_cohort(config: &SynthConfig) -> Result<SynthCohort> {
    config.validate()?;
    let layout = FeatureLayout::new(config);
    let mut rng = SeededRng::derive(config.seed, 1);
    let (records, truth) = (0..config.n_patients)
        .map(|i| generate_patient(&mut rng, config, &layout, patient_id(i)))
        .unzip();
    Ok(SynthCohort { layout, records, truth })
}

pub fn write_truth(path: impl AsRef<Path>, truth: &[TruthRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for row in truth {
        serde_json::to_writer(&mut w, row).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRow>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Generates and writes the cohort and its ground-truth sidecar.
pub fn write_synth(config: &SynthConfig, cohort_path: impl AsRef<Path>, truth_path: impl AsRef<Path>) -> Result<SynthCohort> {
    let cohort = generate_cohort(config)?;
    write_cohort(cohort_path, &cohort.records)?;
    write_truth(truth_path, &cohort.truth)?;
    Ok(cohort)
}

/// Mean standardized, detrended value of the risk-loaded features of
/// `modality` at the patient's last observation of it. `None` without any observed
/// loaded value.
pub fn oracle_score(record: &PatientRecord, layout: &FeatureLayout, modality: Modality) -> Option<f64> {
    let last = record.events_of(modality).into_iter().last()?;
    let features = last.features.as_ref()?;
    let values: Vec<f64> = layout
        .of(modality)
        .iter()
        .filter(|f| f.loading > 0.0)
        .filter_map(|f| features.get(&f.name).copied().flatten().map(|v| f.standardize(v, last.t_days)))
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}
