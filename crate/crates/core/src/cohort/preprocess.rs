//! Fold-scoped preprocessing: missingness filtering, robust scaling,
//! iterative ridge imputation of blood markers and medication vocabulary.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Modality, ObservationEvent, Outcome, PatientRecord};
use crate::error::{Error, Result};

/// Imaging features missing in at least this fraction of events are dropped.
pub const IMAGING_MAX_MISSING: f64 = 0.5;
/// Blood features missing in more than this fraction of events are dropped.
pub const BLOOD_MAX_MISSING: f64 = 0.6;
pub const IMPUTER_MAX_ROUNDS: usize = 10;
pub const IMPUTER_RIDGE: f64 = 1e-3;
pub const IMPUTER_TOL: f64 = 1e-3;
/// Token id of codes absent from the training vocabulary.
pub const UNK_TOKEN: usize = 0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeptFeatures {
    pub blood: Vec<String>,
    pub imaging: Vec<String>,
}

impl KeptFeatures {
    pub fn of(&self, modality: Modality) -> &[String] {
        match modality {
            Modality::Blood => &self.blood,
            Modality::Imaging => &self.imaging,
            Modality::Medication => &[],
        }
    }
}

fn feature_events<'a>(
    train: &'a [PatientRecord],
    modality: Modality,
) -> impl Iterator<Item = &'a ObservationEvent> {
    train
        .iter()
        .flat_map(|r| r.events.iter())
        .filter(move |e| e.modality == modality)
}

fn value_of(e: &ObservationEvent, name: &str) -> Option<f64> {
    e.features.as_ref().and_then(|f| f.get(name).copied().flatten())
}

fn filter_modality(
    train: &[PatientRecord],
    modality: Modality,
    keep: impl Fn(f64) -> bool,
) -> Result<Vec<String>> {
    let events: Vec<&ObservationEvent> = feature_events(train, modality).collect();
    if events.is_empty() {
        return Ok(Vec::new());
    }
    let names: BTreeSet<&String> = events
        .iter()
        .filter_map(|e| e.features.as_ref())
        .flat_map(|f| f.keys())
        .collect();
    let n = events.len() as f64;
    let kept: Vec<String> = names
        .into_iter()
        .filter(|name| {
            let missing = events.iter().filter(|e| value_of(e, name).is_none()).count();
            keep(missing as f64 / n)
        })
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::ModalityDegenerate(modality.to_string()));
    }
    Ok(kept)
}

/// Features that survive the missingness thresholds on the training fold.
/// A modality with no training events keeps nothing (and is never present).
pub fn feature_missingness_filter(train: &[PatientRecord]) -> Result<KeptFeatures> {
    Ok(KeptFeatures {
        blood: filter_modality(train, Modality::Blood, |m| m <= BLOOD_MAX_MISSING)?,
        imaging: filter_modality(train, Modality::Imaging, |m| m < IMAGING_MAX_MISSING)?,
    })
}

/// Linear-interpolation (type-7) quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-feature `(x − median) / IQR`; an IQR of zero divides by one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub medians: Vec<f64>,
    pub iqrs: Vec<f64>,
}

impl FeatureScaler {
    /// `columns[k]` holds the observed values of feature `k`.
    pub fn fit(columns: &[Vec<f64>]) -> Self {
        let mut medians = Vec::with_capacity(columns.len());
        let mut iqrs = Vec::with_capacity(columns.len());
        for col in columns {
            if col.is_empty() {
                medians.push(0.0);
                iqrs.push(1.0);
                continue;
            }
            let mut s = col.clone();
            s.sort_by(f64::total_cmp);
            medians.push(quantile_sorted(&s, 0.5));
            iqrs.push(quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25));
        }
        Self { medians, iqrs }
    }

    pub fn scale(&self, k: usize, x: f64) -> f64 {
        let iqr = if self.iqrs[k] == 0.0 { 1.0 } else { self.iqrs[k] };
        (x - self.medians[k]) / iqr
    }

    pub fn unscale(&self, k: usize, z: f64) -> f64 {
        let iqr = if self.iqrs[k] == 0.0 { 1.0 } else { self.iqrs[k] };
        z * iqr + self.medians[k]
    }
}

/// Chained ridge regressions in scaled space: feature `j` is predicted as
/// `coefficients[j][0] + Σ_{k≠j} coefficients[j][1 + rank(k)] · x_k`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    pub coefficients: Vec<Vec<f64>>,
    pub rounds: usize,
    pub converged: bool,
    /// Too few usable rows: missing entries stay at the median.
    pub fallback: bool,
}

fn ridge(design: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Vec<f64> {
    let mut a = design.transpose() * design;
    for i in 1..a.nrows() {
        a[(i, i)] += lambda;
    }
    let b = design.transpose() * y;
    match a.cholesky() {
        Some(c) => c.solve(&b).iter().copied().collect(),
        None => vec![0.0; design.ncols()],
    }
}

impl Imputer {
    fn predict(coef: &[f64], row: &[f64], j: usize) -> f64 {
        let mut acc = coef[0];
        let mut c = 1;
        for (k, &x) in row.iter().enumerate() {
            if k != j {
                acc += coef[c] * x;
                c += 1;
            }
        }
        acc
    }

    /// Fits on scaled rows (`None` = missing). Rows with more than half
    /// their entries missing are not used.
    pub fn fit(rows: &[Vec<Option<f64>>], width: usize) -> Self {
        let usable: Vec<&Vec<Option<f64>>> = rows
            .iter()
            .filter(|r| 2 * r.iter().filter(|v| v.is_none()).count() <= width)
            .collect();
        if width == 0 || usable.len() < 2 {
            return Self {
                coefficients: vec![vec![0.0; width]; width],
                rounds: 0,
                converged: false,
                fallback: true,
            };
        }
        let mut work: Vec<Vec<f64>> = usable
            .iter()
            .map(|r| r.iter().map(|v| v.unwrap_or(0.0)).collect())
            .collect();
        let mut coefficients = vec![vec![0.0; width]; width];
        let mut rounds = 0;
        let mut converged = false;
        while rounds < IMPUTER_MAX_ROUNDS {
            rounds += 1;
            let mut max_update: f64 = 0.0;
            for j in 0..width {
                let observed: Vec<usize> = (0..usable.len()).filter(|&i| usable[i][j].is_some()).collect();
                let design = DMatrix::from_fn(observed.len(), width, |r, c| {
                    let row = &work[observed[r]];
                    match c {
                        0 => 1.0,
                        c if c - 1 < j => row[c - 1],
                        c => row[c],
                    }
                });
                let y = DVector::from_iterator(observed.len(), observed.iter().map(|&i| work[i][j]));
                coefficients[j] = if observed.is_empty() {
                    vec![0.0; width]
                } else {
                    ridge(&design, &y, IMPUTER_RIDGE)
                };
                for i in 0..usable.len() {
                    if usable[i][j].is_none() {
                        let new = Self::predict(&coefficients[j], &work[i], j);
                        max_update = max_update.max((new - work[i][j]).abs());
                        work[i][j] = new;
                    }
                }
            }
            if max_update < IMPUTER_TOL {
                converged = true;
                break;
            }
        }
        Self {
            coefficients,
            rounds,
            converged,
            fallback: false,
        }
    }

    /// One pass over the missing entries of a scaled row, initialised at 0
    /// (the median).
    pub fn impute(&self, row: &[Option<f64>]) -> Vec<f64> {
        let mut x: Vec<f64> = row.iter().map(|v| v.unwrap_or(0.0)).collect();
        if self.fallback {
            return x;
        }
        for j in 0..x.len() {
            if row[j].is_none() {
                x[j] = Self::predict(&self.coefficients[j], &x, j);
            }
        }
        x
    }
}

/// Everything fitted on a training fold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub kept: KeptFeatures,
    pub blood: FeatureScaler,
    pub imaging: FeatureScaler,
    pub imputer: Imputer,
    /// Code → token id; ids start at 1, [`UNK_TOKEN`] is reserved.
    pub med_vocab: BTreeMap<String, usize>,
}

impl PreprocessStats {
    pub fn scaler(&self, modality: Modality) -> Option<&FeatureScaler> {
        match modality {
            Modality::Blood => Some(&self.blood),
            Modality::Imaging => Some(&self.imaging),
            Modality::Medication => None,
        }
    }

    /// Input width of a numeric modality, or vocabulary size (with UNK)
    /// for medications.
    pub fn input_width(&self, modality: Modality) -> usize {
        match modality {
            Modality::Medication => self.med_vocab.len() + 1,
            m => self.kept.of(m).len(),
        }
    }

    pub fn token(&self, code: &str) -> usize {
        self.med_vocab.get(code).copied().unwrap_or(UNK_TOKEN)
    }
}

fn raw_rows(train: &[PatientRecord], modality: Modality, names: &[String]) -> Vec<Vec<Option<f64>>> {
    feature_events(train, modality)
        .map(|e| names.iter().map(|n| value_of(e, n)).collect())
        .collect()
}

fn fit_scaler(rows: &[Vec<Option<f64>>], width: usize) -> FeatureScaler {
    let columns: Vec<Vec<f64>> = (0..width)
        .map(|k| rows.iter().filter_map(|r| r[k]).collect())
        .collect();
    FeatureScaler::fit(&columns)
}

fn scale_row(scaler: &FeatureScaler, row: &[Option<f64>]) -> Vec<Option<f64>> {
    row.iter()
        .enumerate()
        .map(|(k, v)| v.map(|x| scaler.scale(k, x)))
        .collect()
}

/// Fits medians, IQRs, the blood imputer and the medication vocabulary on
/// training records only.
pub fn fit_preprocessor(train: &[PatientRecord], kept: &KeptFeatures) -> PreprocessStats {
    let blood_rows = raw_rows(train, Modality::Blood, &kept.blood);
    let imaging_rows = raw_rows(train, Modality::Imaging, &kept.imaging);
    let blood = fit_scaler(&blood_rows, kept.blood.len());
    let imaging = fit_scaler(&imaging_rows, kept.imaging.len());
    let scaled: Vec<Vec<Option<f64>>> = blood_rows.iter().map(|r| scale_row(&blood, r)).collect();
    let imputer = Imputer::fit(&scaled, kept.blood.len());
    let codes: BTreeSet<&String> = feature_events(train, Modality::Medication)
        .filter_map(|e| e.codes.as_ref())
        .flatten()
        .collect();
    let med_vocab = codes
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), i + 1))
        .collect();
    PreprocessStats {
        kept: kept.clone(),
        blood,
        imaging,
        imputer,
        med_vocab,
    }
}

/// One modality's events after preprocessing, in ascending time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityEvents {
    pub times: Vec<f64>,
    /// Numeric modalities: row-major `times.len() × width` scaled values.
    pub rows: Vec<f64>,
    pub width: usize,
    /// Medication: token ids per event (never empty).
    pub tokens: Vec<Vec<usize>>,
}

impl ModalityEvents {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of events at or before `cutoff`.
    pub fn visible(&self, cutoff: f64) -> usize {
        self.times.partition_point(|&t| t <= cutoff)
    }
}

/// A record ready for the model: scaled, imputed and tokenised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedRecord {
    pub patient_id: String,
    pub outcome: Outcome,
    /// Indexed by [`Modality::index`].
    pub modalities: [ModalityEvents; 3],
}

impl PreparedRecord {
    pub fn events(&self, modality: Modality) -> &ModalityEvents {
        &self.modalities[modality.index()]
    }
}

/// Restricts to kept features, imputes and scales blood, median-imputes and
/// scales imaging, and maps codes to tokens (unseen codes to UNK).
pub fn apply_preprocessor(record: &PatientRecord, stats: &PreprocessStats) -> PreparedRecord {
    let mut modalities: [ModalityEvents; 3] = Default::default();
    for m in [Modality::Blood, Modality::Imaging] {
        let names = stats.kept.of(m);
        let scaler = stats.scaler(m).expect("numeric modality");
        let out = &mut modalities[m.index()];
        out.width = names.len();
        if names.is_empty() {
            continue;
        }
        for e in record.events_of(m) {
            let raw: Vec<Option<f64>> = names.iter().map(|n| value_of(e, n)).collect();
            let scaled = scale_row(scaler, &raw);
            let row = if m == Modality::Blood {
                stats.imputer.impute(&scaled)
            } else {
                scaled.iter().map(|v| v.unwrap_or(0.0)).collect()
            };
            out.times.push(e.t_days);
            out.rows.extend(row);
        }
    }
    let med = &mut modalities[Modality::Medication.index()];
    for e in record.events_of(Modality::Medication) {
        let mut tokens: Vec<usize> = e
            .codes
            .iter()
            .flatten()
            .map(|c| stats.token(c))
            .collect();
        if tokens.is_empty() {
            tokens.push(UNK_TOKEN);
        }
        med.times.push(e.t_days);
        med.tokens.push(tokens);
    }
    PreparedRecord {
        patient_id: record.patient_id.clone(),
        outcome: record.outcome(),
        modalities,
    }
}
