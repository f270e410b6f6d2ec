//! Patient records, the JSON-lines dataset format, eligibility rules,
//! cutoff truncation and horizon labels.

mod preprocess;

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub use preprocess::{
    apply_preprocessor, feature_missingness_filter, fit_preprocessor, FeatureScaler, Imputer,
    KeptFeatures, ModalityEvents, PreparedRecord, PreprocessStats, BLOOD_MAX_MISSING,
    IMAGING_MAX_MISSING, IMPUTER_MAX_ROUNDS, IMPUTER_RIDGE, IMPUTER_TOL, UNK_TOKEN,
};

/// Prediction horizons in days (3, 6, 9 and 12 thirty-day months).
pub const HORIZONS_DAYS: [f64; 4] = [90.0, 180.0, 270.0, 360.0];
pub const WINDOW_START_DAYS: f64 = -90.0;
pub const WINDOW_END_DAYS: f64 = 365.0;
pub const MIN_FOLLOWUP_DAYS: f64 = 90.0;
pub const CUTOFF_MIN_DAYS: f64 = 90.0;
pub const CUTOFF_MAX_DAYS: f64 = 365.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Blood,
    Imaging,
    Medication,
}

impl Modality {
    /// Fixed declaration order used by every model and report.
    pub const ALL: [Modality; 3] = [Modality::Blood, Modality::Imaging, Modality::Medication];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Blood => "blood",
            Modality::Imaging => "imaging",
            Modality::Medication => "medication",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blood" => Ok(Modality::Blood),
            "imaging" => Ok(Modality::Imaging),
            "medication" | "medications" => Ok(Modality::Medication),
            _ => Err(Error::UnknownModality(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationEvent {
    pub t_days: f64,
    pub modality: Modality,
    /// Blood and imaging only; `None` marks a missing measurement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<std::collections::BTreeMap<String, Option<f64>>>,
    /// Medication only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codes: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub patient_id: String,
    pub event_indicator: bool,
    pub time_to_event_days: Option<f64>,
    pub last_followup_days: f64,
    pub events: Vec<ObservationEvent>,
}

/// The survival part of a record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub event_indicator: bool,
    pub time_to_event_days: Option<f64>,
    pub last_followup_days: f64,
}

impl Outcome {
    /// Death time if observed.
    pub fn death(&self) -> Option<f64> {
        if self.event_indicator {
            self.time_to_event_days
        } else {
            None
        }
    }

    /// Last time the patient is known to be alive (or the death time).
    pub fn followup(&self) -> f64 {
        self.death().unwrap_or(self.last_followup_days)
    }
}

impl PatientRecord {
    pub fn outcome(&self) -> Outcome {
        Outcome {
            event_indicator: self.event_indicator,
            time_to_event_days: self.time_to_event_days,
            last_followup_days: self.last_followup_days,
        }
    }

    /// Events of one modality in ascending time, ties in record order.
    pub fn events_of(&self, modality: Modality) -> Vec<&ObservationEvent> {
        let mut ev: Vec<&ObservationEvent> =
            self.events.iter().filter(|e| e.modality == modality).collect();
        ev.sort_by(|a, b| a.t_days.total_cmp(&b.t_days));
        ev
    }

    /// Drops events outside the observation window.
    pub fn windowed(&self) -> PatientRecord {
        let mut r = self.clone();
        r.events
            .retain(|e| e.t_days >= WINDOW_START_DAYS && e.t_days <= WINDOW_END_DAYS);
        r
    }

    pub(crate) fn validate(&self) -> std::result::Result<(), String> {
        if self.patient_id.is_empty() {
            return Err("empty patient_id".into());
        }
        if !(self.last_followup_days.is_finite() && self.last_followup_days > 0.0) {
            return Err("last_followup_days must be a positive number".into());
        }
        match (self.event_indicator, self.time_to_event_days) {
            (true, Some(t)) if t.is_finite() && t > 0.0 => {}
            (true, _) => return Err("event_indicator is true but time_to_event_days is not a positive number".into()),
            (false, Some(_)) => return Err("time_to_event_days given for a patient without an event".into()),
            (false, None) => {}
        }
        for (i, e) in self.events.iter().enumerate() {
            if !e.t_days.is_finite() {
                return Err(format!("event {i}: t_days is not finite"));
            }
            match e.modality {
                Modality::Blood | Modality::Imaging => {
                    if e.codes.is_some() {
                        return Err(format!("event {i}: {} event carries codes", e.modality));
                    }
                    let Some(f) = &e.features else {
                        return Err(format!("event {i}: {} event without features", e.modality));
                    };
                    if f.values().flatten().any(|v| !v.is_finite()) {
                        return Err(format!("event {i}: non-finite feature value"));
                    }
                }
                Modality::Medication => {
                    if e.features.is_some() {
                        return Err(format!("event {i}: medication event carries features"));
                    }
                    if e.codes.is_none() {
                        return Err(format!("event {i}: medication event without codes"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parses and validates one dataset line (`line` is 1-based, for errors).
pub fn parse_record(text: &str, line: usize) -> Result<PatientRecord> {
    let rec: PatientRecord = serde_json::from_str(text).map_err(|e| Error::Schema {
        line,
        msg: e.to_string(),
    })?;
    rec.validate().map_err(|msg| Error::Schema { line, msg })?;
    Ok(rec)
}

/// Reads a JSON-lines cohort. Blank lines are skipped; duplicate patient
/// ids are a schema error.
pub fn read_cohort(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(&line, i + 1)?;
        if !seen.insert(rec.patient_id.clone()) {
            return Err(Error::Schema {
                line: i + 1,
                msg: format!("duplicate patient_id '{}'", rec.patient_id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_cohort(path: impl AsRef<Path>, records: &[PatientRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExclusionReason {
    #[serde(rename = "followup<90d")]
    FollowupUnder90Days,
    #[serde(rename = "no-12-month-window")]
    NoTwelveMonthWindow,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExclusionReason::FollowupUnder90Days => "followup<90d",
            ExclusionReason::NoTwelveMonthWindow => "no-12-month-window",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub patient_id: String,
    pub reason: ExclusionReason,
}

/// Why `outcome` is ineligible, if it is.
pub fn exclusion_reason(outcome: &Outcome) -> Option<ExclusionReason> {
    if outcome.followup() < MIN_FOLLOWUP_DAYS {
        return Some(ExclusionReason::FollowupUnder90Days);
    }
    let longest = HORIZONS_DAYS[HORIZONS_DAYS.len() - 1];
    if outcome.death().is_none() && outcome.last_followup_days < CUTOFF_MIN_DAYS + longest {
        return Some(ExclusionReason::NoTwelveMonthWindow);
    }
    None
}

/// Splits a cohort into eligible records and exclusions with reasons.
pub fn eligibility_filter(cohort: &[PatientRecord]) -> (Vec<PatientRecord>, Vec<Exclusion>) {
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for r in cohort {
        match exclusion_reason(&r.outcome()) {
            None => included.push(r.clone()),
            Some(reason) => excluded.push(Exclusion {
                patient_id: r.patient_id.clone(),
                reason,
            }),
        }
    }
    (included, excluded)
}

/// Uniform cutoff in `[lo, hi]`.
pub fn sample_cutoff(rng: &mut SeededRng, lo: f64, hi: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::invalid("sample_cutoff", format!("need lo < hi, got [{lo}, {hi}]")));
    }
    Ok(rng.uniform_range(lo, hi))
}

/// Training cutoff for one patient: the upper end is clipped at death.
/// `None` when no admissible cutoff exists.
pub fn training_cutoff(rng: &mut SeededRng, outcome: &Outcome, lo: f64, hi: f64) -> Option<f64> {
    let hi = outcome.death().map_or(hi, |d| hi.min(d));
    if hi < lo {
        None
    } else if hi == lo {
        Some(lo)
    } else {
        sample_cutoff(rng, lo, hi).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub cutoff_days: f64,
    pub horizons: Vec<f64>,
    /// `None` where the outcome at `cutoff + horizon` is unobserved.
    pub labels: Vec<Option<bool>>,
}

/// Death within each horizon after `cutoff`.
pub fn labels_at(outcome: &Outcome, cutoff: f64, horizons: &[f64]) -> Result<LabelSet> {
    if let Some(death) = outcome.death() {
        if cutoff > death {
            return Err(Error::CutoffPostMortem { cutoff, death });
        }
    }
    let alive_until = outcome.followup();
    let labels = horizons
        .iter()
        .map(|h| {
            let end = cutoff + h;
            match outcome.death() {
                Some(d) if d <= end => Some(true),
                _ if alive_until >= end => Some(false),
                _ => None,
            }
        })
        .collect();
    Ok(LabelSet {
        cutoff_days: cutoff,
        horizons: horizons.to_vec(),
        labels,
    })
}

/// Drops events after `cutoff` and derives the horizon labels.
pub fn truncate_and_label(
    record: &PatientRecord,
    cutoff: f64,
    horizons: &[f64],
) -> Result<(PatientRecord, LabelSet)> {
    let labels = labels_at(&record.outcome(), cutoff, horizons)?;
    let mut r = record.clone();
    r.events.retain(|e| e.t_days <= cutoff);
    Ok((r, labels))
}

#[cfg(test)]
mod tests;
