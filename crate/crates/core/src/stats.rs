//! AUC and its significance tests, fold splitting and fold aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const ALPHA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub patient_id: String,
    pub score: f64,
    pub label: bool,
}

impl ScoredSample {
    pub fn new(patient_id: impl Into<String>, score: f64, label: bool) -> Self {
        Self {
            patient_id: patient_id.into(),
            score,
            label,
        }
    }
}

fn check_scores(samples: &[ScoredSample]) -> Result<()> {
    match samples.iter().find(|s| s.score.is_nan()) {
        Some(s) => Err(Error::NanScore(s.patient_id.clone())),
        None => Ok(()),
    }
}

/// Midranks (1-based) of `values`, plus Σ(t³ − t) over tie groups.
pub fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    (ranks, ties)
}

fn class_counts(samples: &[ScoredSample]) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.label).count();
    (pos, samples.len() - pos)
}

/// Mann-Whitney U of the positives: number of (positive, negative) pairs
/// where the positive scores higher, ties counted one half.
fn u_statistic(samples: &[ScoredSample]) -> (f64, f64) {
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let (ranks, ties) = midranks(&scores);
    let n_pos = samples.iter().filter(|s| s.label).count() as f64;
    let r_pos: f64 = samples
        .iter()
        .zip(&ranks)
        .filter(|(s, _)| s.label)
        .map(|(_, r)| r)
        .sum();
    (r_pos - n_pos * (n_pos + 1.0) / 2.0, ties)
}

/// Area under the ROC curve; `None` when either class is empty.
pub fn auc(samples: &[ScoredSample]) -> Result<Option<f64>> {
    check_scores(samples)?;
    let (n_pos, n_neg) = class_counts(samples);
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let (u, _) = u_statistic(samples);
    Ok(Some(u / (n_pos as f64 * n_neg as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    pub u: f64,
    pub z: f64,
    /// Two-sided.
    pub p: f64,
    /// Zero variance (all scores tied): `p` is reported as 1.
    pub degenerate: bool,
}

/// Two-sided Mann-Whitney test of positives vs negatives: normal
/// approximation with tie-corrected variance and continuity correction.
/// `None` when a class is empty.
pub fn mann_whitney_p(samples: &[ScoredSample]) -> Result<Option<MannWhitney>> {
    check_scores(samples)?;
    let (n1, n2) = class_counts(samples);
    if n1 == 0 || n2 == 0 {
        return Ok(None);
    }
    let (u, ties) = u_statistic(samples);
    let (n1, n2) = (n1 as f64, n2 as f64);
    let n = n1 + n2;
    let mean = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if !(var > 0.0) {
        return Ok(Some(MannWhitney {
            u,
            z: 0.0,
            p: 1.0,
            degenerate: true,
        }));
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(Some(MannWhitney {
        u,
        z,
        p: two_sided(z),
        degenerate: false,
    }))
}

fn two_sided(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * n.sf(z.abs())).min(1.0)
}

/// DeLong structural components of one classifier: `(v10, v01)`, one
/// entry per positive and per negative respectively.
fn structural_components(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let (tz, _) = midranks(&all);
    let (tx, _) = midranks(pos);
    let (ty, _) = midranks(neg);
    let v10 = (0..pos.len()).map(|i| (tz[i] - tx[i]) / n).collect();
    let v01 = (0..neg.len())
        .map(|j| 1.0 - (tz[pos.len() + j] - ty[j]) / m)
        .collect();
    (v10, v01)
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / k as f64;
    let mb = b.iter().sum::<f64>() / k as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (k - 1) as f64
}

fn split_scores(samples: &[ScoredSample]) -> (Vec<f64>, Vec<f64>) {
    let pos = samples.iter().filter(|s| s.label).map(|s| s.score).collect();
    let neg = samples.iter().filter(|s| !s.label).map(|s| s.score).collect();
    (pos, neg)
}

/// DeLong estimate of the variance of one classifier's AUC.
pub fn delong_variance(samples: &[ScoredSample]) -> Result<f64> {
    check_scores(samples)?;
    let (pos, neg) = split_scores(samples);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::invalid("delong_variance", "both classes must be non-empty"));
    }
    let (v10, v01) = structural_components(&pos, &neg);
    Ok(covariance(&v10, &v10) / pos.len() as f64 + covariance(&v01, &v01) / neg.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeLong {
    pub auc_a: f64,
    pub auc_b: f64,
    /// `auc_a − auc_b`.
    pub diff: f64,
    pub variance: f64,
    pub z: f64,
    pub p: f64,
    /// Variance of the difference is zero: `p` is reported as 1.
    pub degenerate: bool,
}

/// Paired DeLong test of two classifiers scored on the same patients.
pub fn delong_test(a: &[ScoredSample], b: &[ScoredSample]) -> Result<DeLong> {
    check_scores(a)?;
    check_scores(b)?;
    if a.len() != b.len() {
        return Err(Error::Unpaired(format!("{} vs {} samples", a.len(), b.len())));
    }
    if let Some((x, y)) = a
        .iter()
        .zip(b)
        .find(|(x, y)| x.patient_id != y.patient_id || x.label != y.label)
    {
        return Err(Error::Unpaired(format!(
            "patient '{}' ({}) paired with '{}' ({})",
            x.patient_id, x.label, y.patient_id, y.label
        )));
    }
    let (pa, na) = split_scores(a);
    let (pb, nb) = split_scores(b);
    if pa.is_empty() || na.is_empty() {
        return Err(Error::invalid("delong_test", "both classes must be non-empty"));
    }
    let (m, n) = (pa.len() as f64, na.len() as f64);
    let (v10a, v01a) = structural_components(&pa, &na);
    let (v10b, v01b) = structural_components(&pb, &nb);
    let auc_a = v10a.iter().sum::<f64>() / m;
    let auc_b = v10b.iter().sum::<f64>() / m;
    let s = |x10: &[f64], y10: &[f64], x01: &[f64], y01: &[f64]| {
        covariance(x10, y10) / m + covariance(x01, y01) / n
    };
    let saa = s(&v10a, &v10a, &v01a, &v01a);
    let sbb = s(&v10b, &v10b, &v01b, &v01b);
    let sab = s(&v10a, &v10b, &v01a, &v01b);
    let variance = saa + sbb - 2.0 * sab;
    let diff = auc_a - auc_b;
    if !(variance > 0.0) {
        return Ok(DeLong {
            auc_a,
            auc_b,
            diff,
            variance: variance.max(0.0),
            z: 0.0,
            p: 1.0,
            degenerate: true,
        });
    }
    let z = diff / variance.sqrt();
    Ok(DeLong {
        auc_a,
        auc_b,
        diff,
        variance,
        z,
        p: two_sided(z),
        degenerate: false,
    })
}

/// Fisher's method: survival of χ²(2k) at `−2 Σ ln p`, via the closed-form
/// even-degree series.
pub fn fisher_combine(pvals: &[f64]) -> Result<f64> {
    if pvals.is_empty() {
        return Err(Error::invalid("fisher_combine", "no p-values"));
    }
    if let Some(&p) = pvals.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::InvalidPValue(p));
    }
    let half_x = -pvals.iter().map(|p| p.ln()).sum::<f64>();
    let mut term = 1.0;
    let mut sum = 1.0;
    for j in 1..pvals.len() {
        term *= half_x / j as f64;
        sum += term;
    }
    Ok(((-half_x).exp() * sum).min(1.0))
}

/// Fold index for every key, in input order. Members of each stratum are
/// shuffled and dealt round-robin; the dealing position carries over from
/// one stratum to the next so fold sizes stay balanced overall.
pub fn stratified_kfold<S: Ord + Clone>(keys: &[(String, S)], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid("stratified_kfold", format!("k must be at least 2, got {k}")));
    }
    if k > keys.len() {
        return Err(Error::TooManyFolds { k, n: keys.len() });
    }
    let mut strata: BTreeMap<S, Vec<usize>> = BTreeMap::new();
    for (i, (_, s)) in keys.iter().enumerate() {
        strata.entry(s.clone()).or_default().push(i);
    }
    let mut rng = SeededRng::derive(seed, 0x6b_666f_6c64);
    let mut folds = vec![0; keys.len()];
    let mut next = 0;
    for members in strata.values_mut() {
        members.sort_by(|&a, &b| keys[a].0.cmp(&keys[b].0));
        rng.shuffle(members);
        for &i in members.iter() {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(folds)
}

/// SHA-256 over the sorted `(patient_id, fold)` pairs.
pub fn fold_checksum(ids: &[String], folds: &[usize]) -> String {
    let mut pairs: Vec<(&String, usize)> = ids.iter().zip(folds.iter().copied()).collect();
    pairs.sort();
    let mut h = Sha256::new();
    for (id, f) in pairs {
        h.update(id.as_bytes());
        h.update(b"\t");
        h.update(f.to_string().as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One fold's result for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldTask {
    pub fold: usize,
    pub auc: Option<f64>,
    pub mann_whitney_p: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl FoldTask {
    pub fn from_samples(fold: usize, samples: &[ScoredSample]) -> Result<Self> {
        let (n_pos, n_neg) = class_counts(samples);
        Ok(Self {
            fold,
            auc: auc(samples)?,
            mann_whitney_p: mann_whitney_p(samples)?.map(|m| m.p),
            n_pos,
            n_neg,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Mean over defined folds; `None` if no fold is defined.
    pub mean: Option<f64>,
    /// Sample standard deviation (n − 1); `None` with fewer than two
    /// defined folds.
    pub sd: Option<f64>,
    pub n_defined: usize,
    /// Some fold had a single-class task.
    pub any_undefined: bool,
    /// Defined folds whose Mann-Whitney p is below [`ALPHA`].
    pub n_significant: usize,
    pub all_significant: bool,
}

pub fn aggregate_folds(folds: &[FoldTask]) -> Aggregate {
    let aucs: Vec<f64> = folds.iter().filter_map(|f| f.auc).collect();
    let k = aucs.len();
    let mean = (k > 0).then(|| aucs.iter().sum::<f64>() / k as f64);
    let sd = match mean {
        Some(m) if k > 1 => {
            Some((aucs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt())
        }
        _ => None,
    };
    let n_significant = folds
        .iter()
        .filter(|f| f.auc.is_some() && f.mann_whitney_p.is_some_and(|p| p < ALPHA))
        .count();
    Aggregate {
        mean,
        sd,
        n_defined: k,
        any_undefined: k < folds.len(),
        n_significant,
        all_significant: k > 0 && n_significant == k,
    }
}
