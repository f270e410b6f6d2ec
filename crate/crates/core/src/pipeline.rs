//! Cross-validated training, fixed-cutoff evaluation and paired
//! comparison of runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRow, EncoderFamily, DEFAULT_TAU_DAYS};
use crate::autodiff::{Adam, AdamConfig};
use crate::cohort::{
    apply_preprocessor, eligibility_filter, feature_missingness_filter, fit_preprocessor, labels_at, read_cohort,
    training_cutoff, Exclusion, Modality, PatientRecord, PreparedRecord, PreprocessStats, CUTOFF_MAX_DAYS,
    CUTOFF_MIN_DAYS, HORIZONS_DAYS,
};
use crate::error::{Error, Result};
use crate::multimodal::{Example, FusionConfig, InputWidths, Model, ModelConfig, Variant};
use crate::rng::SeededRng;
use crate::stats::{aggregate_folds, delong_test, fisher_combine, fold_checksum, stratified_kfold, Aggregate, FoldTask, ScoredSample, ALPHA};

pub const REPORT_VERSION: &str = "tsimta-report/1";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const FOLDS_FILE: &str = "folds.json";
pub const LOSS_CURVES_FILE: &str = "loss_curves.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub family: EncoderFamily,
    pub variant: Variant,
    /// TSimTA blocks (N).
    pub n_blocks: usize,
    /// SimTA layers per block (N_inner).
    pub n_inner: usize,
    pub d_model: usize,
    pub sa_heads: usize,
    pub use_positional_encoding: bool,
    pub mlp_hidden: usize,
    pub tau_days: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub p_modality_drop: f64,
    pub k_folds: usize,
    pub train_cutoff_range: [f64; 2],
    pub eval_cutoffs: Vec<f64>,
    /// Draw fresh training cutoffs every epoch rather than once per
    /// patient.
    pub resample_cutoffs: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fusion = FusionConfig::default();
        Self {
            dataset: PathBuf::new(),
            family: EncoderFamily::TSimTA,
            variant: fusion.variant,
            n_blocks: 1,
            n_inner: 3,
            d_model: 32,
            sa_heads: fusion.sa_heads,
            use_positional_encoding: fusion.use_positional_encoding,
            mlp_hidden: fusion.mlp_hidden,
            tau_days: DEFAULT_TAU_DAYS,
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            p_modality_drop: fusion.p_modality_drop,
            k_folds: 3,
            train_cutoff_range: [CUTOFF_MIN_DAYS, CUTOFF_MAX_DAYS],
            eval_cutoffs: vec![90.0, 180.0],
            resample_cutoffs: true,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.k_folds < 2 {
            return bad(format!("k_folds must be at least 2, got {}", self.k_folds));
        }
        let [lo, hi] = self.train_cutoff_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad(format!("invalid training cutoff range [{lo}, {hi}]"));
        }
        if self.eval_cutoffs.iter().any(|c| !c.is_finite()) {
            return bad("evaluation cutoffs must be finite".into());
        }
        self.model_config(InputWidths {
            blood: 1,
            imaging: 1,
            medication: 1,
        }, 0)
        .validate()
    }

    pub fn model_config(&self, input_widths: InputWidths, seed: u64) -> ModelConfig {
        let fusion = FusionConfig {
            variant: self.variant,
            sa_heads: self.sa_heads,
            use_positional_encoding: self.use_positional_encoding,
            mlp_hidden: self.mlp_hidden,
            p_modality_drop: self.p_modality_drop,
        };
        ModelConfig {
            n_blocks: self.n_blocks,
            n_inner: self.n_inner,
            d_model: self.d_model,
            tau_days: self.tau_days,
            ..ModelConfig::new(self.family, fusion, input_widths, seed)
        }
    }

    /// Short label such as `TSimTA/ConcatSA`.
    pub fn label(&self) -> String {
        format!("{}/{}", self.family, self.variant)
    }
}

/// Eligible patients and the reasons others were left out.
#[derive(Clone, Debug)]
pub struct Cohort {
    /// Windowed records, in file order.
    pub eligible: Vec<PatientRecord>,
    pub excluded: Vec<Exclusion>,
}

impl Cohort {
    pub fn from_records(records: &[PatientRecord]) -> Self {
        let (eligible, excluded) = eligibility_filter(records);
        Self {
            eligible: eligible.iter().map(PatientRecord::windowed).collect(),
            excluded,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_records(&read_cohort(path)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub patient_ids: Vec<String>,
    pub folds: Vec<usize>,
    pub checksum: String,
}

impl FoldAssignment {
    /// Stratified by death indicator.
    pub fn new(records: &[PatientRecord], k: usize, seed: u64) -> Result<Self> {
        let keys: Vec<(String, bool)> = records.iter().map(|r| (r.patient_id.clone(), r.event_indicator)).collect();
        let folds = stratified_kfold(&keys, k, seed)?;
        let patient_ids: Vec<String> = keys.into_iter().map(|(id, _)| id).collect();
        let checksum = fold_checksum(&patient_ids, &folds);
        Ok(Self {
            k,
            seed,
            patient_ids,
            folds,
            checksum,
        })
    }

    /// `(train, test)` records for `fold`.
    pub fn split<'r>(&self, records: &'r [PatientRecord], fold: usize) -> (Vec<&'r PatientRecord>, Vec<&'r PatientRecord>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (r, &f) in records.iter().zip(&self.folds) {
            if f == fold {
                test.push(r);
            } else {
                train.push(r);
            }
        }
        (train, test)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedFold {
    pub fold: usize,
    pub model: Model,
    pub preprocess: PreprocessStats,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvRun {
    pub config: RunConfig,
    pub assignment: FoldAssignment,
    pub folds: Vec<TrainedFold>,
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    SeededRng::derive(seed, 0x666f_6c64_0000 + fold as u64).next_u64()
}

/// Fits preprocessing on `train` and trains one model on it.
pub fn train_fold(config: &RunConfig, train: &[PatientRecord], fold: usize) -> Result<TrainedFold> {
    config.validate()?;
    let kept = feature_missingness_filter(train)?;
    let preprocess = fit_preprocessor(train, &kept);
    let prepared: Vec<PreparedRecord> = train.iter().map(|r| apply_preprocessor(r, &preprocess)).collect();
    let widths = InputWidths {
        blood: preprocess.input_width(Modality::Blood),
        imaging: preprocess.input_width(Modality::Imaging),
        medication: preprocess.input_width(Modality::Medication),
    };
    let seed = fold_seed(config.seed, fold);
    let mut model = Model::init(config.model_config(widths, seed))?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let [lo, hi] = config.train_cutoff_range;
    let mut fixed_rng = SeededRng::derive(seed, 0);
    let fixed: Vec<Option<f64>> = prepared
        .iter()
        .map(|p| training_cutoff(&mut fixed_rng, &p.outcome, lo, hi))
        .collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = SeededRng::derive(seed, 1 + epoch as u64);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        rng.shuffle(&mut order);
        let mut examples = Vec::with_capacity(order.len());
        for i in order {
            let p = &prepared[i];
            let cutoff = if config.resample_cutoffs {
                training_cutoff(&mut rng, &p.outcome, lo, hi)
            } else {
                fixed[i]
            };
            let Some(cutoff) = cutoff else { continue };
            let labels = labels_at(&p.outcome, cutoff, &HORIZONS_DAYS)?.labels;
            examples.push(Example {
                record: p,
                cutoff,
                labels,
            });
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, batch) in examples.chunks(config.batch_size).enumerate() {
            if let Some(l) = model.train_step(&mut adam, batch, &mut rng, epoch, b)? {
                sum += l;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Config(format!("fold {fold}: no training example has a defined label")));
        }
        losses.push(sum / count as f64);
    }
    model.store.clear_grads();
    Ok(TrainedFold {
        fold,
        model,
        preprocess,
        losses,
    })
}

/// Trains one model per fold on the other folds.
pub fn train_cv(config: &RunConfig, cohort: &Cohort) -> Result<CvRun> {
    config.validate()?;
    let assignment = FoldAssignment::new(&cohort.eligible, config.k_folds, config.seed)?;
    let folds = (0..config.k_folds)
        .map(|f| {
            let (train, _) = assignment.split(&cohort.eligible, f);
            let train: Vec<PatientRecord> = train.into_iter().cloned().collect();
            train_fold(config, &train, f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvRun {
        config: config.clone(),
        assignment,
        folds,
    })
}

pub fn task_name(horizon_days: f64) -> String {
    format!("{}m", (horizon_days / 30.0).round())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patient_id: String,
    pub probabilities: Vec<f64>,
    pub labels: Vec<Option<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub horizon_days: f64,
    /// `None` when the fold holds only one class for this task.
    pub auc: Option<f64>,
    pub undefined: bool,
    pub mann_whitney_p: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_evaluated: usize,
    /// Held-out patients who died at or before the cutoff.
    pub n_dead_before_cutoff: usize,
    pub tasks: Vec<TaskResult>,
    pub predictions: Vec<PredictionRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub horizon_days: f64,
    #[serde(flatten)]
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub run: String,
    pub cutoff_days: f64,
    pub fold_checksum: String,
    pub n_patients: usize,
    pub folds: Vec<FoldReport>,
    pub summary: Vec<TaskSummary>,
}

impl MetricsReport {
    pub fn summary_for(&self, horizon_days: f64) -> Option<&TaskSummary> {
        self.summary.iter().find(|s| s.horizon_days == horizon_days)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn task_samples(predictions: &[PredictionRow], task: usize) -> Vec<ScoredSample> {
    predictions
        .iter()
        .filter_map(|p| p.labels[task].map(|l| ScoredSample::new(p.patient_id.clone(), p.probabilities[task], l)))
        .collect()
}

/// Predicts every held-out patient alive at `cutoff` with the model of
/// their fold.
pub fn predict_fold(fold: &TrainedFold, test: &[&PatientRecord], cutoff: f64) -> Result<(Vec<PredictionRow>, usize)> {
    let mut rows = Vec::with_capacity(test.len());
    let mut dead = 0;
    for r in test {
        let labels = match labels_at(&r.outcome(), cutoff, &HORIZONS_DAYS) {
            Ok(l) => l.labels,
            Err(Error::CutoffPostMortem { .. }) => {
                dead += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let prepared = apply_preprocessor(r, &fold.preprocess);
        let probabilities = fold.model.predict(&prepared, cutoff)?;
        if probabilities.iter().any(|p| !p.is_finite()) {
            return Err(Error::NanScore(r.patient_id.clone()));
        }
        rows.push(PredictionRow {
            patient_id: r.patient_id.clone(),
            probabilities,
            labels,
        });
    }
    rows.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok((rows, dead))
}

/// Per-task AUC and Mann-Whitney p of one fold's predictions.
pub fn fold_report(fold: usize, predictions: Vec<PredictionRow>, n_dead_before_cutoff: usize) -> Result<FoldReport> {
    let tasks = HORIZONS_DAYS
        .iter()
        .enumerate()
        .map(|(t, &h)| {
            let r = FoldTask::from_samples(fold, &task_samples(&predictions, t))?;
            Ok(TaskResult {
                task: task_name(h),
                horizon_days: h,
                auc: r.auc,
                undefined: r.auc.is_none(),
                mann_whitney_p: r.mann_whitney_p,
                n_pos: r.n_pos,
                n_neg: r.n_neg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldReport {
        fold,
        n_evaluated: predictions.len(),
        n_dead_before_cutoff,
        tasks,
        predictions,
    })
}

/// Assembles fold reports into a report with per-task summaries.
pub fn metrics_report(run: String, cutoff_days: f64, fold_checksum: String, n_patients: usize, folds: Vec<FoldReport>) -> MetricsReport {
    let summary = HORIZONS_DAYS
        .iter()
        .enumerate()
        .map(|(t, &h)| {
            let per_fold: Vec<FoldTask> = folds
                .iter()
                .map(|f| {
                    let r = &f.tasks[t];
                    FoldTask {
                        fold: f.fold,
                        auc: r.auc,
                        mann_whitney_p: r.mann_whitney_p,
                        n_pos: r.n_pos,
                        n_neg: r.n_neg,
                    }
                })
                .collect();
            TaskSummary {
                task: task_name(h),
                horizon_days: h,
                aggregate: aggregate_folds(&per_fold),
            }
        })
        .collect();
    MetricsReport {
        version: REPORT_VERSION.into(),
        run,
        cutoff_days,
        fold_checksum,
        n_patients,
        folds,
        summary,
    }
}

/// Per-fold, per-task AUC and Mann-Whitney p on held-out folds.
pub fn evaluate(run: &CvRun, cohort: &Cohort, cutoff: f64) -> Result<MetricsReport> {
    let assignment = FoldAssignment::new(&cohort.eligible, run.assignment.k, run.assignment.seed)?;
    if assignment.checksum != run.assignment.checksum {
        return Err(Error::NonComparable(
            "the dataset's fold assignment differs from the one the run was trained on".into(),
        ));
    }
    let mut folds = Vec::with_capacity(run.folds.len());
    for fold in &run.folds {
        let (_, test) = assignment.split(&cohort.eligible, fold.fold);
        let (predictions, dead) = predict_fold(fold, &test, cutoff)?;
        folds.push(fold_report(fold.fold, predictions, dead)?);
    }
    Ok(metrics_report(
        run.config.label(),
        cutoff,
        assignment.checksum,
        cohort.eligible.len(),
        folds,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldComparison {
    pub fold: usize,
    pub auc_a: Option<f64>,
    pub auc_b: Option<f64>,
    pub diff: Option<f64>,
    /// `None` when the fold has a single class for this task.
    pub p: Option<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskComparison {
    pub task: String,
    pub horizon_days: f64,
    pub folds: Vec<FoldComparison>,
    /// Fisher combination of the per-fold DeLong p-values.
    pub combined_p: Option<f64>,
    /// Every compared fold had zero variance of the AUC difference.
    pub degenerate: bool,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub version: String,
    pub run_a: String,
    pub run_b: String,
    pub cutoff_days: f64,
    pub fold_checksum: String,
    pub tasks: Vec<TaskComparison>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Per-fold DeLong tests of `a` against `b`, combined over folds with
/// Fisher's method.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> Result<ComparisonReport> {
    if a.fold_checksum != b.fold_checksum {
        return Err(Error::NonComparable(format!(
            "fold checksums differ ({} vs {})",
            a.fold_checksum, b.fold_checksum
        )));
    }
    if a.cutoff_days != b.cutoff_days || a.folds.len() != b.folds.len() {
        return Err(Error::NonComparable(format!(
            "evaluated at cutoff {} with {} folds vs cutoff {} with {} folds",
            a.cutoff_days,
            a.folds.len(),
            b.cutoff_days,
            b.folds.len()
        )));
    }
    let mut tasks = Vec::with_capacity(HORIZONS_DAYS.len());
    for (t, &h) in HORIZONS_DAYS.iter().enumerate() {
        let mut folds = Vec::with_capacity(a.folds.len());
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            let sa = task_samples(&fa.predictions, t);
            let sb = task_samples(&fb.predictions, t);
            let (auc_a, auc_b) = (fa.tasks[t].auc, fb.tasks[t].auc);
            let (p, degenerate, diff) = if auc_a.is_some() && auc_b.is_some() {
                let d = delong_test(&sa, &sb)?;
                (Some(d.p), d.degenerate, Some(d.diff))
            } else {
                if sa.len() != sb.len() {
                    return Err(Error::Unpaired(format!("fold {}: {} vs {} samples", fa.fold, sa.len(), sb.len())));
                }
                (None, false, None)
            };
            folds.push(FoldComparison {
                fold: fa.fold,
                auc_a,
                auc_b,
                diff,
                p,
                degenerate,
            });
        }
        let ps: Vec<f64> = folds.iter().filter_map(|f| f.p).collect();
        let combined_p = if ps.is_empty() { None } else { Some(fisher_combine(&ps)?) };
        let compared: Vec<&FoldComparison> = folds.iter().filter(|f| f.p.is_some()).collect();
        tasks.push(TaskComparison {
            task: task_name(h),
            horizon_days: h,
            degenerate: !compared.is_empty() && compared.iter().all(|f| f.degenerate),
            significant: combined_p.is_some_and(|p| p < ALPHA),
            combined_p,
            folds,
        });
    }
    Ok(ComparisonReport {
        version: REPORT_VERSION.into(),
        run_a: a.run.clone(),
        run_b: b.run.clone(),
        cutoff_days: a.cutoff_days,
        fold_checksum: a.fold_checksum.clone(),
        tasks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub run: String,
    pub patient_id: String,
    pub fold: usize,
    pub cutoff_days: f64,
    pub probabilities: Vec<f64>,
    pub modalities: BTreeMap<Modality, Vec<AttentionRow>>,
}

/// Attention weights of every encoder layer for one held-out patient.
pub fn attention_dump(run: &CvRun, cohort: &Cohort, patient_id: &str, cutoff: f64) -> Result<AttentionDump> {
    let idx = cohort
        .eligible
        .iter()
        .position(|r| r.patient_id == patient_id)
        .ok_or_else(|| Error::Config(format!("patient '{patient_id}' is not in the eligible cohort")))?;
    let record = &cohort.eligible[idx];
    if let Some(d) = record.outcome().death() {
        if cutoff > d {
            return Err(Error::CutoffPostMortem { cutoff, death: d });
        }
    }
    let fold_idx = run.assignment.folds[idx];
    let fold = run
        .folds
        .iter()
        .find(|f| f.fold == fold_idx)
        .ok_or_else(|| Error::Config(format!("run has no model for fold {fold_idx}")))?;
    let prepared = apply_preprocessor(record, &fold.preprocess);
    let (probabilities, traces) = fold.model.predict_traced(&prepared, cutoff)?;
    let modalities = traces
        .into_iter()
        .map(|(m, layers)| (m, layers.iter().flat_map(|l| l.rows()).collect()))
        .collect();
    Ok(AttentionDump {
        run: run.config.label(),
        patient_id: patient_id.into(),
        fold: fold_idx,
        cutoff_days: cutoff,
        probabilities,
        modalities,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LossCurve {
    fold: usize,
    losses: Vec<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn fold_dir(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold{fold}"))
}

/// Writes the resolved config, fold assignment, loss curves and every
/// fold's model and preprocessing into `dir`.
pub fn save_run(run: &CvRun, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(RESOLVED_CONFIG_FILE), &run.config)?;
    write_json(&dir.join(FOLDS_FILE), &run.assignment)?;
    let curves: Vec<LossCurve> = run
        .folds
        .iter()
        .map(|f| LossCurve {
            fold: f.fold,
            losses: f.losses.clone(),
        })
        .collect();
    write_json(&dir.join(LOSS_CURVES_FILE), &curves)?;
    for f in &run.folds {
        let fd = fold_dir(dir, f.fold);
        fs::create_dir_all(&fd).map_err(|e| Error::io(&fd, e))?;
        f.model.save(&fd, "model")?;
        write_json(&fd.join("preprocess.json"), &f.preprocess)?;
    }
    Ok(())
}

pub fn load_run(dir: impl AsRef<Path>) -> Result<CvRun> {
    let dir = dir.as_ref();
    let config: RunConfig = read_json(&dir.join(RESOLVED_CONFIG_FILE))?;
    let assignment: FoldAssignment = read_json(&dir.join(FOLDS_FILE))?;
    let curves: Vec<LossCurve> = read_json(&dir.join(LOSS_CURVES_FILE))?;
    let folds = curves
        .into_iter()
        .map(|c| {
            let fd = fold_dir(dir, c.fold);
            Ok(TrainedFold {
                fold: c.fold,
                model: Model::load(fd.join("model.manifest.json"))?,
                preprocess: read_json(&fd.join("preprocess.json"))?,
                losses: c.losses,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvRun {
        config,
        assignment,
        folds,
    })
}
