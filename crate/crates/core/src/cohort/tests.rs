use std::collections::BTreeMap;

use super::*;

fn outcome(dead: bool, tte: Option<f64>, last: f64) -> Outcome {
    Outcome {
        event_indicator: dead,
        time_to_event_days: tte,
        last_followup_days: last,
    }
}

fn numeric(t: f64, modality: Modality, values: &[(&str, Option<f64>)]) -> ObservationEvent {
    ObservationEvent {
        t_days: t,
        modality,
        features: Some(
            values
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect::<BTreeMap<_, _>>(),
        ),
        codes: None,
    }
}

fn meds(t: f64, codes: &[&str]) -> ObservationEvent {
    ObservationEvent {
        t_days: t,
        modality: Modality::Medication,
        features: None,
        codes: Some(codes.iter().map(|c| c.to_string()).collect()),
    }
}

fn record(id: &str, events: Vec<ObservationEvent>) -> PatientRecord {
    PatientRecord {
        patient_id: id.into(),
        event_indicator: false,
        time_to_event_days: None,
        last_followup_days: 800.0,
        events,
    }
}

#[test]
fn early_death_is_excluded() {
    let o = outcome(true, Some(30.0), 30.0);
    assert_eq!(exclusion_reason(&o), Some(ExclusionReason::FollowupUnder90Days));
    assert_eq!(ExclusionReason::FollowupUnder90Days.to_string(), "followup<90d");
}

#[test]
fn short_alive_followup_lacks_window() {
    assert_eq!(exclusion_reason(&outcome(false, None, 500.0)), None);
    assert_eq!(
        exclusion_reason(&outcome(false, None, 400.0)),
        Some(ExclusionReason::NoTwelveMonthWindow)
    );
    assert_eq!(
        ExclusionReason::NoTwelveMonthWindow.to_string(),
        "no-12-month-window"
    );
    assert_eq!(exclusion_reason(&outcome(false, None, 60.0)), Some(ExclusionReason::FollowupUnder90Days));
}

#[test]
fn death_inside_window_is_eligible() {
    assert_eq!(exclusion_reason(&outcome(true, Some(200.0), 200.0)), None);
    let mut a = record("a", vec![]);
    a.event_indicator = true;
    a.time_to_event_days = Some(30.0);
    let b = record("b", vec![]);
    let (inc, exc) = eligibility_filter(&[a, b]);
    assert_eq!(inc.len(), 1);
    assert_eq!(exc[0].patient_id, "a");
}

#[test]
fn death_at_200_cutoff_90_labels() {
    let l = labels_at(&outcome(true, Some(200.0), 200.0), 90.0, &HORIZONS_DAYS).unwrap();
    assert_eq!(l.labels, vec![Some(false), Some(true), Some(true), Some(true)]);
}

#[test]
fn observed_survival_labels_zero() {
    let l = labels_at(&outcome(false, None, 500.0), 90.0, &HORIZONS_DAYS).unwrap();
    assert_eq!(l.labels, vec![Some(false); 4]);
    let l = labels_at(&outcome(false, None, 500.0), 200.0, &HORIZONS_DAYS).unwrap();
    assert_eq!(l.labels, vec![Some(false), Some(false), Some(false), None]);
}

#[test]
fn cutoff_after_death_fails() {
    let err = labels_at(&outcome(true, Some(120.0), 120.0), 150.0, &HORIZONS_DAYS).unwrap_err();
    assert!(err.to_string().starts_with("cutoff-post-mortem"));
    assert!(labels_at(&outcome(true, Some(120.0), 120.0), 120.0, &HORIZONS_DAYS).is_ok());
}

#[test]
fn truncation_drops_later_events() {
    let r = record(
        "p",
        vec![
            numeric(10.0, Modality::Blood, &[("a", Some(1.0))]),
            numeric(100.0, Modality::Blood, &[("a", Some(2.0))]),
            meds(90.0, &["X"]),
        ],
    );
    let (t, l) = truncate_and_label(&r, 90.0, &HORIZONS_DAYS).unwrap();
    assert_eq!(t.events.len(), 2);
    assert!(t.events.iter().all(|e| e.t_days <= 90.0));
    assert_eq!(l.cutoff_days, 90.0);
}

#[test]
fn cutoffs_stay_in_support_and_replay() {
    let mut a = SeededRng::new(3);
    let mut b = SeededRng::new(3);
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    for _ in 0..10_000 {
        let c = sample_cutoff(&mut a, 90.0, 365.0).unwrap();
        assert_eq!(c, sample_cutoff(&mut b, 90.0, 365.0).unwrap());
        lo = lo.min(c);
        hi = hi.max(c);
    }
    assert!(lo >= 90.0 && hi <= 365.0);
    assert!(sample_cutoff(&mut a, 5.0, 5.0).is_err());
}

#[test]
fn training_cutoff_respects_death() {
    let mut rng = SeededRng::new(1);
    let o = outcome(true, Some(120.0), 120.0);
    for _ in 0..100 {
        let c = training_cutoff(&mut rng, &o, 90.0, 365.0).unwrap();
        assert!((90.0..=120.0).contains(&c));
    }
    assert_eq!(training_cutoff(&mut rng, &outcome(true, Some(90.0), 90.0), 90.0, 365.0), Some(90.0));
    assert_eq!(training_cutoff(&mut rng, &outcome(true, Some(60.0), 60.0), 90.0, 365.0), None);
}

#[test]
fn schema_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let good = serde_json::to_string(&record("a", vec![meds(1.0, &["A01"])])).unwrap();
    std::fs::write(&path, format!("{good}\n{{\"patient_id\": 3}}\n")).unwrap();
    match read_cohort(&path) {
        Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    let bad_mod = good.replace("medication", "genomics");
    std::fs::write(&path, format!("{bad_mod}\n")).unwrap();
    assert!(matches!(read_cohort(&path), Err(Error::Schema { line: 1, .. })));
    let mixed = good.replace("\"codes\"", "\"features\":{\"x\":1.0},\"codes\"");
    std::fs::write(&path, format!("{mixed}\n")).unwrap();
    assert!(matches!(read_cohort(&path), Err(Error::Schema { line: 1, .. })));
    std::fs::write(&path, format!("{good}\n{good}\n")).unwrap();
    assert!(matches!(read_cohort(&path), Err(Error::Schema { line: 2, .. })));
}

#[test]
fn cohort_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let mut dead = record("d", vec![numeric(-5.0, Modality::Imaging, &[("liver", Some(1.5e3)), ("spleen", None)])]);
    dead.event_indicator = true;
    dead.time_to_event_days = Some(321.0);
    dead.last_followup_days = 321.0;
    let recs = vec![dead, record("a", vec![meds(3.0, &["N02AA01", "A02BC01"])])];
    write_cohort(&path, &recs).unwrap();
    assert_eq!(read_cohort(&path).unwrap(), recs);
}

#[test]
fn schema_doc_examples_parse() {
    let doc = include_str!("../../../../docs/dataset_schema.md");
    let lines: Vec<&str> = doc.lines().filter(|l| l.starts_with("{\"patient_id\"")).collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        parse_record(l, i + 1).unwrap();
    }
}

#[test]
fn window_filter_bounds_events() {
    let r = record(
        "w",
        vec![meds(-91.0, &["A"]), meds(-90.0, &["A"]), meds(365.0, &["A"]), meds(366.0, &["A"])],
    );
    let w = r.windowed();
    assert_eq!(w.events.len(), 2);
}

fn blood_cohort(values: &[[Option<f64>; 3]]) -> Vec<PatientRecord> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            record(
                &format!("p{i}"),
                vec![numeric(
                    i as f64,
                    Modality::Blood,
                    &[("a", v[0]), ("b", v[1]), ("c", v[2])],
                )],
            )
        })
        .collect()
}

#[test]
fn missingness_thresholds_follow_comparison_direction() {
    // blood "b" missing in exactly 60% of events is kept, "c" at 80% dropped
    let rows: Vec<[Option<f64>; 3]> = (0..5)
        .map(|i| {
            [
                Some(i as f64),
                if i < 3 { None } else { Some(1.0) },
                if i < 4 { None } else { Some(1.0) },
            ]
        })
        .collect();
    let mut train = blood_cohort(&rows);
    // imaging "x" missing in exactly 50% is dropped, "y" never missing is kept
    for (i, r) in train.iter_mut().take(4).enumerate() {
        r.events.push(numeric(
            0.0,
            Modality::Imaging,
            &[("x", if i < 2 { None } else { Some(1.0) }), ("y", Some(i as f64))],
        ));
    }
    let kept = feature_missingness_filter(&train).unwrap();
    assert_eq!(kept.blood, vec!["a", "b"]);
    assert_eq!(kept.imaging, vec!["y"]);
}

#[test]
fn all_features_dropped_is_degenerate() {
    let train = blood_cohort(&[[None, None, None], [None, None, None], [Some(1.0), None, None]]);
    assert!(matches!(
        feature_missingness_filter(&train),
        Err(Error::ModalityDegenerate(m)) if m == "blood"
    ));
}

#[test]
fn robust_scaling_resists_outliers() {
    let s = FeatureScaler::fit(&[vec![1.0, 2.0, 100.0]]);
    assert_eq!(s.medians[0], 2.0);
    // type-7: q25 = 1.5, q75 = 51
    assert_eq!(s.iqrs[0], 49.5);
    assert_eq!(s.scale(0, 2.0), 0.0);
    assert!(s.scale(0, 100.0) > 1.9);
    assert!(s.scale(0, 1.0).abs() < 0.03);
    let c = FeatureScaler::fit(&[vec![4.0, 4.0, 4.0]]);
    assert_eq!(c.scale(0, 6.0), 2.0);
}

#[test]
fn complete_data_imputer_converges_immediately() {
    let rows: Vec<[Option<f64>; 3]> = (0..8)
        .map(|i| [Some(i as f64), Some((i * i) as f64), Some(1.0 - i as f64 * 0.5)])
        .collect();
    let train = blood_cohort(&rows);
    let kept = feature_missingness_filter(&train).unwrap();
    let stats = fit_preprocessor(&train, &kept);
    assert_eq!(stats.imputer.rounds, 1);
    assert!(stats.imputer.converged);
    let prepared = apply_preprocessor(&train[3], &stats);
    let want: Vec<f64> = (0..3)
        .map(|k| stats.blood.scale(k, rows[3][k].unwrap()))
        .collect();
    assert_eq!(prepared.events(Modality::Blood).rows, want);
}

#[test]
fn correlated_pair_imputation_follows_linear_relation() {
    let mut rows: Vec<[Option<f64>; 3]> = (0..12)
        .map(|i| {
            let a = i as f64 * 0.7 - 2.0;
            [Some(a), Some(2.0 * a + 1.0), Some(((i * 7) % 5) as f64)]
        })
        .collect();
    rows[5][1] = None;
    let train = blood_cohort(&rows);
    let kept = feature_missingness_filter(&train).unwrap();
    let stats = fit_preprocessor(&train, &kept);
    assert!(!stats.imputer.fallback);
    let p = apply_preprocessor(&train[5], &stats);
    let imputed = stats.blood.unscale(1, p.events(Modality::Blood).rows[1]);
    let a = rows[5][0].unwrap();
    assert!((imputed - (2.0 * a + 1.0)).abs() < 1e-2, "{imputed}");
}

#[test]
fn too_few_rows_fall_back_to_medians() {
    let train = blood_cohort(&[[Some(1.0), None, None], [Some(2.0), Some(3.0), Some(4.0)]]);
    let kept = KeptFeatures {
        blood: vec!["a".into(), "b".into(), "c".into()],
        imaging: vec![],
    };
    let stats = fit_preprocessor(&train, &kept);
    assert!(stats.imputer.fallback);
    let p = apply_preprocessor(&train[0], &stats);
    assert_eq!(&p.events(Modality::Blood).rows[1..], &[0.0, 0.0]);
}

#[test]
fn vocabulary_maps_unseen_codes_to_unk() {
    let train = vec![record("a", vec![meds(1.0, &["N02AA01", "A02BC01"])])];
    let stats = fit_preprocessor(&train, &KeptFeatures::default());
    assert_eq!(stats.token("A02BC01"), 1);
    assert_eq!(stats.token("N02AA01"), 2);
    assert_eq!(stats.token("L01XC99"), UNK_TOKEN);
    let test = record("b", vec![meds(2.0, &["L01XC99"])]);
    let p = apply_preprocessor(&test, &stats);
    assert_eq!(p.events(Modality::Medication).tokens, vec![vec![UNK_TOKEN]]);
    assert_eq!(stats.input_width(Modality::Medication), 3);
}

#[test]
fn refit_is_identical_and_scaled_medians_are_zero() {
    let rows: Vec<[Option<f64>; 3]> = (0..9)
        .map(|i| [Some(i as f64 * 3.0), Some(10.0 - i as f64), if i % 4 == 0 { None } else { Some(i as f64) }])
        .collect();
    let train = blood_cohort(&rows);
    let kept = feature_missingness_filter(&train).unwrap();
    let a = fit_preprocessor(&train, &kept);
    let b = fit_preprocessor(&train, &feature_missingness_filter(&train).unwrap());
    assert_eq!(a, b);
    let mut col0: Vec<f64> = train
        .iter()
        .map(|r| apply_preprocessor(r, &a).events(Modality::Blood).rows[0])
        .collect();
    col0.sort_by(f64::total_cmp);
    assert_eq!(col0[col0.len() / 2], 0.0);
}

#[test]
fn scaling_preserves_order() {
    let vals: Vec<f64> = vec![5.0, -2.0, 7.5, 0.1, 3.3, 3.3, 100.0];
    let s = FeatureScaler::fit(&[vals.clone()]);
    for a in &vals {
        for b in &vals {
            assert_eq!(a < b, s.scale(0, *a) < s.scale(0, *b));
        }
    }
}

#[test]
fn prepared_events_are_time_sorted() {
    let r = record(
        "s",
        vec![
            numeric(50.0, Modality::Blood, &[("a", Some(1.0))]),
            numeric(-10.0, Modality::Blood, &[("a", Some(2.0))]),
            numeric(50.0, Modality::Blood, &[("a", Some(3.0))]),
        ],
    );
    let stats = fit_preprocessor(&[r.clone()], &KeptFeatures { blood: vec!["a".into()], imaging: vec![] });
    let p = apply_preprocessor(&r, &stats);
    let b = p.events(Modality::Blood);
    assert_eq!(b.times, vec![-10.0, 50.0, 50.0]);
    assert_eq!(b.rows, vec![0.0, -1.0, 1.0]);
    assert_eq!(b.visible(49.0), 1);
    assert_eq!(b.visible(50.0), 3);
}
