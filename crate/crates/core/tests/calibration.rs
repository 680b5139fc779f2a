use cladvr_core::calibration::{calibrate, CalibrationError, CalibrationPlan, SimSetup};
use cladvr_core::lstm::TrainConfig;
use cladvr_core::scenario::{run_scenario, ScenarioSpec};
use cladvr_core::session_log::{read_jsonl, replay, write_jsonl, Policy};
use cladvr_core::synthgen::SubjectProfile;

#[test]
fn calibrated_model_orders_the_tasks_and_replays_cleanly() {
    let subject = SubjectProfile { seed: 7, ..Default::default() };
    let (model, report) = calibrate(&subject, &CalibrationPlan::default(), &SimSetup::default(), &TrainConfig::default(), [0.33, 0.66], 7).unwrap();
    assert!(!report.calibration_weak);
    assert!(report.median_threeback > report.median_oneback);
    let th = model.thresholds;
    assert!(0.0 < th.t_low && th.t_low < th.t_high && th.t_high < 1.0);

    let bytes = model.to_bytes();
    let mut spec = ScenarioSpec::new(Policy::Adaptive, 120.0, 2);
    spec.model_sha256 = Some(cladvr_core::session_log::sha256_hex(&bytes));
    let out = run_scenario(&spec, &model).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &out.records).unwrap();
    let back = read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, out.records);
    let r = replay(&back, &model, Some(&bytes)).unwrap();
    assert_eq!(r.decisions, 12);
    assert_eq!(r.mismatches, 0, "{:?}", r.details);
}

#[test]
fn unresponsive_subject_is_reported() {
    let subject = SubjectProfile { reactivity: 0.0, seed: 3, ..Default::default() };
    let err = calibrate(&subject, &CalibrationPlan::default(), &SimSetup::default(), &TrainConfig::default(), [0.33, 0.66], 3).unwrap_err();
    assert!(matches!(err, CalibrationError::SubjectDegenerate(_)), "{err:?}");
}
