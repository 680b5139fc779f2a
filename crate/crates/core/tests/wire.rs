use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use serde_json::Value;

use cladvr_core::calibration::Thresholds;
use cladvr_core::engine::EngineConfig;
use cladvr_core::features::{FeatureConfig, NormStats};
use cladvr_core::lstm::{ModelFile, ModelParams};
use cladvr_core::scenario::{run_scenario, ScenarioSpec};
use cladvr_core::server::{serve, ServerSettings};
use cladvr_core::session_log::{to_line, Policy};
use cladvr_core::streams::StreamConfig;
use cladvr_core::synthgen::{gen_eeg, SubjectProfile};

fn model() -> ModelFile {
    ModelFile { params: ModelParams::init(8, 16, 0.2, 5), thresholds: Thresholds { t_low: 0.33, t_high: 0.66 }, norms: NormStats::default() }
}

fn keys(v: &Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

fn set(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[test]
fn log_record_field_names() {
    let spec = ScenarioSpec::new(Policy::Adaptive, 60.0, 3);
    let out = run_scenario(&spec, &model()).unwrap();
    let lines: Vec<Value> = out.records.iter().map(|r| serde_json::from_str(&to_line(r)).unwrap()).collect();
    assert_eq!(lines[0]["type"], "meta");
    let mut seen = BTreeSet::new();
    for v in &lines {
        let ty = v["type"].as_str().unwrap().to_string();
        let k = keys(v);
        let (required, optional) = match ty.as_str() {
            "meta" => (set(&["type", "t", "session_id", "clock", "kind", "policy", "seed", "secs", "stream", "features", "engine", "params"]), set(&["model", "model_sha256"])),
            "eeg_summary" => (set(&["type", "t", "session_id", "rows", "dropped_samples", "lossy", "rms"]), set(&[])),
            "features" => (set(&["type", "t", "session_id", "frames", "raw", "events"]), set(&["data_gap"])),
            "decision" => (set(&["type", "t", "session_id", "L", "probs", "raw_state", "stable_state", "interventions", "latency_ms"]), set(&["l", "suppressed", "data_gap"])),
            "event" => (set(&["type", "t", "session_id", "event"]), set(&["issued"])),
            other => panic!("unexpected record type {other}"),
        };
        assert!(required.is_subset(&k), "{ty}: missing {:?}", required.difference(&k).collect::<Vec<_>>());
        let extra: Vec<_> = k.difference(&required).filter(|x| !optional.contains(*x)).collect();
        assert!(extra.is_empty(), "{ty}: unexpected {extra:?}");
        if ty == "event" {
            let e = &v["event"];
            assert!(set(&["t", "kind", "step_id", "module_id", "difficulty"]).is_subset(&keys(e)));
        }
        seen.insert(ty);
    }
    assert_eq!(seen, set(&["meta", "eeg_summary", "features", "decision", "event"]));
    // Records are written in time order.
    assert!(lines.windows(2).all(|w| w[0]["t"].as_f64() <= w[1]["t"].as_f64()));
}

fn start_server() -> u16 {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let settings = ServerSettings { model: model(), stream: StreamConfig::default(), features: FeatureConfig::default(), engine: EngineConfig::default() };
    std::thread::spawn(move || serve(listener, settings));
    port
}

#[test]
fn tcp_session_end_to_end() {
    let port = start_server();
    let conn = TcpStream::connect(("127.0.0.1", port)).unwrap();
    conn.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
    let mut reader = BufReader::new(conn.try_clone().unwrap());
    let mut writer = conn;
    let mut read_msg = || {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        serde_json::from_str::<Value>(&line).unwrap()
    };

    // A broken line gets an error and the session stays usable.
    writeln!(writer, "{{").unwrap();
    assert_eq!(read_msg(), serde_json::json!({"type": "error", "code": "malformed_json"}));

    let grab = r#"{"type":"event","t":0.5,"kind":"object_grab","step":2,"module":1,"object_ok":false,"difficulty":3}"#;
    writeln!(writer, "{grab}").unwrap();
    let haptic = read_msg();
    assert_eq!(haptic["type"], "intervention");
    assert_eq!(haptic["kind"], "haptic_pulse");

    // 30 s of EEG produces exactly three inferences.
    let eeg = gen_eeg(0.5, 30.0, &SubjectProfile::default(), 1);
    let mut batch = String::new();
    for s in &eeg {
        batch.push_str(&serde_json::json!({"type": "eeg", "t": s.t, "ch": s.channels}).to_string());
        batch.push('\n');
    }
    writer.write_all(batch.as_bytes()).unwrap();
    writer.flush().unwrap();
    writer.shutdown(std::net::Shutdown::Write).unwrap();

    let mut inferences = Vec::new();
    let mut line = String::new();
    while reader.read_line(&mut line).unwrap() > 0 {
        let v: Value = serde_json::from_str(&line).unwrap();
        assert_ne!(v["type"], "error", "{v}");
        if v["type"] == "inference" {
            assert_eq!(keys(&v), set(&["type", "t", "L", "probs", "raw_state", "stable_state"]));
            inferences.push(v["t"].as_f64().unwrap());
        }
        line.clear();
    }
    assert_eq!(inferences.len(), 3, "{inferences:?}");
    assert!(inferences.windows(2).all(|w| (w[1] - w[0] - 10.0).abs() < 1e-9));
}
