use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use cladvr_core::calibration::{self, CalibrationError};
use cladvr_core::config::Config;
use cladvr_core::lstm::{self, ModelFile};
use cladvr_core::scenario::{self, ScenarioSpec};
use cladvr_core::server::{self, ServerSettings};
use cladvr_core::session_log::{self, CalibrationReportRecord, ClockKind, MetaRecord, Policy, Record, TrainEpochRecord};
use cladvr_core::synthgen::{EegGenerator, SubjectProfile};
use cladvr_core::tools;

#[derive(Parser)]
#[command(name = "cladvr", version, about = "Cognitive-load-adaptive training engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the rest / 1-back / 3-back protocol on a simulated subject, train
    /// the classifier and write a model file.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        subject_seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSONL log of training epochs and the calibration report.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Simulate a closed-loop session and write its JSONL log.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        policy: Policy,
        #[arg(long)]
        secs: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Recompute decisions from a log's features and check they match.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Print every replayed decision as JSON.
        #[arg(long)]
        features: bool,
        /// Print a JSON report instead of the one-line summary.
        #[arg(long)]
        report: bool,
        /// Model to use instead of the path recorded in the log.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Serve the NDJSON protocol over TCP.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time full tick cycles and print a latency report.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate synthetic EEG at a constant load and write it as CSV.
    Gen {
        #[arg(long)]
        load: f64,
        #[arg(long)]
        secs: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Failure with its exit code and machine-readable code.
struct Failure {
    exit: u8,
    code: &'static str,
    message: String,
}

impl Failure {
    fn usage(m: impl ToString) -> Self {
        Self { exit: 1, code: "usage", message: m.to_string() }
    }
    fn config(m: impl ToString) -> Self {
        Self { exit: 2, code: "bad_config", message: m.to_string() }
    }
    fn model(m: impl ToString) -> Self {
        Self { exit: 3, code: "bad_model", message: m.to_string() }
    }
    fn runtime(m: impl ToString) -> Self {
        Self { exit: 4, code: "runtime", message: m.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(Failure::usage(e.to_string().trim())),
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("{}", json!({"error": f.code, "exit": f.exit, "message": f.message}));
    ExitCode::from(f.exit)
}

fn dispatch(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::Calibrate { config, subject_seed, out, log } => calibrate(config.as_deref(), subject_seed, &out, log.as_deref()),
        Cmd::Run { model, policy, secs, seed, log, config } => run(&model, policy, secs, seed, &log, config.as_deref()),
        Cmd::Replay { log, features, report, model } => replay(&log, features, report, model.as_deref()),
        Cmd::Serve { model, port, host, config } => serve(&model, &host, port, config.as_deref()),
        Cmd::Bench { model, iters, seed, config } => bench(&model, iters, seed, config.as_deref()),
        Cmd::Gen { load, secs, seed, out, config } => gen(load, secs, seed, &out, config.as_deref()),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    match path {
        Some(p) => Config::load(p).map_err(|e| Failure::config(format!("{}: {e}", p.display()))),
        None => Ok(Config::default()),
    }
}

fn load_model(path: &Path, cfg: &Config) -> Result<(ModelFile, Vec<u8>), Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::model(format!("{}: {e}", path.display())))?;
    let m = ModelFile::from_bytes(&bytes, cfg.model.dropout).map_err(|e| Failure::model(format!("{}: {e}", path.display())))?;
    Ok((m, bytes))
}

fn write_log(path: &Path, records: &[Record]) -> Outcome {
    let f = File::create(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    session_log::write_jsonl(BufWriter::new(f), records).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn calibrate(config: Option<&Path>, subject_seed: u64, out: &Path, log: Option<&Path>) -> Outcome {
    let cfg = load_config(config)?;
    let profile = SubjectProfile { seed: subject_seed, ..cfg.sim.profile };
    let (model, report) = calibration::calibrate(&profile, &cfg.calibration, &cfg.sim_setup(), &cfg.model, cfg.engine.fallback_thresholds, subject_seed).map_err(|e| match e {
        CalibrationError::Invalid(_) => Failure::config(e),
        other => Failure::runtime(other),
    })?;
    let bytes = model.to_bytes();
    std::fs::write(out, &bytes).map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))?;
    if let Some(log_path) = log {
        let sid = session_log::session_id(&["calibrate", &subject_seed.to_string()]);
        let t_end = cfg.calibration.protocol_secs();
        let mut records = vec![Record::Meta(MetaRecord {
            t: 0.0,
            session_id: sid.clone(),
            clock: ClockKind::Virtual,
            kind: "calibrate".into(),
            policy: None,
            seed: subject_seed,
            secs: Some(t_end),
            model: Some(out.display().to_string()),
            model_sha256: Some(session_log::sha256_hex(&bytes)),
            stream: cfg.stream,
            features: cfg.features,
            engine: cfg.engine,
            params: json!({"profile": profile, "plan": cfg.calibration, "model": cfg.model}),
        })];
        records.extend(report.history.iter().map(|s| Record::TrainEpoch(TrainEpochRecord { t: t_end, session_id: sid.clone(), stats: s.clone() })));
        records.push(Record::CalibrationReport(CalibrationReportRecord { t: t_end, session_id: sid, report: report.clone() }));
        write_log(log_path, &records)?;
    }
    println!(
        "{}",
        json!({
            "t_low": model.thresholds.t_low,
            "t_high": model.thresholds.t_high,
            "calibration_weak": report.calibration_weak,
            "median_oneback": report.median_oneback,
            "median_threeback": report.median_threeback,
            "val_acc": report.val_acc,
            "epochs": report.history.len(),
            "model": out.display().to_string(),
        })
    );
    Ok(())
}

fn run(model_path: &Path, policy: Policy, secs: f64, seed: u64, log: &Path, config: Option<&Path>) -> Outcome {
    let cfg = load_config(config)?;
    let (model, bytes) = load_model(model_path, &cfg)?;
    if !(secs >= 0.0 && secs.is_finite()) {
        return Err(Failure::usage("--secs must be a non-negative number"));
    }
    let spec = ScenarioSpec {
        policy,
        secs,
        seed,
        stream: cfg.stream,
        features: cfg.features,
        engine: cfg.engine,
        sim: cfg.sim,
        model_label: Some(model_path.display().to_string()),
        model_sha256: Some(session_log::sha256_hex(&bytes)),
    };
    let result = scenario::run_scenario(&spec, &model).map_err(Failure::runtime)?;
    write_log(log, &result.records)?;
    println!(
        "{}",
        json!({
            "decisions": result.decisions,
            "interventions": result.interventions,
            "in_band_fraction": result.in_band_fraction,
            "mean_load": result.mean_load,
            "log": log.display().to_string(),
        })
    );
    Ok(())
}

fn replay(log: &Path, print_decisions: bool, report: bool, model_override: Option<&Path>) -> Outcome {
    let f = File::open(log).map_err(|e| Failure::runtime(format!("{}: {e}", log.display())))?;
    let records = session_log::read_jsonl(BufReader::new(f)).map_err(|e| Failure::runtime(format!("{}: {e}", log.display())))?;
    let meta = records.iter().find_map(|r| if let Record::Meta(m) = r { Some(m) } else { None }).ok_or_else(|| Failure::runtime("log has no meta record"))?;
    let model_path = match (model_override, &meta.model) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(Failure::usage("log does not name a model; pass --model")),
    };
    let dropout = meta.params.get("model").and_then(|m| m.get("dropout")).and_then(|d| d.as_f64()).unwrap_or(lstm::TrainConfig::default().dropout);
    let bytes = std::fs::read(&model_path).map_err(|e| Failure::model(format!("{}: {e}", model_path.display())))?;
    let model = ModelFile::from_bytes(&bytes, dropout).map_err(|e| Failure::model(format!("{}: {e}", model_path.display())))?;
    let rep = session_log::replay(&records, &model, Some(&bytes)).map_err(|e| match e {
        session_log::LogError::ModelMismatch { .. } => Failure::model(e),
        other => Failure::runtime(other),
    })?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if print_decisions {
        for d in &rep.replayed {
            writeln!(out, "{}", serde_json::to_string(d).expect("decision serializes")).map_err(Failure::runtime)?;
        }
    }
    if report {
        writeln!(out, "{}", serde_json::to_string(&rep).expect("report serializes")).map_err(Failure::runtime)?;
    } else {
        writeln!(out, "{} decisions, {} events, {} mismatches", rep.decisions, rep.events, rep.mismatches).map_err(Failure::runtime)?;
    }
    if rep.mismatches > 0 {
        return Err(Failure::runtime(format!("{} decision mismatches", rep.mismatches)));
    }
    Ok(())
}

fn serve(model_path: &Path, host: &str, port: u16, config: Option<&Path>) -> Outcome {
    let cfg = load_config(config)?;
    let (model, _) = load_model(model_path, &cfg)?;
    let listener = TcpListener::bind((host, port)).map_err(|e| Failure::runtime(format!("bind {host}:{port}: {e}")))?;
    let addr = listener.local_addr().map_err(Failure::runtime)?;
    println!("{}", json!({"listening": addr.to_string()}));
    std::io::stdout().flush().ok();
    server::serve(listener, ServerSettings { model, stream: cfg.stream, features: cfg.features, engine: cfg.engine }).map_err(Failure::runtime)
}

fn bench(model_path: &Path, iters: usize, seed: u64, config: Option<&Path>) -> Outcome {
    let cfg = load_config(config)?;
    let (model, _) = load_model(model_path, &cfg)?;
    if iters == 0 {
        return Err(Failure::usage("--iters must be > 0"));
    }
    let rep = tools::bench(&model, cfg.stream, cfg.features, cfg.engine, iters, seed).map_err(Failure::runtime)?;
    println!("{}", serde_json::to_string(&rep).expect("report serializes"));
    Ok(())
}

fn gen(load: f64, secs: f64, seed: u64, out: &Path, config: Option<&Path>) -> Outcome {
    let cfg = load_config(config)?;
    if !(0.0..=1.0).contains(&load) {
        return Err(Failure::usage("--load must be in [0, 1]"));
    }
    if !(secs >= 0.0 && secs.is_finite()) {
        return Err(Failure::usage("--secs must be a non-negative number"));
    }
    let profile = SubjectProfile { seed, ..cfg.sim.profile };
    let mut g = EegGenerator::new(profile, cfg.sim.couplings, cfg.stream.sample_rate, seed);
    let n = (secs * cfg.stream.sample_rate).round() as usize;
    let samples: Vec<_> = (0..n).map(|_| g.next_sample(load)).collect();
    let f = File::create(out).map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))?;
    tools::write_eeg_csv(BufWriter::new(f), &samples).map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))?;
    println!("{}", json!({"samples": n, "out": out.display().to_string()}));
    Ok(())
}
