//! NDJSON-over-TCP service: one engine session per connection.
//!
//! Client lines:
//! `{"type":"eeg","t":f,"ch":[14 floats]}` and
//! `{"type":"event","t":f,"kind":s,"step":i,"module":i,"error_type":s?,"object_ok":b?,"difficulty":i}`.
//! Server lines: `inference`, `intervention` and `error` messages.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::engine::{Clock, Engine, EngineConfig, EngineError, Intervention, InterventionKind, LoadState};
use crate::features::FeatureConfig;
use crate::lstm::{ModelFile, CLASSES};
use crate::streams::{EegSample, ErrorType, EventKind, PushOutcome, StreamConfig, TaskEvent};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Eeg {
        t: f64,
        ch: Vec<f64>,
    },
    Event {
        t: f64,
        kind: EventKind,
        step: u8,
        module: u8,
        #[serde(default)]
        error_type: Option<ErrorType>,
        #[serde(default)]
        object_ok: Option<bool>,
        difficulty: u8,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Inference {
        t: f64,
        #[serde(rename = "L")]
        l: f64,
        probs: [f64; CLASSES],
        raw_state: LoadState,
        stable_state: LoadState,
    },
    Intervention {
        t: f64,
        kind: InterventionKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<String>,
        reason: String,
    },
    Error {
        code: String,
    },
}

impl ServerMessage {
    fn intervention(t: f64, iv: Intervention) -> Self {
        ServerMessage::Intervention { t, kind: iv.kind, target: iv.target, reason: iv.reason }
    }

    fn error(code: &str) -> Self {
        ServerMessage::Error { code: code.to_string() }
    }
}

/// Per-session settings shared by all connections.
#[derive(Debug, Clone)]
pub struct ServerSettings {
    pub model: ModelFile,
    pub stream: StreamConfig,
    pub features: FeatureConfig,
    pub engine: EngineConfig,
}

/// Protocol state machine for one client, independent of the transport.
pub struct Session {
    engine: Engine,
    anchored: bool,
    protocol_errors: u64,
}

impl Session {
    pub fn new(settings: &ServerSettings) -> Result<Self, EngineError> {
        let engine = Engine::new(settings.model.clone(), settings.stream, settings.features, settings.engine, true, Clock::Wall)?;
        Ok(Self { engine, anchored: false, protocol_errors: 0 })
    }

    pub fn protocol_errors(&self) -> u64 {
        self.protocol_errors
    }

    fn reject(&mut self, code: &str) -> Vec<ServerMessage> {
        self.protocol_errors += 1;
        log::debug!("protocol error: {code}");
        vec![ServerMessage::error(code)]
    }

    /// Handles one input line and returns the messages to send back.
    pub fn handle_line(&mut self, line: &str) -> Vec<ServerMessage> {
        if line.trim().is_empty() {
            return Vec::new();
        }
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(_) => return self.reject("malformed_json"),
        };
        match value.get("type").and_then(|t| t.as_str()) {
            Some("eeg" | "event") => {}
            Some(_) => return self.reject("unknown_type"),
            None => return self.reject("missing_type"),
        }
        let msg: ClientMessage = match serde_json::from_value(value) {
            Ok(m) => m,
            Err(_) => return self.reject("bad_field"),
        };
        match msg {
            ClientMessage::Eeg { t, ch } => self.on_eeg(t, ch),
            ClientMessage::Event { t, kind, step, module, error_type, object_ok, difficulty } => {
                let ev = TaskEvent { t, kind, step_id: step, module_id: module, error_type, object_ok, difficulty };
                self.on_event(ev)
            }
        }
    }

    fn on_eeg(&mut self, t: f64, ch: Vec<f64>) -> Vec<ServerMessage> {
        if !self.anchored {
            self.engine.anchor_ticks(t);
            self.anchored = true;
        }
        if let PushOutcome::Dropped(reason) = self.engine.push_eeg(EegSample { t, channels: ch }) {
            return self.reject(reason.code());
        }
        let mut out = Vec::new();
        let last_row = 1.0 / self.engine.stream().config().sample_rate;
        while self.engine.stream().newest_eeg_t().is_some_and(|n| n >= self.engine.next_tick() - last_row - 1e-9) {
            match self.engine.tick() {
                Ok(tick) => {
                    let d = tick.decision;
                    out.push(ServerMessage::Inference { t: d.t, l: d.l, probs: d.probs, raw_state: d.raw_state, stable_state: d.stable_state });
                    out.extend(d.interventions.into_iter().map(|iv| ServerMessage::intervention(d.t, iv)));
                }
                Err(e) => {
                    log::warn!("tick failed: {e}");
                    out.extend(self.reject("tick_failed"));
                }
            }
        }
        out
    }

    fn on_event(&mut self, ev: TaskEvent) -> Vec<ServerMessage> {
        if let PushOutcome::Dropped(reason) = self.engine.push_event(ev.clone()) {
            return self.reject(reason.code());
        }
        self.engine.on_event(&ev).into_iter().map(|iv| ServerMessage::intervention(ev.t, iv)).collect()
    }
}

pub fn encode(msg: &ServerMessage) -> String {
    serde_json::to_string(msg).expect("server messages always serialize")
}

/// Runs one session until the client disconnects or an I/O error occurs.
pub fn handle_connection(stream: TcpStream, settings: &ServerSettings) -> std::io::Result<u64> {
    let peer = stream.peer_addr().ok();
    let mut session = Session::new(settings).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    let mut writer = std::io::BufWriter::new(stream.try_clone()?);
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        let replies = session.handle_line(&line);
        for m in &replies {
            writeln!(writer, "{}", encode(m))?;
        }
        if !replies.is_empty() {
            writer.flush()?;
        }
    }
    log::info!("session {peer:?} closed, {} protocol errors", session.protocol_errors());
    Ok(session.protocol_errors())
}

/// Accepts connections forever, one thread and one independent session each.
pub fn serve(listener: TcpListener, settings: ServerSettings) -> std::io::Result<()> {
    let settings = std::sync::Arc::new(settings);
    for conn in listener.incoming() {
        let conn = match conn {
            Ok(c) => c,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let settings = settings.clone();
        thread::spawn(move || {
            if let Err(e) = handle_connection(conn, &settings) {
                log::warn!("session ended: {e}");
            }
        });
    }
    Ok(())
}
