//! Live assist sessions over line-delimited JSON. `handle_request` is the
//! whole protocol; the TCP server only moves lines.
//!
//! Field names and order are fixed; see `docs/protocol.md`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EnvKind, ServeSettings, VELOCITY_BELIEF};
use crate::envs::{action_from_name, Environment, GridWorld, PointMass2D, ACTION_NAMES};
use crate::error::{Error, Result};
use crate::isql::TrainArtifact;
use crate::models::{DynamicsModel, LinearDynamics};
use crate::soft::State;
use crate::transfer::transfer_action;
use crate::util::stream_rng;

pub const PROTOCOL: &str = "isql-session/1";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    #[serde(rename = "type")]
    pub kind: String,
    pub session: String,
    #[serde(default)]
    pub action: Option<serde_json::Value>,
    #[serde(default)]
    pub assist: Option<bool>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub protocol: String,
    pub ok: bool,
    #[serde(rename = "type")]
    pub kind: String,
    pub session: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episode: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub done: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_action: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub executed_action: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assist: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl Reply {
    fn new(kind: &str, session: &str) -> Self {
        Self {
            protocol: PROTOCOL.to_string(),
            ok: true,
            kind: kind.to_string(),
            session: session.to_string(),
            state: None,
            step: None,
            episode: None,
            reward: None,
            done: None,
            outcome: None,
            user_action: None,
            executed_action: None,
            scores: None,
            assist: None,
            target: None,
            error: None,
        }
    }

    fn error(kind: &str, session: &str, code: &str, message: impl Into<String>) -> Self {
        Self {
            ok: false,
            error: Some(ErrorBody {
                code: code.to_string(),
                message: message.into(),
            }),
            ..Self::new(kind, session)
        }
    }
}

/// One live session. `step` counts every step of the session and only
/// grows; `episode_step` restarts on reset. A finished episode refuses
/// steps until reset.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub id: String,
    pub env: EnvKind,
    pub state: State,
    pub step: usize,
    pub episode: usize,
    pub episode_step: usize,
    pub assist: bool,
    pub phi_ref: String,
    pub done: bool,
    rng: ChaCha8Rng,
}

pub struct Service {
    pub env_kind: EnvKind,
    env: Box<dyn Environment>,
    phi: DynamicsModel,
    real: DynamicsModel,
    pub phi_ref: String,
    pub task: usize,
    target: Vec<f64>,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionState>>>>,
}

impl Service {
    pub fn new(env_kind: EnvKind, grid: GridWorld, pointmass: PointMass2D, phi: Option<(DynamicsModel, String)>, task: usize) -> Result<Self> {
        let env: Box<dyn Environment> = match env_kind {
            EnvKind::Grid => Box::new(grid),
            EnvKind::Pointmass => Box::new(pointmass),
        };
        if task >= env.task_count() {
            return Err(Error::Config(format!("task {task} out of range")));
        }
        let real = env.real_dynamics();
        let target = match env_kind {
            EnvKind::Pointmass => pointmass.target(task).to_vec(),
            EnvKind::Grid => vec![task as f64],
        };
        let (phi, phi_ref) = match phi {
            Some(p) => p,
            None => match env_kind {
                EnvKind::Pointmass => (
                    DynamicsModel::Linear(LinearDynamics::new(VELOCITY_BELIEF)?),
                    "velocity_belief".to_string(),
                ),
                EnvKind::Grid => (real.clone(), "real".to_string()),
            },
        };
        Ok(Self {
            env_kind,
            env,
            phi,
            real,
            phi_ref,
            task,
            target,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn from_settings(settings: &ServeSettings, grid: GridWorld, pointmass: PointMass2D) -> Result<Self> {
        let phi = match &settings.artifact {
            Some(path) => {
                let a = TrainArtifact::load(path)?;
                Some((a.phi_model()?, format!("artifact:{}", a.config_hash)))
            }
            None => None,
        };
        Self::new(settings.env, grid, pointmass, phi, settings.task)
    }

    pub fn session(&self, id: &str) -> Option<SessionState> {
        let sessions = self.sessions.lock().expect("session table");
        sessions.get(id).map(|s| s.lock().expect("session").clone())
    }

    fn state_vec(s: &State) -> Vec<f64> {
        match s {
            State::Discrete(i) => vec![*i as f64],
            State::Continuous(v) => v.to_vec(),
        }
    }

    fn lookup(&self, id: &str) -> Option<Arc<Mutex<SessionState>>> {
        self.sessions.lock().expect("session table").get(id).cloned()
    }

    /// Parses one request line and returns one reply line (without the
    /// trailing newline). Never panics on input.
    pub fn handle_line(&self, line: &str) -> String {
        let reply = match serde_json::from_str::<Request>(line) {
            Ok(req) => self.handle(&req),
            Err(e) => Reply::error("error", "", "malformed", e.to_string()),
        };
        serde_json::to_string(&reply).expect("replies serialize")
    }

    pub fn handle(&self, req: &Request) -> Reply {
        let id = req.session.as_str();
        match req.kind.as_str() {
            "start" => {
                let seed = req.seed.unwrap_or(0);
                let mut rng = stream_rng(seed, &[0x5e55]);
                let state = self.env.reset(self.task, &mut rng);
                let session = SessionState {
                    id: id.to_string(),
                    env: self.env_kind,
                    state,
                    step: 0,
                    episode: 0,
                    episode_step: 0,
                    assist: req.assist.unwrap_or(false),
                    phi_ref: self.phi_ref.clone(),
                    done: false,
                    rng,
                };
                let mut sessions = self.sessions.lock().expect("session table");
                if sessions.contains_key(id) {
                    return Reply::error("start", id, "duplicate_session", format!("session '{id}' already exists"));
                }
                let reply = self.snapshot("start", &session);
                sessions.insert(id.to_string(), Arc::new(Mutex::new(session)));
                reply
            }
            "step" | "reset" | "stop" => {
                let Some(cell) = self.lookup(id) else {
                    return Reply::error(&req.kind, id, "unknown_session", format!("no session '{id}'"));
                };
                let mut s = cell.lock().expect("session");
                if let Some(a) = req.assist {
                    s.assist = a;
                }
                match req.kind.as_str() {
                    "step" => self.step(req, &mut s),
                    "reset" => {
                        s.state = self.env.reset(self.task, &mut s.rng);
                        s.episode += 1;
                        s.episode_step = 0;
                        s.done = false;
                        self.snapshot("reset", &s)
                    }
                    _ => {
                        let reply = self.snapshot("stop", &s);
                        drop(s);
                        self.sessions.lock().expect("session table").remove(id);
                        reply
                    }
                }
            }
            other => Reply::error(other, id, "malformed", format!("unknown request type '{other}'")),
        }
    }

    fn snapshot(&self, kind: &str, s: &SessionState) -> Reply {
        Reply {
            state: Some(Self::state_vec(&s.state)),
            step: Some(s.step),
            episode: Some(s.episode),
            done: Some(s.done),
            assist: Some(s.assist),
            target: Some(self.target.clone()),
            ..Reply::new(kind, &s.id)
        }
    }

    fn step(&self, req: &Request, s: &mut SessionState) -> Reply {
        if s.done {
            return Reply::error("step", &s.id, "terminated", "episode is over; send reset");
        }
        let a_h = match parse_action(req.action.as_ref()) {
            Ok(a) => a,
            Err(m) => return Reply::error("step", &s.id, "bad_action", m),
        };
        let (executed, scores) = if s.assist {
            match transfer_action(&self.phi, &self.real, &s.state, a_h) {
                Ok(d) => (d.executed_action, Some(d.scores)),
                Err(e) => return Reply::error("step", &s.id, "internal", e.to_string()),
            }
        } else {
            (a_h, None)
        };
        let result = self.env.step(self.task, &s.state, executed, s.episode_step);
        s.state = result.next;
        s.step += 1;
        s.episode_step += 1;
        s.done = result.done;
        Reply {
            reward: Some(result.reward),
            outcome: Some(result.outcome.as_str().to_string()),
            user_action: Some(ACTION_NAMES[a_h].to_string()),
            executed_action: Some(ACTION_NAMES[executed].to_string()),
            scores,
            ..self.snapshot("step", s)
        }
    }
}

fn parse_action(v: Option<&serde_json::Value>) -> std::result::Result<usize, String> {
    match v {
        Some(serde_json::Value::String(name)) => action_from_name(name).ok_or_else(|| format!("unknown action '{name}'")),
        Some(serde_json::Value::Number(n)) => n
            .as_u64()
            .map(|i| i as usize)
            .filter(|i| *i < ACTION_NAMES.len())
            .ok_or_else(|| format!("action index {n} out of range")),
        Some(other) => Err(format!("action must be a name or index, got {other}")),
        None => Err("step needs an action".to_string()),
    }
}

fn serve_connection(service: &Service, stream: TcpStream) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = service.handle_line(&line);
        writer.write_all(reply.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections until the listener fails; one thread per
/// connection, requests on a connection answered in order.
pub fn serve(service: Arc<Service>, listener: TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let service = Arc::clone(&service);
        std::thread::spawn(move || {
            let _ = serve_connection(&service, stream);
        });
    }
    Ok(())
}
