//! Black-box simulators: built-in synthetic targets and an adapter for
//! external executables speaking line-delimited JSON.
//!
//! Wire protocol, one request per process: the parent writes
//! `{"id": "...", "theta": [...], "seed": N}` and a newline to the child's
//! stdin and closes it; the child answers on stdout with
//! `{"id": "...", "y": [...]}` or `{"id": "...", "error": "..."}` and exits 0.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::BoxDomain;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulatorError {
    #[error("parameter vector outside the simulator box: {0:?}")]
    OutOfBounds(Vec<f64>),
    #[error("failed to start simulator: {0}")]
    Spawn(String),
    #[error("simulator timed out after {0:.3} s")]
    Timeout(f64),
    #[error("simulator exited with {status}; stderr: {stderr}")]
    Exit { status: String, stderr: String },
    #[error("malformed simulator reply: {0}")]
    Protocol(String),
    #[error("simulator reported an error: {0}")]
    Reported(String),
    #[error("unknown built-in simulator {0:?}")]
    Unknown(String),
}

/// Anything that maps a parameter vector to an output series.
pub trait Simulator: Send + Sync {
    fn name(&self) -> &str;
    fn domain(&self) -> &BoxDomain;

    /// Evaluate without the bounds check.
    fn run(&self, theta: &[f64], seed: u64, id: &str) -> Result<Vec<f64>, SimulatorError>;

    /// Evaluate, rejecting points outside [`Simulator::domain`] before the call.
    fn simulate(&self, theta: &[f64], seed: u64, id: &str) -> Result<Vec<f64>, SimulatorError> {
        if !self.domain().contains(theta) {
            return Err(SimulatorError::OutOfBounds(theta.to_vec()));
        }
        self.run(theta, seed, id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Builtin {
    /// `y = [θ]` on `[-10, 10]`, observed `[2.5]`.
    Quad1,
    /// `y = [θ1, 2θ2]` on `[-10, 10]²`, observed `[3, -4]`.
    Quad2,
    /// `y = [exp(0.7 wᵀθ)]` on `[-1, 1]⁹`, observed `[1]`.
    LinearActive,
    /// 288-bin daily profile on `[-10, 10]⁹`; see [`synth9`].
    Synth9,
}

impl FromStr for Builtin {
    type Err = SimulatorError;
    fn from_str(s: &str) -> Result<Self, SimulatorError> {
        match s {
            "quad1" => Ok(Builtin::Quad1),
            "quad2" => Ok(Builtin::Quad2),
            "linear_active" => Ok(Builtin::LinearActive),
            "synth9" => Ok(Builtin::Synth9),
            _ => Err(SimulatorError::Unknown(s.to_string())),
        }
    }
}

/// Direction of [`Builtin::LinearActive`] before normalization.
pub const LINEAR_ACTIVE_RAW: [f64; 9] = [0.1, 0.4, -0.3, 0.5, 0.2, -0.45, 0.35, 0.25, -0.25];

/// Reference parameters of [`Builtin::Synth9`]; its stored observation is
/// the simulator output here, so the loss vanishes at this point.
pub const SYNTH9_TRUE: [f64; 9] = [3.0, 0.0, -4.0, 2.0, 5.0, -6.0, 4.0, 7.0, -5.0];

pub const SYNTH9_BINS: usize = 288;

pub fn linear_active_direction() -> [f64; 9] {
    let n = LINEAR_ACTIVE_RAW.iter().map(|a| a * a).sum::<f64>().sqrt();
    LINEAR_ACTIVE_RAW.map(|a| a / n)
}

/// Synthetic stand-in for a traffic simulator: a 288-bin (5-minute) daily
/// travel-time profile with scaled inputs `u = θ / 10`:
///
/// * baseline `10 + 0.2 u7 + 0.1 u9`,
/// * morning peak, height `5 + 3 tanh(0.8 u1 + 0.6 u3 − 0.5 u4)`, at `0.33`, width `0.05`,
/// * evening peak, height `6 + 3 tanh(0.7 u6 − 0.6 u5 + 0.4 u2)`, at
///   `0.71 + 0.03 u2 u8`, width `0.06`,
/// * midday bump `(1 + 0.2 u9) exp(−((s − 0.5)/0.12)²)`,
///
/// where `s ∈ [0, 1)` is the time of day. `θ8` acts only through `u2 u8`,
/// so with `θ2` at its reference value of 0 it has no effect at all.
pub fn synth9(theta: &[f64]) -> Vec<f64> {
    let u: Vec<f64> = theta.iter().map(|t| t / 10.0).collect();
    let base = 10.0 + 0.2 * u[6] + 0.1 * u[8];
    let a1 = 5.0 + 3.0 * (0.8 * u[0] + 0.6 * u[2] - 0.5 * u[3]).tanh();
    let a2 = 6.0 + 3.0 * (0.7 * u[5] - 0.6 * u[4] + 0.4 * u[1]).tanh();
    let c2 = 0.71 + 0.03 * u[1] * u[7];
    let bump = 1.0 + 0.2 * u[8];
    (0..SYNTH9_BINS)
        .map(|i| {
            let s = (i as f64 + 0.5) / SYNTH9_BINS as f64;
            base + a1 * (-((s - 0.33) / 0.05).powi(2)).exp()
                + a2 * (-((s - c2) / 0.06).powi(2)).exp()
                + bump * (-((s - 0.5) / 0.12).powi(2)).exp()
        })
        .collect()
}

impl Builtin {
    pub fn name(&self) -> &'static str {
        match self {
            Builtin::Quad1 => "quad1",
            Builtin::Quad2 => "quad2",
            Builtin::LinearActive => "linear_active",
            Builtin::Synth9 => "synth9",
        }
    }

    pub fn domain(&self) -> BoxDomain {
        let (d, lo, hi) = match self {
            Builtin::Quad1 => (1, -10.0, 10.0),
            Builtin::Quad2 => (2, -10.0, 10.0),
            Builtin::LinearActive => (9, -1.0, 1.0),
            Builtin::Synth9 => (9, -10.0, 10.0),
        };
        BoxDomain::uniform(d, lo, hi).expect("static bounds")
    }

    /// Stored observation the calibration loss is measured against.
    pub fn observed(&self) -> Vec<f64> {
        match self {
            Builtin::Quad1 => vec![2.5],
            Builtin::Quad2 => vec![3.0, -4.0],
            Builtin::LinearActive => vec![1.0],
            Builtin::Synth9 => synth9(&SYNTH9_TRUE),
        }
    }

    /// Parameters at which the loss is zero.
    pub fn optimum(&self) -> Vec<f64> {
        match self {
            Builtin::Quad1 => vec![2.5],
            Builtin::Quad2 => vec![3.0, -2.0],
            Builtin::LinearActive => vec![0.0; 9],
            Builtin::Synth9 => SYNTH9_TRUE.to_vec(),
        }
    }

    /// Deterministic output; the seed is accepted for interface uniformity.
    pub fn eval(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            Builtin::Quad1 => vec![theta[0]],
            Builtin::Quad2 => vec![theta[0], 2.0 * theta[1]],
            Builtin::LinearActive => {
                let w = linear_active_direction();
                vec![(0.7 * theta.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).exp()]
            }
            Builtin::Synth9 => synth9(theta),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BuiltinSimulator {
    kind: Builtin,
    domain: BoxDomain,
}

impl BuiltinSimulator {
    pub fn new(kind: Builtin) -> Self {
        BuiltinSimulator { kind, domain: kind.domain() }
    }

    pub fn kind(&self) -> Builtin {
        self.kind
    }
}

impl Simulator for BuiltinSimulator {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    fn run(&self, theta: &[f64], _seed: u64, _id: &str) -> Result<Vec<f64>, SimulatorError> {
        Ok(self.kind.eval(theta))
    }
}

#[derive(Serialize, Deserialize)]
pub struct Request {
    pub id: String,
    pub theta: Vec<f64>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
pub struct Reply {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A separate executable launched once per evaluation.
#[derive(Clone, Debug)]
pub struct ExternalSimulator {
    program: String,
    args: Vec<String>,
    timeout: Duration,
    domain: BoxDomain,
    name: String,
}

const POLL: Duration = Duration::from_millis(2);

impl ExternalSimulator {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout: Duration, domain: BoxDomain) -> Self {
        let program = program.into();
        ExternalSimulator { name: program.clone(), program, args, timeout, domain }
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }
}

impl Simulator for ExternalSimulator {
    fn name(&self) -> &str {
        &self.name
    }

    fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    fn run(&self, theta: &[f64], seed: u64, id: &str) -> Result<Vec<f64>, SimulatorError> {
        let request = serde_json::to_string(&Request { id: id.to_string(), theta: theta.to_vec(), seed })
            .map_err(|e| SimulatorError::Protocol(e.to_string()))?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| SimulatorError::Spawn(format!("{}: {e}", self.program)))?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        // a child that never reads its input must not block us
        let writer = std::thread::spawn(move || {
            let _ = stdin.write_all(request.as_bytes()).and_then(|_| stdin.write_all(b"\n"));
        });
        let out_reader = std::thread::spawn(move || {
            let mut s = Vec::new();
            let _ = stdout.read_to_end(&mut s);
            s
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = Vec::new();
            let _ = stderr.read_to_end(&mut s);
            s
        });

        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if start.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    let _ = writer.join();
                    return Err(SimulatorError::Timeout(self.timeout.as_secs_f64()));
                }
                Ok(None) => std::thread::sleep(POLL),
                Err(e) => return Err(SimulatorError::Spawn(e.to_string())),
            }
        };
        let _ = writer.join();
        let out = out_reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();
        if !status.success() {
            let mut stderr = String::from_utf8_lossy(&err).trim().to_string();
            stderr.truncate(2000);
            return Err(SimulatorError::Exit { status: status.to_string(), stderr });
        }
        parse_reply(&String::from_utf8_lossy(&out), id)
    }
}

/// Interpret the first non-empty stdout line as the reply to request `id`.
pub fn parse_reply(stdout: &str, id: &str) -> Result<Vec<f64>, SimulatorError> {
    let line = stdout
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| SimulatorError::Protocol("empty reply".into()))?;
    let reply: Reply = serde_json::from_str(line)
        .map_err(|e| SimulatorError::Protocol(format!("{e} in {:?}", truncate(line, 200))))?;
    if reply.id != id {
        return Err(SimulatorError::Protocol(format!("reply id {:?} does not match request {id:?}", reply.id)));
    }
    match (reply.y, reply.error) {
        (_, Some(e)) => Err(SimulatorError::Reported(e)),
        (Some(y), None) if !y.is_empty() => Ok(y),
        _ => Err(SimulatorError::Protocol("reply carries neither a non-empty y nor an error".into())),
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Either kind of simulator behind one type.
#[derive(Clone, Debug)]
pub enum SimulatorHandle {
    Builtin(BuiltinSimulator),
    External(ExternalSimulator),
}

impl Simulator for SimulatorHandle {
    fn name(&self) -> &str {
        match self {
            SimulatorHandle::Builtin(s) => s.name(),
            SimulatorHandle::External(s) => s.name(),
        }
    }

    fn domain(&self) -> &BoxDomain {
        match self {
            SimulatorHandle::Builtin(s) => s.domain(),
            SimulatorHandle::External(s) => s.domain(),
        }
    }

    fn run(&self, theta: &[f64], seed: u64, id: &str) -> Result<Vec<f64>, SimulatorError> {
        match self {
            SimulatorHandle::Builtin(s) => s.run(theta, seed, id),
            SimulatorHandle::External(s) => s.run(theta, seed, id),
        }
    }
}
