//! Reference child process for the external simulator protocol.
//!
//! ```text
//! calibrex-sim quad1|quad2|linear_active|synth9   built-in target
//! calibrex-sim echo                               y = theta
//! calibrex-sim crash                              exit 1 after writing to stderr
//! calibrex-sim sleep SECONDS                      sleep, then echo
//! calibrex-sim garbage                            reply that is not JSON
//! calibrex-sim error                              protocol-level error reply
//! calibrex-sim faulty TARGET                      by request id mod 7: 3 crash,
//!                                                 5 hang, 6 garbage, else TARGET
//! ```

use std::io::{BufRead, Write};
use std::process::ExitCode;
use std::time::Duration;

use calibrex::simulators::{Builtin, Reply, Request};

fn usage() -> ExitCode {
    eprintln!("usage: calibrex-sim <quad1|quad2|linear_active|synth9|echo|crash|sleep S|garbage|error|faulty TARGET>");
    ExitCode::from(64)
}

fn reply(r: &Reply) -> ExitCode {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string(r).expect("serializable reply"));
    ExitCode::SUCCESS
}

fn answer(target: &str, req: &Request) -> ExitCode {
    let y = match target {
        "echo" => req.theta.clone(),
        name => match name.parse::<Builtin>() {
            Ok(b) if b.domain().dim() == req.theta.len() => b.eval(&req.theta),
            Ok(b) => {
                return reply(&Reply {
                    id: req.id.clone(),
                    y: None,
                    error: Some(format!("{} expects {} parameters", b.name(), b.domain().dim())),
                })
            }
            Err(_) => return usage(),
        },
    };
    reply(&Reply { id: req.id.clone(), y: Some(y), error: None })
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(mode) = args.first() else { return usage() };

    let mut line = String::new();
    if std::io::stdin().lock().read_line(&mut line).is_err() {
        eprintln!("could not read request");
        return ExitCode::from(1);
    }
    let req: Request = match serde_json::from_str(line.trim()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("bad request: {e}");
            return ExitCode::from(1);
        }
    };

    match mode.as_str() {
        "crash" => {
            eprintln!("simulated crash for request {}", req.id);
            ExitCode::from(1)
        }
        "sleep" => {
            let secs: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(60.0);
            std::thread::sleep(Duration::from_secs_f64(secs));
            answer("echo", &req)
        }
        "garbage" => {
            println!("this is not json {{");
            ExitCode::SUCCESS
        }
        "error" => reply(&Reply { id: req.id.clone(), y: None, error: Some("model did not converge".into()) }),
        "faulty" => {
            let Some(target) = args.get(1) else { return usage() };
            match req.id.parse::<u64>().map(|i| i % 7) {
                Ok(3) => {
                    eprintln!("simulated crash for request {}", req.id);
                    ExitCode::from(1)
                }
                Ok(5) => {
                    std::thread::sleep(Duration::from_secs(60));
                    answer(target, &req)
                }
                Ok(6) => {
                    println!("{{\"id\": \"{}\", \"y\": [1, 2,", req.id);
                    ExitCode::SUCCESS
                }
                _ => answer(target, &req),
            }
        }
        target => answer(target, &req),
    }
}
