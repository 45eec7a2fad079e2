//! Reference worker speaking the line protocol on stdin/stdout.
//!
//! Usage: `obs-stub-worker <abstraction>:<variant>[:options]`, for example
//! `obs-stub-worker queue:correct` or `obs-stub-worker sum:crash:crash_at=3`.

use std::process::ExitCode;

use obs_core::stub::{serve_stdio, StubWorker};

fn main() -> ExitCode {
    let Some(spec) = std::env::args().nth(1) else {
        eprintln!("usage: obs-stub-worker <abstraction>:<variant>[:options]");
        return ExitCode::from(2);
    };
    let worker = match StubWorker::from_spec(&spec) {
        Ok(worker) => worker,
        Err(e) => {
            eprintln!("obs-stub-worker: {e}");
            return ExitCode::from(2);
        }
    };
    match serve_stdio(worker) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("obs-stub-worker: {e}");
            ExitCode::FAILURE
        }
    }
}
