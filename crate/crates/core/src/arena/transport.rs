//! Line transports to workers: child processes or in-process threads.

use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::registry::ImplementationRef;
use crate::stub::StubWorker;

pub enum Received {
    Line(String),
    Timeout,
    Closed,
}

pub trait Transport: Send {
    fn send(&mut self, line: &str) -> io::Result<()>;
    fn recv(&mut self, timeout: Duration) -> Received;
    /// Stops the worker. Must be idempotent.
    fn terminate(&mut self);
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("cannot start worker for `{implementation}`: {message}")]
pub struct SpawnError {
    pub implementation: String,
    pub message: String,
}

pub trait WorkerFactory: Send + Sync {
    fn spawn(&self, imp: &ImplementationRef) -> Result<Box<dyn Transport>, SpawnError>;
}

fn recv_line(rx: &Receiver<String>, timeout: Duration) -> Received {
    match rx.recv_timeout(timeout) {
        Ok(line) => Received::Line(line),
        Err(RecvTimeoutError::Timeout) => Received::Timeout,
        Err(RecvTimeoutError::Disconnected) => Received::Closed,
    }
}

/// A worker running as a child process, spoken to over stdin/stdout.
pub struct ProcessTransport {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<String>,
    terminated: bool,
}

const EXIT_GRACE: Duration = Duration::from_millis(250);

impl ProcessTransport {
    pub fn spawn(mut command: Command) -> io::Result<Self> {
        command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        let mut child = command.spawn()?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ProcessTransport {
            child,
            stdin,
            lines,
            terminated: false,
        })
    }
}

impl Transport for ProcessTransport {
    fn send(&mut self, line: &str) -> io::Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "stdin closed"))?;
        stdin.write_all(line.as_bytes())?;
        stdin.write_all(b"\n")?;
        stdin.flush()
    }

    fn recv(&mut self, timeout: Duration) -> Received {
        recv_line(&self.lines, timeout)
    }

    fn terminate(&mut self) {
        if self.terminated {
            return;
        }
        self.terminated = true;
        // Closing stdin lets well-behaved workers exit on EOF.
        drop(self.stdin.take());
        let deadline = Instant::now() + EXIT_GRACE;
        while Instant::now() < deadline {
            match self.child.try_wait() {
                Ok(Some(_)) => return,
                Ok(None) => thread::sleep(Duration::from_millis(5)),
                Err(_) => break,
            }
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for ProcessTransport {
    fn drop(&mut self) {
        self.terminate();
    }
}

/// Something that answers protocol lines in-process.
pub trait LineWorker: Send + 'static {
    /// The first line written, normally `{"proto":1}`; `None` writes nothing.
    fn greeting(&mut self) -> Option<String>;
    fn handle(&mut self, line: &str) -> Step;
}

pub struct Step {
    pub reply: Option<String>,
    pub exit: bool,
}

/// A [`LineWorker`] on its own thread behind channels, so timeouts behave as
/// they do for child processes.
pub struct ThreadTransport {
    requests: Option<Sender<String>>,
    lines: Receiver<String>,
}

impl ThreadTransport {
    pub fn spawn<W: LineWorker>(mut worker: W) -> Self {
        let (req_tx, req_rx) = mpsc::channel::<String>();
        let (line_tx, lines) = mpsc::channel();
        thread::spawn(move || {
            if let Some(greeting) = worker.greeting() {
                if line_tx.send(greeting).is_err() {
                    return;
                }
            }
            for request in req_rx {
                let step = worker.handle(&request);
                if let Some(reply) = step.reply {
                    if line_tx.send(reply).is_err() {
                        return;
                    }
                }
                if step.exit {
                    return;
                }
            }
        });
        ThreadTransport {
            requests: Some(req_tx),
            lines,
        }
    }
}

impl Transport for ThreadTransport {
    fn send(&mut self, line: &str) -> io::Result<()> {
        self.requests
            .as_ref()
            .and_then(|tx| tx.send(line.to_string()).ok())
            .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "worker thread gone"))
    }

    fn recv(&mut self, timeout: Duration) -> Received {
        recv_line(&self.lines, timeout)
    }

    fn terminate(&mut self) {
        // The thread exits once it notices the dropped channel.
        self.requests = None;
    }
}

/// Spawns `launch.program` with `launch.args` as a child process.
#[derive(Debug, Default, Clone, Copy)]
pub struct ProcessFactory;

impl WorkerFactory for ProcessFactory {
    fn spawn(&self, imp: &ImplementationRef) -> Result<Box<dyn Transport>, SpawnError> {
        let mut command = Command::new(&imp.launch.program);
        command.args(&imp.launch.args);
        if let Some(dir) = &imp.launch.cwd {
            command.current_dir(dir);
        }
        ProcessTransport::spawn(command)
            .map(|t| Box::new(t) as Box<dyn Transport>)
            .map_err(|e| SpawnError {
                implementation: imp.id.clone(),
                message: format!("{}: {e}", imp.launch.program),
            })
    }
}

/// Program name that selects the in-process stub workers.
pub const STUB_PROGRAM: &str = "stub";

/// Runs stub workers in-process; `launch.args[0]` is the stub spec
/// (see [`crate::stub`]).
#[derive(Debug, Default, Clone, Copy)]
pub struct StubFactory;

impl WorkerFactory for StubFactory {
    fn spawn(&self, imp: &ImplementationRef) -> Result<Box<dyn Transport>, SpawnError> {
        let spec = imp.launch.args.first().map(String::as_str).unwrap_or_default();
        let worker = StubWorker::from_spec(spec).map_err(|message| SpawnError {
            implementation: imp.id.clone(),
            message,
        })?;
        Ok(Box::new(ThreadTransport::spawn(worker)))
    }
}

/// In-process stubs for `launch.program == "stub"`, child processes otherwise.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemFactory;

impl WorkerFactory for SystemFactory {
    fn spawn(&self, imp: &ImplementationRef) -> Result<Box<dyn Transport>, SpawnError> {
        if imp.launch.program == STUB_PROGRAM {
            StubFactory.spawn(imp)
        } else {
            ProcessFactory.spawn(imp)
        }
    }
}
