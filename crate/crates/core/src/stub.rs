//! Built-in protocol workers for the `sum`, `queue` and `sort` abstractions.
//!
//! They back the in-process `stub` launcher and the `obs-stub-worker`
//! binary, and come in behavioral variants so that clustering, oracles and
//! failure handling can be exercised without an external corpus.
//!
//! A stub is selected by a spec string `<abstraction>:<variant>[:<option>...]`:
//!
//! | variant     | behavior                                                       |
//! |-------------|----------------------------------------------------------------|
//! | `correct`   | reference semantics                                            |
//! | `duplicate` | same as `correct`                                              |
//! | `buggy`     | sum adds one, queue is LIFO, sort is descending                |
//! | `slow`      | correct, but sleeps 50 ms per invoke                           |
//! | `crash`     | exits without replying on the first invoke                     |
//! | `nondet`    | sum adds a random 0 or 1, queue/sort results are randomly perturbed |
//!
//! Options: `delay_ms=N`, `fail_at=N` (error reply to the N-th create/invoke),
//! `crash_at=N`, `hang_at=N`, `garbage_at=N`, `bad_id_at=N`, `no_greeting`,
//! `state` (attach post-state to replies).

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufRead, Write};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value as Json};

use crate::arena::protocol::{Action, Request, Response, Status, WireMetrics, PROTOCOL_VERSION};
use crate::arena::transport::{LineWorker, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StubAbstraction {
    Sum,
    Queue,
    Sort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Correct,
    Duplicate,
    Buggy,
    Slow,
    Crash,
    Nondet,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StubOptions {
    pub delay_ms: u64,
    pub fail_at: Option<u64>,
    pub crash_at: Option<u64>,
    pub hang_at: Option<u64>,
    pub garbage_at: Option<u64>,
    pub bad_id_at: Option<u64>,
    pub no_greeting: bool,
    pub report_state: bool,
}

pub const SLOW_DELAY_MS: u64 = 50;
const HANG: Duration = Duration::from_secs(3600);

pub struct StubWorker {
    abstraction: StubAbstraction,
    variant: Variant,
    options: StubOptions,
    queues: BTreeMap<String, VecDeque<Json>>,
    handles: u64,
    /// Counts create/invoke requests, 1-based.
    calls: u64,
    rng: ChaCha8Rng,
}

impl StubWorker {
    pub fn from_spec(spec: &str) -> Result<Self, String> {
        let mut parts = spec.split(':');
        let abstraction = match parts.next().unwrap_or_default() {
            "sum" => StubAbstraction::Sum,
            "queue" => StubAbstraction::Queue,
            "sort" => StubAbstraction::Sort,
            other => return Err(format!("unknown stub abstraction `{other}`")),
        };
        let variant = match parts.next().unwrap_or("correct") {
            "correct" => Variant::Correct,
            "duplicate" => Variant::Duplicate,
            "buggy" => Variant::Buggy,
            "slow" => Variant::Slow,
            "crash" => Variant::Crash,
            "nondet" => Variant::Nondet,
            other => return Err(format!("unknown stub variant `{other}`")),
        };
        let mut options = StubOptions::default();
        if variant == Variant::Slow {
            options.delay_ms = SLOW_DELAY_MS;
        }
        for option in parts {
            let (key, value) = option.split_once('=').unwrap_or((option, ""));
            let number = || value.parse::<u64>().map_err(|_| format!("option `{option}` needs a number"));
            match key {
                "delay_ms" => options.delay_ms = number()?,
                "fail_at" => options.fail_at = Some(number()?),
                "crash_at" => options.crash_at = Some(number()?),
                "hang_at" => options.hang_at = Some(number()?),
                "garbage_at" => options.garbage_at = Some(number()?),
                "bad_id_at" => options.bad_id_at = Some(number()?),
                "no_greeting" => options.no_greeting = true,
                "state" => options.report_state = true,
                _ => return Err(format!("unknown stub option `{option}`")),
            }
        }
        let seed = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        Ok(StubWorker {
            abstraction,
            variant,
            options,
            queues: BTreeMap::new(),
            handles: 0,
            calls: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (std::process::id() as u64).rotate_left(32)),
        })
    }

    fn abstraction_name(&self) -> &'static str {
        match self.abstraction {
            StubAbstraction::Sum => "sum",
            StubAbstraction::Queue => "queue",
            StubAbstraction::Sort => "sort",
        }
    }

    fn create(&mut self, request: &Request) -> Response {
        let requested = request.operation.as_deref().unwrap_or_default();
        if !requested.eq_ignore_ascii_case(self.abstraction_name()) {
            return Response::error(Some(request.id), "unknown_abstraction", format!("cannot create `{requested}`"));
        }
        self.handles += 1;
        let handle = format!("h{}", self.handles);
        self.queues.insert(handle.clone(), VecDeque::new());
        Response {
            handle: Some(handle),
            ..Response::ok(Some(request.id))
        }
    }

    fn invoke(&mut self, request: &Request) -> Response {
        let id = Some(request.id);
        let op = request.operation.as_deref().unwrap_or_default();
        let result = match self.abstraction {
            StubAbstraction::Sum => self.sum(op, &request.args),
            StubAbstraction::Sort => self.sort(op, &request.args),
            StubAbstraction::Queue => self.queue(op, request.target.as_deref(), &request.args),
        };
        match result {
            Ok(value) => Response {
                value: Some(value),
                ..Response::ok(id)
            },
            Err((kind, message)) => Response::error(id, kind, message),
        }
    }

    fn sum(&mut self, op: &str, args: &[Json]) -> Result<Json, (&'static str, String)> {
        if op != "sum" {
            return Err(("unknown_operation", format!("no operation `{op}`")));
        }
        let [a, b] = args else {
            return Err(("arity", format!("sum takes 2 arguments, got {}", args.len())));
        };
        let bias = match self.variant {
            Variant::Buggy => 1,
            Variant::Nondet => self.rng.random_range(0..=1),
            _ => 0,
        };
        match (a.as_i64(), b.as_i64()) {
            (Some(a), Some(b)) => a
                .checked_add(b)
                .and_then(|s| s.checked_add(bias))
                .map(Json::from)
                .ok_or(("overflow", "integer overflow".to_string())),
            _ => match (a.as_f64(), b.as_f64()) {
                (Some(a), Some(b)) => Ok(json!(a + b + bias as f64)),
                _ => Err(("type", "sum takes numbers".to_string())),
            },
        }
    }

    fn sort(&mut self, op: &str, args: &[Json]) -> Result<Json, (&'static str, String)> {
        if op != "sort" {
            return Err(("unknown_operation", format!("no operation `{op}`")));
        }
        let [Json::Array(items)] = args else {
            return Err(("type", "sort takes one array".to_string()));
        };
        let mut items = items.clone();
        if items.iter().all(Json::is_number) {
            items.sort_by(|a, b| a.as_f64().unwrap_or(0.0).total_cmp(&b.as_f64().unwrap_or(0.0)));
        } else if items.iter().all(Json::is_string) {
            items.sort_by(|a, b| a.as_str().cmp(&b.as_str()));
        } else {
            return Err(("type", "sort takes numbers or strings".to_string()));
        }
        let reverse = match self.variant {
            Variant::Buggy => true,
            Variant::Nondet => self.rng.random_bool(0.5),
            _ => false,
        };
        if reverse {
            items.reverse();
        }
        Ok(Json::Array(items))
    }

    fn queue(&mut self, op: &str, target: Option<&str>, args: &[Json]) -> Result<Json, (&'static str, String)> {
        let lifo = self.variant == Variant::Buggy;
        let jitter = self.variant == Variant::Nondet && self.rng.random_bool(0.5);
        let handle = target.ok_or(("bad_handle", "queue operations need a target".to_string()))?;
        let queue = self
            .queues
            .get_mut(handle)
            .ok_or(("bad_handle", format!("unknown handle `{handle}`")))?;
        match (op, args) {
            ("enqueue", [item]) => {
                queue.push_back(item.clone());
                Ok(Json::Null)
            }
            ("dequeue", []) => {
                let item = if lifo { queue.pop_back() } else { queue.pop_front() };
                item.ok_or(("empty", "dequeue on empty queue".to_string()))
            }
            ("peek", []) => {
                let item = if lifo { queue.back() } else { queue.front() };
                item.cloned().ok_or(("empty", "peek on empty queue".to_string()))
            }
            ("size", []) => Ok(json!(queue.len() + usize::from(jitter))),
            ("enqueue" | "dequeue" | "peek" | "size", _) => {
                Err(("arity", format!("wrong number of arguments for `{op}`")))
            }
            _ => Err(("unknown_operation", format!("no operation `{op}`"))),
        }
    }

    fn state_of(&self, target: Option<&str>) -> Option<Json> {
        let queue = self.queues.get(target?)?;
        Some(Json::Array(queue.iter().cloned().collect()))
    }

    fn respond(&mut self, request: &Request) -> Option<Response> {
        let started = Instant::now();
        let mut response = match request.action {
            Action::Create | Action::Invoke => {
                self.calls += 1;
                let call = Some(self.calls);
                if self.options.hang_at == call {
                    thread::sleep(HANG);
                }
                if self.options.crash_at == call
                    || (self.variant == Variant::Crash && request.action == Action::Invoke)
                {
                    return None;
                }
                if request.action == Action::Invoke && self.options.delay_ms > 0 {
                    thread::sleep(Duration::from_millis(self.options.delay_ms));
                }
                let mut response = if self.options.fail_at == call {
                    Response::error(Some(request.id), "injected", format!("injected failure at call {}", self.calls))
                } else if request.action == Action::Create {
                    self.create(request)
                } else {
                    self.invoke(request)
                };
                if self.options.report_state && response.status == Status::Ok {
                    let target = response.handle.clone().or_else(|| request.target.clone());
                    response.state = self.state_of(target.as_deref());
                }
                response
            }
            Action::Inspect => match self.state_of(request.target.as_deref()) {
                Some(state) => Response {
                    state: Some(state),
                    ..Response::ok(Some(request.id))
                },
                None => Response::error(Some(request.id), "bad_handle", "nothing to inspect"),
            },
            Action::Shutdown => Response::ok(Some(request.id)),
        };
        let mem = self.queues.values().map(|q| q.len() as u64 * 16).sum::<u64>() + 64;
        response.metrics = Some(WireMetrics {
            wall_ns: Some(started.elapsed().as_nanos() as u64),
            mem_bytes: Some(mem),
            trace: Some(format!("{}:{}", self.abstraction_name(), request.operation.as_deref().unwrap_or("-"))),
        });
        Some(response)
    }
}

impl LineWorker for StubWorker {
    fn greeting(&mut self) -> Option<String> {
        (!self.options.no_greeting).then(|| json!({ "proto": PROTOCOL_VERSION }).to_string())
    }

    fn handle(&mut self, line: &str) -> Step {
        let value: Json = match serde_json::from_str(line) {
            Ok(value) => value,
            Err(e) => return reply(Response::error(None, "protocol", format!("malformed request: {e}")), false),
        };
        let id = value.get("id").and_then(Json::as_u64);
        let request: Request = match serde_json::from_value(value) {
            Ok(request) => request,
            Err(e) => return reply(Response::error(id, "protocol", format!("invalid request: {e}")), false),
        };
        let next_call = self.calls + 1;
        let counts = matches!(request.action, Action::Create | Action::Invoke);
        if counts && self.options.garbage_at == Some(next_call) {
            self.calls += 1;
            return Step {
                reply: Some("<<not json>>".into()),
                exit: false,
            };
        }
        let bad_id = counts && self.options.bad_id_at == Some(next_call);
        match self.respond(&request) {
            Some(mut response) => {
                if bad_id {
                    response.id = Some(request.id + 1000);
                }
                reply(response, request.action == Action::Shutdown)
            }
            None => Step { reply: None, exit: true },
        }
    }
}

fn reply(response: Response, exit: bool) -> Step {
    Step {
        reply: Some(serde_json::to_string(&response).expect("responses serialize")),
        exit,
    }
}

/// Serves one stub over stdin/stdout until shutdown or EOF.
pub fn serve_stdio(mut worker: StubWorker) -> io::Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if let Some(greeting) = worker.greeting() {
        writeln!(out, "{greeting}")?;
        out.flush()?;
    }
    for line in io::stdin().lock().lines() {
        let step = worker.handle(&line?);
        if let Some(reply) = step.reply {
            writeln!(out, "{reply}")?;
            out.flush()?;
        }
        if step.exit {
            break;
        }
    }
    Ok(())
}
