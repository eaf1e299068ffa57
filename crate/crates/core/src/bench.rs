//! Login-to-policy-active latency benchmark.
//!
//! For N synthetic clients the harness logs each one in through the event
//! queue, then polls the backend with that client's probe packet until it is
//! permitted. Clients are processed one after another, and the serialized
//! total is the mean latency multiplied by N.
//!
//! Literature reference values (classic firewall, agent-based and agentless
//! identity firewalls) can be emitted alongside the measurements. They are
//! constants, not measurements, and are labelled as such.

use std::fmt::Write as _;
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::compiler::PacketQuery;
use crate::event_ingest::{EventKind, SessionEvent};
use crate::firewall_backend::{write_atomic, BackendError, FirewallBackend};
use crate::meta_policy::{IdentityRule, MetaPolicy, MetaRule, Service};
use crate::net::{Action, Cidr, PacketProto, Port, Proto};
use crate::pipeline::{drive, LoopOptions, Pipeline, PipelineError};

pub const PROBE_DST: Ipv4Addr = Ipv4Addr::new(10, 200, 0, 1);
pub const PROBE_PORT: u16 = 443;

/// Average policy activation times reported for the three architectures,
/// in seconds: classic firewall, agent-based identity firewall, agentless
/// identity firewall.
pub const LITERATURE_AVERAGES: [(&str, f64); 3] = [
    ("classic-firewall", 120.0),
    ("agent-based", 7.0),
    ("agentless", 5.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub timeout: Duration,
    pub poll_interval: Duration,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            timeout: Duration::from_secs(10),
            poll_interval: Duration::from_millis(1),
        }
    }
}

impl From<&crate::config::BenchConfig> for BenchOptions {
    fn from(c: &crate::config::BenchConfig) -> Self {
        BenchOptions {
            timeout: c.timeout,
            poll_interval: c.poll_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchSample {
    pub client_index: usize,
    pub t_event: DateTime<Utc>,
    /// `None` when the client timed out.
    pub t_active: Option<DateTime<Utc>>,
    pub latency: Option<Duration>,
}

impl BenchSample {
    pub fn failed(&self) -> bool {
        self.latency.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchReport {
    pub clients: usize,
    pub samples: Vec<BenchSample>,
    /// Mean over the successful samples.
    pub avg: Duration,
    /// `avg * clients`.
    pub total_serialized: Duration,
    pub failed: usize,
}

impl BenchReport {
    pub fn from_samples(clients: usize, samples: Vec<BenchSample>) -> Self {
        let ok: Vec<Duration> = samples.iter().filter_map(|s| s.latency).collect();
        let failed = samples.len() - ok.len();
        let avg = if ok.is_empty() {
            Duration::ZERO
        } else {
            ok.iter().sum::<Duration>() / ok.len() as u32
        };
        BenchReport {
            clients,
            samples,
            avg,
            total_serialized: avg * clients as u32,
            failed,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.failed == 0 && self.samples.len() == self.clients
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("client count must be at least 1")]
    NoClients,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Address of synthetic client `i`, starting at 10.100.0.1.
pub fn client_ip(i: usize) -> Ipv4Addr {
    Ipv4Addr::from(u32::from(Ipv4Addr::new(10, 100, 0, 1)) + i as u32)
}

pub fn client_user(i: usize) -> String {
    format!("user{i}")
}

pub fn probe(i: usize) -> PacketQuery {
    PacketQuery {
        src: client_ip(i),
        dst: PROBE_DST,
        proto: PacketProto::Tcp,
        dport: PROBE_PORT,
    }
}

/// One permit rule per synthetic user towards the probe destination.
pub fn synthetic_policy(clients: usize) -> MetaPolicy {
    MetaPolicy {
        version: 1,
        rules: (0..clients)
            .map(|i| {
                MetaRule::Identity(IdentityRule {
                    id: format!("bench-{i}"),
                    action: Action::Permit,
                    user: client_user(i),
                    destination: Cidr::host(PROBE_DST),
                    service: Service::new(Proto::Tcp, Port::Exact(PROBE_PORT)),
                })
            })
            .collect(),
        default_action: Action::Deny,
    }
}

/// Run the benchmark for `clients` synthetic users.
pub fn run_bench(clients: usize, opts: &BenchOptions) -> Result<BenchReport, BenchError> {
    if clients == 0 {
        return Err(BenchError::NoClients);
    }
    let backend = Arc::new(FirewallBackend::new());
    let mut pipeline = Pipeline::new(synthetic_policy(clients), Vec::new(), Duration::from_secs(3600), Arc::clone(&backend));
    pipeline.start(Utc::now())?;

    let (tx, rx) = mpsc::channel();
    let worker = thread::spawn(move || {
        let shutdown = AtomicBool::new(false);
        drive(
            &mut pipeline,
            &rx,
            LoopOptions {
                exit_when_idle: true,
                ..Default::default()
            },
            &shutdown,
        );
    });

    let mut samples = Vec::with_capacity(clients);
    for i in 0..clients {
        let query = probe(i);
        let t_event = Utc::now();
        let started = Instant::now();
        let login = SessionEvent::new(EventKind::Login, crate::event_ingest::EVENT_LOGIN, client_user(i), client_ip(i), t_event, "bench");
        if tx.send(login).is_err() {
            break;
        }
        // The first poll lands one interval after the login is queued. Polling
        // at once would race the pipeline thread and split the samples into
        // "already active" and "one tick later".
        let mut tick = started + opts.poll_interval;
        let latency = loop {
            wait_until(tick);
            let seen = Instant::now();
            if backend.evaluate(&query)?.action == Action::Permit {
                break Some(seen - started);
            }
            if started.elapsed() >= opts.timeout {
                break None;
            }
            tick += opts.poll_interval;
        };
        samples.push(BenchSample {
            client_index: i,
            t_event,
            t_active: latency.map(|l| t_event + chrono::Duration::from_std(l).unwrap_or_default()),
            latency,
        });
    }
    drop(tx);
    worker.join().expect("pipeline thread panicked");
    Ok(BenchReport::from_samples(clients, samples))
}

/// Sleep overshoots by tens of microseconds, which would stretch the poll
/// period unevenly. Sleep most of the way, then yield until the deadline.
fn wait_until(deadline: Instant) {
    const SPIN: Duration = Duration::from_micros(200);
    let left = deadline.saturating_duration_since(Instant::now());
    if left > SPIN {
        thread::sleep(left - SPIN);
    }
    while Instant::now() < deadline {
        thread::yield_now();
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// `clients,avg_ms,total_ms,failed`, one row per report.
pub fn bench_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from("clients,avg_ms,total_ms,failed\n");
    for r in reports {
        let _ = writeln!(out, "{},{:.3},{:.3},{}", r.clients, ms(r.avg), ms(r.total_serialized), r.failed);
    }
    out
}

pub fn emit_bench_csv(reports: &[BenchReport], path: &Path) -> Result<(), BackendError> {
    write_atomic(path, bench_csv(reports).as_bytes(), |_| Ok(()))
}

/// Measured rows next to the literature constants, with totals built the
/// same way (average times client count).
pub fn reference_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from("clients,series,source,avg_ms,total_ms\n");
    for r in reports {
        let _ = writeln!(out, "{},measured,measured,{:.3},{:.3}", r.clients, ms(r.avg), ms(r.total_serialized));
        for (series, secs) in LITERATURE_AVERAGES {
            let avg = secs * 1000.0;
            let _ = writeln!(out, "{},{series},literature,{avg:.3},{:.3}", r.clients, avg * r.clients as f64);
        }
    }
    out
}
