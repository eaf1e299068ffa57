//! The event-processing loop: sources feed an ordered queue, a single
//! thread owns the identity table, correlation engine and recompiler, and
//! every state-changing event produces exactly one install.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use log::{debug, info, warn};
use thiserror::Error;

use crate::compiler::{Change, ConcreteRuleset, Recompiled, Recompiler};
use crate::config::{ConfigError, PipelineConfig};
use crate::correlation::{load_correlation_rules, BlockChange, CorrelationEngine, CorrelationRule};
use crate::event_ingest::{parse_replay_line, EventIdMap, Parsed, SessionEvent, SyslogListener};
use crate::firewall_backend::{write_rule_file, BackendError, FirewallBackend, InstallReceipt};
use crate::identity_table::{ChangeSummary, IdentitySnapshot, IdentityTable};
use crate::meta_policy::{parse_meta_policy, MetaPolicy};
use crate::validation::ValidationReport;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("policy {path}: {report}")]
    Policy { path: PathBuf, report: ValidationReport },
    #[error("correlation rules {path}: {report}")]
    Correlation { path: PathBuf, report: ValidationReport },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot bind syslog listener on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl PipelineError {
    /// True for errors caused by invalid input documents or configuration.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(ConfigError::Invalid(_) | ConfigError::Parse(_))
                | PipelineError::Policy { .. }
                | PipelineError::Correlation { .. }
        )
    }
}

fn read(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_policy(path: &Path) -> Result<MetaPolicy, PipelineError> {
    parse_meta_policy(&read(path)?).map_err(|report| PipelineError::Policy {
        path: path.to_path_buf(),
        report,
    })
}

pub fn load_correlation(path: &Path) -> Result<Vec<CorrelationRule>, PipelineError> {
    load_correlation_rules(&read(path)?).map_err(|report| PipelineError::Correlation {
        path: path.to_path_buf(),
        report,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub events: u64,
    pub installs: u64,
    pub sweeps_with_changes: u64,
    pub file_errors: u64,
}

/// State owned by the event-processing thread.
#[derive(Debug)]
pub struct Pipeline {
    policy: MetaPolicy,
    table: IdentityTable,
    correlation: CorrelationEngine,
    recompiler: Recompiler,
    backend: Arc<FirewallBackend>,
    rule_file: Option<PathBuf>,
    state_file: Option<PathBuf>,
    current: Option<Arc<ConcreteRuleset>>,
    stats: PipelineStats,
}

impl Pipeline {
    pub fn new(policy: MetaPolicy, rules: Vec<CorrelationRule>, lease: Duration, backend: Arc<FirewallBackend>) -> Self {
        Pipeline {
            policy,
            table: IdentityTable::new(lease),
            correlation: CorrelationEngine::new(rules),
            recompiler: Recompiler::starting_after(backend.active_generation()),
            backend,
            rule_file: None,
            state_file: None,
            current: None,
            stats: PipelineStats::default(),
        }
    }

    /// Build from configuration, loading the policy and correlation rules.
    pub fn from_config(config: &PipelineConfig, backend: Arc<FirewallBackend>) -> Result<Self, PipelineError> {
        let policy_path = config
            .policy
            .path
            .as_deref()
            .ok_or_else(|| ConfigError::Invalid(vec!["policy.path is required".into()]))?;
        let policy = load_policy(policy_path)?;
        let rules = match &config.correlation.rules_path {
            Some(p) => load_correlation(p)?,
            None => Vec::new(),
        };
        let mut pipeline = Pipeline::new(policy, rules, config.identity.lease, backend);
        pipeline.rule_file = config.installer.rule_file.clone();
        pipeline.state_file = config.identity.state_file.clone();
        Ok(pipeline)
    }

    pub fn with_rule_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.rule_file = Some(path.into());
        self
    }

    pub fn with_state_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.state_file = Some(path.into());
        self
    }

    pub fn backend(&self) -> &Arc<FirewallBackend> {
        &self.backend
    }

    pub fn policy(&self) -> &MetaPolicy {
        &self.policy
    }

    pub fn snapshot(&self) -> IdentitySnapshot {
        self.table.snapshot()
    }

    pub fn current_ruleset(&self) -> Option<Arc<ConcreteRuleset>> {
        self.current.clone()
    }

    pub fn stats(&self) -> PipelineStats {
        self.stats
    }

    pub fn correlation(&self) -> &CorrelationEngine {
        &self.correlation
    }

    /// Install the initial ruleset (no bindings, no blocks). Not counted in
    /// [`PipelineStats::installs`].
    pub fn start(&mut self, now: DateTime<Utc>) -> Result<InstallReceipt, PipelineError> {
        let ruleset = self.recompiler.compile_next(
            &self.policy,
            &self.table.snapshot(),
            &self.correlation.active_blocks(now),
            now,
        );
        let receipt = self.install(ruleset)?;
        self.persist_state();
        Ok(receipt)
    }

    /// Process one event. Returns the install it caused, if any.
    pub fn handle_event(&mut self, event: &SessionEvent, now: DateTime<Utc>) -> Result<Option<InstallReceipt>, PipelineError> {
        self.handle_batch(std::slice::from_ref(event), now)
    }

    /// Process several events and install at most once for all of them.
    pub fn handle_batch(&mut self, events: &[SessionEvent], now: DateTime<Utc>) -> Result<Option<InstallReceipt>, PipelineError> {
        let mut identity = ChangeSummary::default();
        let mut blocks = BlockChange::default();
        for event in events {
            self.stats.events += 1;
            debug!("event {event}");
            blocks.added.extend(self.correlation.observe(event, now));
            let c = self.table.apply_event(event, now);
            identity.added.extend(c.added);
            identity.removed.extend(c.removed);
            identity.replaced.extend(c.replaced);
        }
        if !identity.is_empty() {
            self.persist_state();
        }
        self.recompile(identity, blocks, now)
    }

    /// Expire leases and blocks.
    pub fn sweep(&mut self, now: DateTime<Utc>) -> Result<Option<InstallReceipt>, PipelineError> {
        let identity = self.table.expire_stale(now);
        let blocks = BlockChange {
            added: Vec::new(),
            expired: self.correlation.expire_blocks(now),
        };
        if !identity.is_empty() {
            info!("lease expiry removed {} binding(s)", identity.removed.len());
            self.persist_state();
        }
        let receipt = self.recompile(identity, blocks, now)?;
        if receipt.is_some() {
            self.stats.sweeps_with_changes += 1;
        }
        Ok(receipt)
    }

    fn recompile(&mut self, identity: ChangeSummary, blocks: BlockChange, now: DateTime<Utc>) -> Result<Option<InstallReceipt>, PipelineError> {
        let change = if identity.is_empty() {
            Change::Blocks(blocks)
        } else {
            Change::Identity(identity)
        };
        let snapshot = self.table.snapshot();
        let active = self.correlation.active_blocks(now);
        match self
            .recompiler
            .recompile_on_change(&change, &self.policy, &snapshot, &active, now)
        {
            Recompiled::Unchanged => Ok(None),
            Recompiled::Ruleset(ruleset) => {
                let receipt = self.install(ruleset)?;
                self.stats.installs += 1;
                Ok(Some(receipt))
            }
        }
    }

    fn install(&mut self, ruleset: ConcreteRuleset) -> Result<InstallReceipt, PipelineError> {
        let ruleset = Arc::new(ruleset);
        let receipt = self.backend.install((*ruleset).clone())?;
        debug!("installed generation {} ({} rules)", receipt.generation, ruleset.rules.len());
        self.current = Some(Arc::clone(&ruleset));
        self.write_rules(&ruleset);
        Ok(receipt)
    }

    fn write_rules(&mut self, ruleset: &ConcreteRuleset) {
        if let Some(path) = &self.rule_file {
            if let Err(e) = write_rule_file(ruleset, path) {
                warn!("{e}");
                self.stats.file_errors += 1;
            }
        }
    }

    fn persist_state(&mut self) {
        if let Some(path) = &self.state_file {
            let json = self.table.snapshot().to_json();
            if let Err(e) = crate::firewall_backend::write_atomic(path, json.as_bytes(), |_| Ok(())) {
                warn!("{e}");
                self.stats.file_errors += 1;
            }
        }
    }

    /// Rewrite the rule file from the active ruleset.
    pub fn flush(&mut self) {
        if let Some(current) = self.current.clone() {
            self.write_rules(&current);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoopOptions {
    pub sweep_interval: Duration,
    /// Coalesce events arriving within this window into one install.
    pub batch_window: Option<Duration>,
    /// Stop once every source is exhausted instead of waiting for shutdown.
    pub exit_when_idle: bool,
}

impl Default for LoopOptions {
    fn default() -> Self {
        LoopOptions {
            sweep_interval: crate::identity_table::DEFAULT_SWEEP_INTERVAL,
            batch_window: None,
            exit_when_idle: false,
        }
    }
}

const TICK: Duration = Duration::from_millis(100);

/// Drain `rx` into `pipeline` until shutdown, or until every sender is gone
/// when `exit_when_idle` is set.
pub fn drive(pipeline: &mut Pipeline, rx: &Receiver<SessionEvent>, opts: LoopOptions, shutdown: &AtomicBool) {
    let mut next_sweep = Instant::now() + opts.sweep_interval;
    while !shutdown.load(Ordering::Relaxed) {
        let wait = next_sweep.saturating_duration_since(Instant::now()).min(TICK);
        match rx.recv_timeout(wait) {
            Ok(first) => {
                let mut batch = vec![first];
                if let Some(window) = opts.batch_window {
                    let deadline = Instant::now() + window;
                    while let Ok(ev) = rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
                        batch.push(ev);
                    }
                }
                if let Err(e) = pipeline.handle_batch(&batch, Utc::now()) {
                    warn!("event processing failed: {e}");
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => {
                if opts.exit_when_idle {
                    break;
                }
                thread::sleep(wait);
            }
        }
        if Instant::now() >= next_sweep {
            if let Err(e) = pipeline.sweep(Utc::now()) {
                warn!("sweep failed: {e}");
            }
            next_sweep = Instant::now() + opts.sweep_interval;
        }
    }
}

/// Send every event of a replay file to `tx`. Bad lines are logged and
/// counted.
pub fn replay_file(path: &Path, ids: &EventIdMap, tx: &Sender<SessionEvent>) -> Result<ReplayStats, PipelineError> {
    let file = fs::File::open(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut stats = ReplayStats::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_replay_line(&line, ids) {
            Ok(Parsed::Event(ev)) => {
                stats.events += 1;
                if tx.send(ev).is_err() {
                    break;
                }
            }
            Ok(Parsed::Skip) => stats.skipped += 1,
            Err(e) => {
                warn!("{}:{}: {e}", path.display(), i + 1);
                stats.errors += 1;
            }
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayStats {
    pub events: u64,
    pub skipped: u64,
    pub errors: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Exit after the replay file is consumed (the syslog listener, if any,
    /// is stopped too).
    pub once: bool,
    pub batch_window: Option<Duration>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub generation: u64,
    pub stats: PipelineStats,
    pub replay: Option<ReplayStats>,
    pub snapshot: IdentitySnapshot,
}

/// Run the daemon until `shutdown` is raised (or, with `once`, until the
/// replay file is consumed). The rule file is flushed on exit.
pub fn run_pipeline(config: &PipelineConfig, opts: RunOptions, shutdown: Arc<AtomicBool>) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let backend = Arc::new(FirewallBackend::new());
    let mut pipeline = Pipeline::from_config(config, Arc::clone(&backend))?;
    let patterns = config.syslog_patterns()?;

    let listener = match &config.syslog.bind {
        Some(addr) if !opts.once => Some(SyslogListener::bind(addr.as_str()).map_err(|source| PipelineError::Bind {
            addr: addr.clone(),
            source,
        })?),
        _ => None,
    };

    pipeline.start(Utc::now())?;
    let (tx, rx) = mpsc::channel();

    let listener_thread = listener.map(|listener| {
        if let Ok(addr) = listener.local_addr() {
            info!("syslog listening on {addr}");
        }
        let tx = tx.clone();
        let shutdown = Arc::clone(&shutdown);
        thread::spawn(move || {
            listener.run(&patterns, &shutdown, |ev| {
                let _ = tx.send(ev);
            })
        })
    });

    let replay_thread = config.replay.path.clone().map(|path| {
        let tx = tx.clone();
        let ids = config.eventlog.id_map.clone();
        thread::spawn(move || replay_file(&path, &ids, &tx))
    });
    drop(tx);

    drive(
        &mut pipeline,
        &rx,
        LoopOptions {
            sweep_interval: config.identity.sweep_interval,
            batch_window: opts.batch_window,
            exit_when_idle: opts.once,
        },
        &shutdown,
    );

    shutdown.store(true, Ordering::Relaxed);
    if let Some(h) = listener_thread {
        if let Ok(stats) = h.join() {
            info!(
                "syslog: {} received, {} delivered, {} skipped, {} errors",
                stats.received, stats.delivered, stats.skipped, stats.errors
            );
        }
    }
    let replay = match replay_thread {
        Some(h) => Some(h.join().expect("replay thread panicked")?),
        None => None,
    };

    pipeline.flush();
    let generation = backend.active_generation();
    info!("shutdown at generation {generation}");
    Ok(RunSummary {
        generation,
        stats: pipeline.stats(),
        replay,
        snapshot: pipeline.snapshot(),
    })
}
