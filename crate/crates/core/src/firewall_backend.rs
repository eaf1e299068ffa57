//! In-memory enforcement point and the rule-file installer.
//!
//! The active ruleset sits behind an [`ArcSwapOption`]: readers grab the
//! current `Arc` without locking and classify against it, so a decision
//! always comes from exactly one generation. Installs are generation-gated.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwapOption;
use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::compiler::{emit_text, ConcreteRuleset};
pub use crate::compiler::{Decision, PacketQuery};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("stale generation {offered}: generation {active} is already active")]
    StaleGeneration { active: u64, offered: u64 },
    #[error("no policy installed")]
    NoPolicy,
    #[error("ruleset generation {0} matched no rule")]
    NoMatch(u64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstallReceipt {
    pub generation: u64,
    pub ts: DateTime<Utc>,
}

#[derive(Debug, Default)]
pub struct FirewallBackend {
    active: ArcSwapOption<ConcreteRuleset>,
    // serializes installers; readers never take it
    install_lock: Mutex<()>,
}

impl FirewallBackend {
    pub fn new() -> Self {
        FirewallBackend::default()
    }

    pub fn active_generation(&self) -> u64 {
        self.active.load().as_ref().map_or(0, |r| r.generation)
    }

    pub fn active(&self) -> Option<Arc<ConcreteRuleset>> {
        self.active.load_full()
    }

    /// Atomically replace the active ruleset. The new generation must be
    /// strictly greater than the active one (0 when nothing is installed).
    pub fn install(&self, ruleset: ConcreteRuleset) -> Result<InstallReceipt, BackendError> {
        let _guard = self.install_lock.lock().unwrap_or_else(|e| e.into_inner());
        let active = self.active_generation();
        if ruleset.generation <= active {
            return Err(BackendError::StaleGeneration {
                active,
                offered: ruleset.generation,
            });
        }
        let generation = ruleset.generation;
        self.active.store(Some(Arc::new(ruleset)));
        Ok(InstallReceipt {
            generation,
            ts: Utc::now(),
        })
    }

    pub fn evaluate(&self, query: &PacketQuery) -> Result<Decision, BackendError> {
        let guard = self.active.load();
        let ruleset = guard.as_ref().ok_or(BackendError::NoPolicy)?;
        ruleset
            .evaluate(query)
            .ok_or(BackendError::NoMatch(ruleset.generation))
    }

    /// Classify a batch against a single generation.
    pub fn evaluate_batch(&self, queries: &[PacketQuery]) -> Result<Vec<Decision>, BackendError> {
        let ruleset = self.active.load_full().ok_or(BackendError::NoPolicy)?;
        ruleset
            .evaluate_batch(queries)
            .into_iter()
            .map(|d| d.ok_or(BackendError::NoMatch(ruleset.generation)))
            .collect()
    }
}

/// Write the emitted ruleset to `path` atomically (temp file + rename).
pub fn write_rule_file(ruleset: &ConcreteRuleset, path: &Path) -> Result<(), BackendError> {
    write_atomic(path, emit_text(ruleset).as_bytes(), |_| Ok(()))
}

/// Atomic write with a hook that runs after the temp file is complete and
/// before it is renamed into place. A hook error aborts the write and
/// leaves `path` untouched.
pub(crate) fn write_atomic<F>(path: &Path, contents: &[u8], before_rename: F) -> Result<(), BackendError>
where
    F: FnOnce(&Path) -> io::Result<()>,
{
    let io_err = |source| BackendError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::Builder::new()
        .prefix(".idfw-rules")
        .tempfile_in(dir)
        .map_err(io_err)?;
    tmp.write_all(contents).map_err(io_err)?;
    if !contents.ends_with(b"\n") {
        tmp.write_all(b"\n").map_err(io_err)?;
    }
    tmp.as_file().sync_all().map_err(io_err)?;
    before_rename(tmp.path()).map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}
