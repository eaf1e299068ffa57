//! Username to IP translation state.
//!
//! Every login creates (or refreshes) a leased binding; logoffs and lease
//! expiry remove them. An IP address belongs to at most one user at a time:
//! a login on an occupied address evicts the previous holder. A user may
//! hold several addresses at once.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_ingest::{EventKind, SessionEvent};

/// Ten hours: one working day.
pub const DEFAULT_LEASE: Duration = Duration::from_secs(10 * 3600);
pub const DEFAULT_SWEEP_INTERVAL: Duration = Duration::from_secs(30);

/// Account names compare case-insensitively after trimming.
pub fn user_key(username: &str) -> String {
    username.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityBinding {
    pub username: String,
    pub ip: Ipv4Addr,
    #[serde(default)]
    pub login_ts: DateTime<Utc>,
    #[serde(default)]
    pub lease_expiry: DateTime<Utc>,
}

impl IdentityBinding {
    pub fn same_user(&self, username: &str) -> bool {
        user_key(&self.username) == user_key(username)
    }
}

/// Exact delta produced by one mutation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChangeSummary {
    pub added: Vec<IdentityBinding>,
    pub removed: Vec<IdentityBinding>,
    /// Bindings whose lease was refreshed by a repeated login (new value).
    pub replaced: Vec<IdentityBinding>,
}

impl ChangeSummary {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.replaced.is_empty()
    }
}

/// Immutable view of the table at one version.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IdentitySnapshot {
    #[serde(default)]
    pub version: u64,
    /// Sorted ascending by IP.
    pub bindings: Arc<[IdentityBinding]>,
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("bindings file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("address {0} is bound to more than one user")]
    DuplicateIp(Ipv4Addr),
    #[error("binding for {0} has an empty username")]
    EmptyUsername(Ipv4Addr),
}

impl IdentitySnapshot {
    pub fn empty() -> Self {
        IdentitySnapshot::default()
    }

    /// Build a snapshot from loose bindings, enforcing one binding per IP.
    pub fn from_bindings(
        version: u64,
        bindings: impl IntoIterator<Item = IdentityBinding>,
    ) -> Result<Self, SnapshotError> {
        let mut by_ip = BTreeMap::new();
        for b in bindings {
            if b.username.trim().is_empty() {
                return Err(SnapshotError::EmptyUsername(b.ip));
            }
            if by_ip.insert(b.ip, b.clone()).is_some() {
                return Err(SnapshotError::DuplicateIp(b.ip));
            }
        }
        Ok(IdentitySnapshot {
            version,
            bindings: by_ip.into_values().collect(),
        })
    }

    /// Parse the JSON written by `idfw state`, or a bare array of bindings.
    pub fn from_json(text: &str) -> Result<Self, SnapshotError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Doc {
            Snapshot(IdentitySnapshot),
            Bare(Vec<IdentityBinding>),
        }
        let (version, bindings) = match serde_json::from_str(text)? {
            Doc::Snapshot(s) => (s.version, s.bindings.to_vec()),
            Doc::Bare(b) => (0, b),
        };
        Self::from_bindings(version, bindings)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }

    /// All addresses currently held by `username`, ascending.
    pub fn lookup_ips(&self, username: &str) -> Vec<Ipv4Addr> {
        let key = user_key(username);
        self.bindings
            .iter()
            .filter(|b| user_key(&b.username) == key)
            .map(|b| b.ip)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct IdentityTable {
    by_ip: BTreeMap<Ipv4Addr, IdentityBinding>,
    version: u64,
    lease: chrono::Duration,
}

impl Default for IdentityTable {
    fn default() -> Self {
        IdentityTable::new(DEFAULT_LEASE)
    }
}

impl IdentityTable {
    pub fn new(lease: Duration) -> Self {
        IdentityTable {
            by_ip: BTreeMap::new(),
            version: 0,
            lease: chrono::Duration::from_std(lease).unwrap_or(chrono::Duration::MAX),
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.by_ip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_ip.is_empty()
    }

    /// Apply a login or logoff observed at `now`. Other event kinds are
    /// ignored.
    pub fn apply_event(&mut self, event: &SessionEvent, now: DateTime<Utc>) -> ChangeSummary {
        let mut summary = ChangeSummary::default();
        match event.kind {
            EventKind::Login => {
                let username = event.username.trim();
                if username.is_empty() {
                    return summary;
                }
                let binding = IdentityBinding {
                    username: username.to_string(),
                    ip: event.ip,
                    login_ts: now,
                    lease_expiry: now.checked_add_signed(self.lease).unwrap_or(DateTime::<Utc>::MAX_UTC),
                };
                match self.by_ip.insert(event.ip, binding.clone()) {
                    None => summary.added.push(binding),
                    Some(prev) if prev.same_user(username) => summary.replaced.push(binding),
                    Some(prev) => {
                        summary.removed.push(prev);
                        summary.added.push(binding);
                    }
                }
            }
            EventKind::Logoff => {
                if self
                    .by_ip
                    .get(&event.ip)
                    .is_some_and(|b| b.same_user(&event.username))
                {
                    summary.removed.extend(self.by_ip.remove(&event.ip));
                }
            }
            EventKind::FailedLogin | EventKind::System => {}
        }
        if !summary.is_empty() {
            self.version += 1;
        }
        summary
    }

    /// Drop every binding whose lease has run out at `now`.
    pub fn expire_stale(&mut self, now: DateTime<Utc>) -> ChangeSummary {
        let mut summary = ChangeSummary::default();
        self.by_ip.retain(|_, b| {
            if b.lease_expiry <= now {
                summary.removed.push(b.clone());
                false
            } else {
                true
            }
        });
        if !summary.is_empty() {
            self.version += 1;
        }
        summary
    }

    pub fn lookup_ips(&self, username: &str) -> Vec<Ipv4Addr> {
        self.by_ip
            .values()
            .filter(|b| b.same_user(username))
            .map(|b| b.ip)
            .collect()
    }

    pub fn snapshot(&self) -> IdentitySnapshot {
        IdentitySnapshot {
            version: self.version,
            bindings: self.by_ip.values().cloned().collect(),
        }
    }
}
