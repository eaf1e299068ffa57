//! Authentication event sources.
//!
//! Two channels feed the engine: line-delimited JSON replays of Windows
//! security event-log records, and RFC 3164 syslog datagrams from Unix
//! hosts. Both are normalized into [`SessionEvent`]s. Parsers are pure and
//! may be called from any thread; the UDP listener lives in [`listener`].

mod listener;
mod replay;
mod syslog;

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use listener::{run_syslog_listener, ListenerStats, SyslogListener};
pub use replay::{parse_replay_line, RawReplayRecord};
pub use syslog::{
    default_pattern_specs, default_patterns, parse_syslog_datagram, PatternError, SyslogPattern, SyslogPatternSpec,
    MAX_DATAGRAM,
};

/// Classic (pre-Vista) security log id of a successful logon.
pub const EVENT_LOGIN: u32 = 540;
/// Classic security log id of a logoff.
pub const EVENT_LOGOFF: u32 = 538;
/// Classic security log id of a failed logon.
pub const EVENT_FAILED_LOGIN: u32 = 529;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Login,
    Logoff,
    FailedLogin,
    /// Any other log record the correlation engine is told to watch
    /// (service warnings and the like). Never touches the identity table.
    System,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Login => "login",
            EventKind::Logoff => "logoff",
            EventKind::FailedLogin => "failed-login",
            EventKind::System => "system",
        }
    }

    /// Login and logoff must name the account they refer to.
    pub fn requires_username(self) -> bool {
        matches!(self, EventKind::Login | EventKind::Logoff)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "login" => Ok(EventKind::Login),
            "logoff" => Ok(EventKind::Logoff),
            "failed-login" | "failed" => Ok(EventKind::FailedLogin),
            "system" => Ok(EventKind::System),
            other => Err(format!("unknown event kind `{other}`")),
        }
    }
}

/// A normalized authentication (or watched system) event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub kind: EventKind,
    pub event_id: u32,
    pub username: String,
    pub ip: Ipv4Addr,
    pub ts: DateTime<Utc>,
    pub source: String,
}

impl SessionEvent {
    pub fn new(
        kind: EventKind,
        event_id: u32,
        username: impl Into<String>,
        ip: Ipv4Addr,
        ts: DateTime<Utc>,
        source: impl Into<String>,
    ) -> Self {
        SessionEvent {
            kind,
            event_id,
            username: username.into(),
            ip,
            ts,
            source: source.into(),
        }
    }

    /// Convenience constructor using the classic event id for `kind`.
    pub fn classic(
        kind: EventKind,
        username: impl Into<String>,
        ip: Ipv4Addr,
        ts: DateTime<Utc>,
    ) -> Self {
        let id = EventIdMap::default().canonical_id(kind).unwrap_or(0);
        SessionEvent::new(kind, id, username, ip, ts, "local")
    }

    /// Render as one replay-file line.
    pub fn to_replay_line(&self) -> String {
        let record = RawReplayRecord {
            ts: self
                .ts
                .to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true),
            event_id: i64::from(self.event_id),
            username: self.username.clone(),
            ip: self.ip.to_string(),
            source: self.source.clone(),
        };
        serde_json::to_string(&record).expect("replay record serializes")
    }
}

impl fmt::Display for SessionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}@{})", self.kind, self.username, self.ip)
    }
}

/// Mapping from log event ids to event kinds. The first id in each list is
/// the canonical one used when an event has to be rendered back out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventIdMap {
    pub login: Vec<u32>,
    pub logoff: Vec<u32>,
    pub failed: Vec<u32>,
    pub system: Vec<u32>,
}

impl Default for EventIdMap {
    fn default() -> Self {
        EventIdMap {
            login: vec![EVENT_LOGIN],
            logoff: vec![EVENT_LOGOFF],
            failed: vec![EVENT_FAILED_LOGIN],
            system: Vec::new(),
        }
    }
}

impl EventIdMap {
    pub fn classify(&self, event_id: u32) -> Option<EventKind> {
        if self.login.contains(&event_id) {
            Some(EventKind::Login)
        } else if self.logoff.contains(&event_id) {
            Some(EventKind::Logoff)
        } else if self.failed.contains(&event_id) {
            Some(EventKind::FailedLogin)
        } else if self.system.contains(&event_id) {
            Some(EventKind::System)
        } else {
            None
        }
    }

    pub fn canonical_id(&self, kind: EventKind) -> Option<u32> {
        match kind {
            EventKind::Login => self.login.first(),
            EventKind::Logoff => self.logoff.first(),
            EventKind::FailedLogin => self.failed.first(),
            EventKind::System => self.system.first(),
        }
        .copied()
    }
}

/// Outcome of parsing one record that was well formed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    Event(SessionEvent),
    Skip,
}

impl Parsed {
    pub fn event(self) -> Option<SessionEvent> {
        match self {
            Parsed::Event(e) => Some(e),
            Parsed::Skip => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("invalid IPv4 address `{0}`")]
    InvalidIp(String),
    #[error("invalid timestamp `{0}`")]
    InvalidTimestamp(String),
    #[error("{0} event without a username")]
    EmptyUsername(EventKind),
    #[error("datagram is not valid UTF-8")]
    NotUtf8,
    #[error("datagram of {0} bytes exceeds the 8 KiB limit")]
    Oversize(usize),
}
