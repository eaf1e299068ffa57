use std::net::Ipv4Addr;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EventIdMap, EventKind, ParseError, Parsed, SessionEvent};

/// Largest datagram accepted by the listener.
pub const MAX_DATAGRAM: usize = 8 * 1024;

/// Pattern as written in configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyslogPatternSpec {
    pub name: String,
    pub regex: String,
    pub kind: EventKind,
    /// Event id stamped on matching events. Defaults to the canonical id for
    /// `kind`; required for `system` patterns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<u32>,
}

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("pattern `{name}`: {source}")]
    Regex {
        name: String,
        #[source]
        source: regex::Error,
    },
    #[error("pattern `{0}` signals a login/logoff but has no `user` capture")]
    MissingUserCapture(String),
    #[error("pattern `{0}` needs an explicit event_id")]
    MissingEventId(String),
}

/// A compiled syslog pattern.
#[derive(Debug, Clone)]
pub struct SyslogPattern {
    pub name: String,
    pub regex: Regex,
    pub kind: EventKind,
    pub event_id: u32,
}

impl SyslogPattern {
    pub fn compile(spec: &SyslogPatternSpec, ids: &EventIdMap) -> Result<Self, PatternError> {
        let regex = Regex::new(&spec.regex).map_err(|source| PatternError::Regex {
            name: spec.name.clone(),
            source,
        })?;
        if spec.kind.requires_username() && !regex.capture_names().any(|n| n == Some("user")) {
            return Err(PatternError::MissingUserCapture(spec.name.clone()));
        }
        let event_id = spec
            .event_id
            .or_else(|| ids.canonical_id(spec.kind))
            .ok_or_else(|| PatternError::MissingEventId(spec.name.clone()))?;
        Ok(SyslogPattern {
            name: spec.name.clone(),
            regex,
            kind: spec.kind,
            event_id,
        })
    }
}

/// The two stock sshd patterns: accepted authentication and session close.
pub fn default_pattern_specs() -> Vec<SyslogPatternSpec> {
    vec![
        SyslogPatternSpec {
            name: "sshd-accepted".into(),
            regex: r"Accepted \S+ for (?:invalid user )?(?P<user>\S+) from".into(),
            kind: EventKind::Login,
            event_id: None,
        },
        SyslogPatternSpec {
            name: "sshd-session-closed".into(),
            regex: r"session closed for user (?P<user>\S+)".into(),
            kind: EventKind::Logoff,
            event_id: None,
        },
    ]
}

pub fn default_patterns(ids: &EventIdMap) -> Vec<SyslogPattern> {
    default_pattern_specs()
        .iter()
        .map(|s| SyslogPattern::compile(s, ids).expect("stock patterns compile"))
        .collect()
}

/// Strip an RFC 3164 `<PRI>` prefix if one is present.
fn strip_pri(msg: &str) -> &str {
    let Some(rest) = msg.strip_prefix('<') else {
        return msg;
    };
    match rest.find('>') {
        Some(end @ 1..=3) if rest[..end].bytes().all(|b| b.is_ascii_digit()) => {
            match rest[..end].parse::<u16>() {
                Ok(pri) if pri <= 191 => &rest[end + 1..],
                _ => msg,
            }
        }
        _ => msg,
    }
}

/// Parse one syslog datagram.
///
/// The binding address is always `sender`, the UDP source of the datagram.
/// Addresses that appear inside the message text are ignored.
pub fn parse_syslog_datagram(
    payload: &[u8],
    sender: Ipv4Addr,
    patterns: &[SyslogPattern],
    received: DateTime<Utc>,
) -> Result<Parsed, ParseError> {
    if payload.len() > MAX_DATAGRAM {
        return Err(ParseError::Oversize(payload.len()));
    }
    let text = std::str::from_utf8(payload).map_err(|_| ParseError::NotUtf8)?;
    let body = strip_pri(text.trim_end_matches(['\r', '\n', '\0']));

    for pattern in patterns {
        let Some(caps) = pattern.regex.captures(body) else {
            continue;
        };
        let username = caps
            .name("user")
            .map(|m| m.as_str().trim().to_string())
            .unwrap_or_default();
        if pattern.kind.requires_username() && username.is_empty() {
            continue;
        }
        return Ok(Parsed::Event(SessionEvent {
            kind: pattern.kind,
            event_id: pattern.event_id,
            username,
            ip: sender,
            ts: received,
            source: sender.to_string(),
        }));
    }
    Ok(Parsed::Skip)
}
