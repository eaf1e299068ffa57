use std::net::Ipv4Addr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{EventIdMap, ParseError, Parsed, SessionEvent};

/// One line of a replay file, as written by the event-log exporter.
/// Extra fields are ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReplayRecord {
    pub ts: String,
    pub event_id: i64,
    pub username: String,
    pub ip: String,
    pub source: String,
}

/// Parse one replay record. Unmapped event ids yield [`Parsed::Skip`].
pub fn parse_replay_line(line: &str, ids: &EventIdMap) -> Result<Parsed, ParseError> {
    let record: RawReplayRecord =
        serde_json::from_str(line.trim()).map_err(|e| ParseError::Malformed(e.to_string()))?;

    let Some(kind) = u32::try_from(record.event_id)
        .ok()
        .and_then(|id| ids.classify(id))
    else {
        return Ok(Parsed::Skip);
    };

    let ip: Ipv4Addr = record
        .ip
        .parse()
        .map_err(|_| ParseError::InvalidIp(record.ip.clone()))?;
    let ts = DateTime::parse_from_rfc3339(&record.ts)
        .map_err(|_| ParseError::InvalidTimestamp(record.ts.clone()))?
        .with_timezone(&Utc);

    if kind.requires_username() && record.username.trim().is_empty() {
        return Err(ParseError::EmptyUsername(kind));
    }

    Ok(Parsed::Event(SessionEvent {
        kind,
        event_id: record.event_id as u32,
        username: record.username,
        ip,
        ts,
        source: record.source,
    }))
}
