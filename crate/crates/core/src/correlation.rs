//! Event correlation countermeasures.
//!
//! Two rule shapes are supported, both keyed on the event's source IP:
//!
//! * **threshold**: `count` matching events whose timestamps fit in a
//!   `window` (inclusive) trigger a block; the key's window is then cleared.
//! * **sequence**: an ordered list of steps. Each step after the first may
//!   carry a `max-gap`, measured from the previous matched step. An event
//!   that matches the awaited step too late resets the cursor and is
//!   re-evaluated as a candidate first step.
//!
//! A fired rule blocks the offending address for the rule's block duration.
//! Window arithmetic uses event timestamps; block expiry uses the caller's
//! clock.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::net::Ipv4Addr;
use std::time::Duration;

use chrono::{DateTime, Utc};
use roxmltree::{Document, Node};

use crate::event_ingest::{EventKind, SessionEvent};
use crate::validation::{parse_duration, ValidationReport};

/// Fifteen minutes.
pub const DEFAULT_BLOCK: Duration = Duration::from_secs(15 * 60);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventPredicate {
    pub kind: Option<EventKind>,
    pub event_id: Option<u32>,
    pub username: Option<String>,
}

impl EventPredicate {
    pub fn kind(kind: EventKind) -> Self {
        EventPredicate {
            kind: Some(kind),
            ..Default::default()
        }
    }

    pub fn event_id(id: u32) -> Self {
        EventPredicate {
            event_id: Some(id),
            ..Default::default()
        }
    }

    pub fn is_constrained(&self) -> bool {
        self.kind.is_some() || self.event_id.is_some() || self.username.is_some()
    }

    pub fn matches(&self, event: &SessionEvent) -> bool {
        self.kind.is_none_or(|k| k == event.kind)
            && self.event_id.is_none_or(|id| id == event.event_id)
            && self.username.as_deref().is_none_or(|u| u == event.username)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceStep {
    pub predicate: EventPredicate,
    /// Longest allowed distance from the previous matched step. `None`
    /// means unbounded; always `None` on the first step.
    pub max_gap: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleMode {
    Threshold {
        predicate: EventPredicate,
        count: u32,
        window: Duration,
    },
    Sequence {
        steps: Vec<SequenceStep>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrelationRule {
    pub id: String,
    pub mode: RuleMode,
    pub block: Duration,
}

impl CorrelationRule {
    pub fn threshold(id: impl Into<String>, predicate: EventPredicate, count: u32, window: Duration) -> Self {
        CorrelationRule {
            id: id.into(),
            mode: RuleMode::Threshold {
                predicate,
                count,
                window,
            },
            block: DEFAULT_BLOCK,
        }
    }

    pub fn sequence(id: impl Into<String>, steps: Vec<SequenceStep>) -> Self {
        CorrelationRule {
            id: id.into(),
            mode: RuleMode::Sequence { steps },
            block: DEFAULT_BLOCK,
        }
    }

    pub fn with_block(mut self, block: Duration) -> Self {
        self.block = block;
        self
    }
}

/// A block triggered by a rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockEntry {
    pub ip: Ipv4Addr,
    pub created: DateTime<Utc>,
    pub expires: DateTime<Utc>,
    pub rule_id: String,
}

/// Deduplicated view of the blocks in force for one address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveBlock {
    pub ip: Ipv4Addr,
    pub expires: DateTime<Utc>,
    pub rule_id: String,
}

/// Blocks added or retired by one engine step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockChange {
    pub added: Vec<BlockEntry>,
    pub expired: Vec<BlockEntry>,
}

impl BlockChange {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.expired.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct Cursor {
    next: usize,
    last: DateTime<Utc>,
}

#[derive(Debug, Default)]
pub struct CorrelationEngine {
    rules: Vec<CorrelationRule>,
    windows: HashMap<(usize, Ipv4Addr), VecDeque<DateTime<Utc>>>,
    cursors: HashMap<(usize, Ipv4Addr), Cursor>,
    blocks: Vec<BlockEntry>,
}

fn chrono_dur(d: Duration) -> chrono::Duration {
    chrono::Duration::from_std(d).unwrap_or(chrono::Duration::MAX)
}

impl CorrelationEngine {
    pub fn new(rules: Vec<CorrelationRule>) -> Self {
        CorrelationEngine {
            rules,
            ..Default::default()
        }
    }

    pub fn rules(&self) -> &[CorrelationRule] {
        &self.rules
    }

    /// Feed one event; returns the blocks it triggered.
    pub fn observe(&mut self, event: &SessionEvent, now: DateTime<Utc>) -> Vec<BlockEntry> {
        let mut fired = Vec::new();
        let key_ip = event.ip;
        for (idx, rule) in self.rules.iter().enumerate() {
            let hit = match &rule.mode {
                RuleMode::Threshold {
                    predicate,
                    count,
                    window,
                } => {
                    if !predicate.matches(event) {
                        continue;
                    }
                    let times = self.windows.entry((idx, key_ip)).or_default();
                    // per-key clock never runs backwards
                    let ts = times.back().map_or(event.ts, |&last| last.max(event.ts));
                    let horizon = ts - chrono_dur(*window);
                    while times.front().is_some_and(|&t| t < horizon) {
                        times.pop_front();
                    }
                    times.push_back(ts);
                    if times.len() >= *count as usize {
                        self.windows.remove(&(idx, key_ip));
                        true
                    } else {
                        false
                    }
                }
                RuleMode::Sequence { steps } => {
                    let key = (idx, key_ip);
                    let (cursor, done) = advance(steps, self.cursors.get(&key).copied(), event);
                    match cursor {
                        Some(c) => {
                            self.cursors.insert(key, c);
                        }
                        None => {
                            self.cursors.remove(&key);
                        }
                    }
                    done
                }
            };
            if hit {
                let entry = BlockEntry {
                    ip: key_ip,
                    created: now,
                    expires: now + chrono_dur(rule.block),
                    rule_id: rule.id.clone(),
                };
                log::info!("correlation rule {} blocks {} until {}", rule.id, key_ip, entry.expires);
                fired.push(entry);
            }
        }
        self.blocks.extend(fired.iter().cloned());
        fired
    }

    /// Non-expired blocks, one per address (latest expiry wins), ascending
    /// by address.
    pub fn active_blocks(&self, now: DateTime<Utc>) -> Vec<ActiveBlock> {
        let mut by_ip: BTreeMap<Ipv4Addr, ActiveBlock> = BTreeMap::new();
        for b in self.blocks.iter().filter(|b| b.expires > now) {
            match by_ip.get(&b.ip) {
                Some(cur) if cur.expires >= b.expires => {}
                _ => {
                    by_ip.insert(
                        b.ip,
                        ActiveBlock {
                            ip: b.ip,
                            expires: b.expires,
                            rule_id: b.rule_id.clone(),
                        },
                    );
                }
            }
        }
        by_ip.into_values().collect()
    }

    /// Retire expired block entries and stale window state.
    pub fn expire_blocks(&mut self, now: DateTime<Utc>) -> Vec<BlockEntry> {
        let (expired, live): (Vec<_>, Vec<_>) = std::mem::take(&mut self.blocks)
            .into_iter()
            .partition(|b| b.expires <= now);
        self.blocks = live;

        let rules = &self.rules;
        self.windows.retain(|(idx, _), times| match &rules[*idx].mode {
            RuleMode::Threshold { window, .. } => times.back().is_some_and(|&t| t >= now - chrono_dur(*window)),
            RuleMode::Sequence { .. } => false,
        });
        expired
    }
}

/// One step of the sequence state machine. Returns the new cursor and
/// whether the sequence completed.
fn advance(steps: &[SequenceStep], cursor: Option<Cursor>, event: &SessionEvent) -> (Option<Cursor>, bool) {
    if let Some(c) = cursor {
        let step = &steps[c.next];
        if step.predicate.matches(event) {
            let in_time = step
                .max_gap
                .is_none_or(|gap| event.ts - c.last <= chrono_dur(gap));
            if in_time {
                let next = c.next + 1;
                if next == steps.len() {
                    return (None, true);
                }
                return (
                    Some(Cursor {
                        next,
                        last: event.ts,
                    }),
                    false,
                );
            }
            // too late: start over with this event as a first-step candidate
        } else {
            return (Some(c), false);
        }
    }
    if steps[0].predicate.matches(event) {
        (
            Some(Cursor {
                next: 1,
                last: event.ts,
            }),
            false,
        )
    } else {
        (None, false)
    }
}

/// Parse a correlation rule document.
pub fn load_correlation_rules(document: &str) -> Result<Vec<CorrelationRule>, ValidationReport> {
    let mut report = ValidationReport::default();
    let doc = match Document::parse(document) {
        Ok(d) => d,
        Err(e) => {
            report.push("document", format!("malformed XML: {e}"));
            return Err(report);
        }
    };
    let root = doc.root_element();
    if root.tag_name().name() != "correlation" {
        report.push(
            "document",
            format!("root element must be <correlation>, found <{}>", root.tag_name().name()),
        );
        return Err(report);
    }
    match root.attribute("version") {
        None => report.push("correlation", "missing `version` attribute"),
        Some(v) if v.trim().parse::<u64>().is_err() => {
            report.push("correlation", format!("invalid version `{v}`"))
        }
        Some(_) => {}
    }

    let mut rules = Vec::new();
    let mut ids = HashSet::new();
    for (index, node) in root.children().filter(Node::is_element).enumerate() {
        if node.tag_name().name() != "rule" {
            report.push("correlation", format!("unknown element <{}>", node.tag_name().name()));
            continue;
        }
        let id = match node.attribute("id") {
            Some(id) if !id.trim().is_empty() => id.to_string(),
            _ => {
                report.push(format!("rule #{}", index + 1), "missing `id` attribute");
                continue;
            }
        };
        let location = format!("rule {id}");
        if !ids.insert(id.clone()) {
            report.push(&location, format!("duplicate rule id \"{id}\""));
        }
        if let Some(rule) = parse_rule(node, id, &location, &mut report) {
            rules.push(rule);
        }
    }
    report.into_result(rules)
}

fn duration_attr(node: Node, name: &str, location: &str, report: &mut ValidationReport) -> Option<Duration> {
    let text = node.attribute(name)?;
    match parse_duration(text) {
        Ok(d) => Some(d),
        Err(e) => {
            report.push(location, format!("`{name}`: {e}"));
            None
        }
    }
}

fn parse_rule(node: Node, id: String, location: &str, report: &mut ValidationReport) -> Option<CorrelationRule> {
    for attr in node.attributes() {
        if !["id", "mode", "count", "window", "block"].contains(&attr.name()) {
            report.push(location, format!("unknown attribute `{}`", attr.name()));
        }
    }
    let block = match node.attribute("block") {
        None => Some(DEFAULT_BLOCK),
        Some(_) => duration_attr(node, "block", location, report),
    };

    let mode = match node.attribute("mode") {
        Some("threshold") => {
            let count = match node.attribute("count").map(|c| c.trim().parse::<u32>()) {
                None => {
                    report.push(location, "threshold rule needs `count`");
                    None
                }
                Some(Ok(n)) if n >= 2 => Some(n),
                Some(Ok(n)) => {
                    report.push(location, format!("count must be >= 2, got {n}"));
                    None
                }
                Some(Err(_)) => {
                    report.push(location, "count is not an integer");
                    None
                }
            };
            let window = if node.attribute("window").is_none() {
                report.push(location, "threshold rule needs `window`");
                None
            } else {
                duration_attr(node, "window", location, report)
            };
            let mut predicate = None;
            for child in node.children().filter(Node::is_element) {
                if child.tag_name().name() != "match" {
                    report.push(location, format!("unknown element <{}>", child.tag_name().name()));
                } else if predicate.is_some() {
                    report.push(location, "threshold rule takes exactly one <match>");
                } else {
                    predicate = Some(parse_match(child, location, report));
                }
            }
            if predicate.is_none() {
                report.push(location, "threshold rule needs a <match>");
            }
            Some(RuleMode::Threshold {
                predicate: predicate.flatten()?,
                count: count?,
                window: window?,
            })
        }
        Some("sequence") => {
            let mut steps = Vec::new();
            let mut ok = true;
            for (i, child) in node.children().filter(Node::is_element).enumerate() {
                if child.tag_name().name() != "step" {
                    report.push(location, format!("unknown element <{}>", child.tag_name().name()));
                    ok = false;
                    continue;
                }
                match parse_step(child, i, location, report) {
                    Some(s) => steps.push(s),
                    None => ok = false,
                }
            }
            if ok && steps.len() < 2 {
                report.push(location, format!("sequence needs at least 2 steps, got {}", steps.len()));
                return None;
            }
            ok.then_some(RuleMode::Sequence { steps })
        }
        Some(other) => {
            report.push(location, format!("unknown mode `{other}`"));
            None
        }
        None => {
            report.push(location, "missing `mode` attribute");
            None
        }
    }?;

    Some(CorrelationRule {
        id,
        mode,
        block: block?,
    })
}

fn parse_step(node: Node, index: usize, location: &str, report: &mut ValidationReport) -> Option<SequenceStep> {
    let here = format!("{location} step {}", index + 1);
    let mut bad = false;
    for attr in node.attributes() {
        match attr.name() {
            "max-gap" => {}
            "from" => {
                report.push(&here, "`from` is reserved and not supported; gaps run from the previous step");
                bad = true;
            }
            other => {
                report.push(&here, format!("unknown attribute `{other}`"));
                bad = true;
            }
        }
    }
    let max_gap = match node.attribute("max-gap") {
        Some(_) if index == 0 => {
            report.push(&here, "the first step cannot carry `max-gap`");
            bad = true;
            None
        }
        Some(_) => {
            let g = duration_attr(node, "max-gap", &here, report);
            bad |= g.is_none();
            g
        }
        None => None,
    };
    let matches: Vec<_> = node.children().filter(Node::is_element).collect();
    if matches.len() != 1 || matches[0].tag_name().name() != "match" {
        report.push(&here, "a step holds exactly one <match>");
        return None;
    }
    let predicate = parse_match(matches[0], &here, report)?;
    (!bad).then_some(SequenceStep { predicate, max_gap })
}

fn parse_match(node: Node, location: &str, report: &mut ValidationReport) -> Option<EventPredicate> {
    let mut pred = EventPredicate::default();
    let mut bad = false;
    for attr in node.attributes() {
        match attr.name() {
            "kind" if attr.value() == "any" => {}
            "kind" => match attr.value().parse::<EventKind>() {
                Ok(k) => pred.kind = Some(k),
                Err(e) => {
                    report.push(location, e);
                    bad = true;
                }
            },
            "event-id" => match attr.value().trim().parse::<u32>() {
                Ok(id) => pred.event_id = Some(id),
                Err(_) => {
                    report.push(location, format!("invalid event-id `{}`", attr.value()));
                    bad = true;
                }
            },
            "user" => pred.username = Some(attr.value().to_string()),
            other => {
                report.push(location, format!("unknown <match> attribute `{other}`"));
                bad = true;
            }
        }
    }
    if !bad && !pred.is_constrained() {
        report.push(location, "<match> must constrain kind, event-id or user");
        bad = true;
    }
    (!bad).then_some(pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    pub(crate) const SAMPLE: &str = r#"<correlation version="1">
  <rule id="bruteforce" mode="threshold" count="3" window="60s" block="900s">
    <match kind="failed-login"/>
  </rule>
  <rule id="svc-attack" mode="sequence" block="900s">
    <step><match kind="login"/></step>
    <step max-gap="30s"><match event-id="7001"/></step>
  </rule>
</correlation>"#;

    fn t(secs: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap()
    }

    const X: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 8);

    fn failed(at: i64, ip: Ipv4Addr) -> SessionEvent {
        SessionEvent::classic(EventKind::FailedLogin, "", ip, t(at))
    }

    fn bruteforce() -> CorrelationRule {
        CorrelationRule::threshold(
            "bruteforce",
            EventPredicate::kind(EventKind::FailedLogin),
            3,
            Duration::from_secs(60),
        )
    }

    fn svc_attack() -> CorrelationRule {
        CorrelationRule::sequence(
            "svc-attack",
            vec![
                SequenceStep {
                    predicate: EventPredicate::kind(EventKind::Login),
                    max_gap: None,
                },
                SequenceStep {
                    predicate: EventPredicate::event_id(7001),
                    max_gap: Some(Duration::from_secs(30)),
                },
            ],
        )
    }

    fn warning(at: i64) -> SessionEvent {
        SessionEvent::new(EventKind::System, 7001, "", X, t(at), "host")
    }

    #[test]
    fn third_failure_blocks() {
        let mut engine = CorrelationEngine::new(vec![bruteforce()]);
        assert!(engine.observe(&failed(0, X), t(0)).is_empty());
        assert!(engine.observe(&failed(10, X), t(10)).is_empty());
        let fired = engine.observe(&failed(20, X), t(20));
        assert_eq!(fired.len(), 1);
        assert_eq!(fired[0].ip, X);
        assert_eq!(fired[0].expires, t(20 + 900));
        // window reset after firing
        assert!(engine.observe(&failed(21, X), t(21)).is_empty());
    }

    #[test]
    fn two_failures_do_not_block() {
        let mut engine = CorrelationEngine::new(vec![bruteforce()]);
        engine.observe(&failed(0, X), t(0));
        engine.observe(&failed(10, X), t(10));
        assert!(engine.active_blocks(t(11)).is_empty());
    }

    #[test]
    fn window_is_inclusive_and_keyed_by_ip() {
        let mut engine = CorrelationEngine::new(vec![bruteforce()]);
        let other = Ipv4Addr::new(10, 0, 0, 9);
        engine.observe(&failed(0, X), t(0));
        engine.observe(&failed(1, other), t(1));
        engine.observe(&failed(30, X), t(30));
        assert_eq!(engine.observe(&failed(60, X), t(60)).len(), 1);

        let mut engine = CorrelationEngine::new(vec![bruteforce()]);
        engine.observe(&failed(0, X), t(0));
        engine.observe(&failed(30, X), t(30));
        assert!(engine.observe(&failed(61, X), t(61)).is_empty());
    }

    #[test]
    fn sequence_within_gap_blocks() {
        let mut engine = CorrelationEngine::new(vec![svc_attack()]);
        engine.observe(&SessionEvent::classic(EventKind::Login, "mallory", X, t(0)), t(0));
        assert_eq!(engine.observe(&warning(29), t(29)).len(), 1);
    }

    #[test]
    fn sequence_gap_violation_resets() {
        let mut engine = CorrelationEngine::new(vec![svc_attack()]);
        engine.observe(&SessionEvent::classic(EventKind::Login, "mallory", X, t(0)), t(0));
        assert!(engine.observe(&warning(31), t(31)).is_empty());
        // cursor is gone: another warning does not complete anything
        assert!(engine.observe(&warning(32), t(32)).is_empty());
    }

    #[test]
    fn gap_boundary_is_inclusive() {
        let mut engine = CorrelationEngine::new(vec![svc_attack()]);
        engine.observe(&SessionEvent::classic(EventKind::Login, "m", X, t(0)), t(0));
        assert_eq!(engine.observe(&warning(30), t(30)).len(), 1);
    }

    #[test]
    fn gap_violation_reevaluates_event_as_first_step() {
        // a three-step chain where step 1 and step 2 share a predicate
        let rule = CorrelationRule::sequence(
            "chain",
            vec![
                SequenceStep { predicate: EventPredicate::event_id(1), max_gap: None },
                SequenceStep { predicate: EventPredicate::event_id(1), max_gap: Some(Duration::from_secs(5)) },
                SequenceStep { predicate: EventPredicate::event_id(2), max_gap: Some(Duration::from_secs(5)) },
            ],
        );
        let ev = |id, at| SessionEvent::new(EventKind::System, id, "", X, t(at), "h");
        let mut engine = CorrelationEngine::new(vec![rule]);
        engine.observe(&ev(1, 0), t(0));
        // too late for step 2, becomes the new step 1
        engine.observe(&ev(1, 10), t(10));
        engine.observe(&ev(1, 12), t(12));
        assert_eq!(engine.observe(&ev(2, 14), t(14)).len(), 1);
    }

    #[test]
    fn active_blocks_dedupe_and_expire() {
        let long = bruteforce().with_block(Duration::from_secs(120));
        let short = CorrelationRule {
            id: "short".into(),
            ..bruteforce().with_block(Duration::from_secs(60))
        };
        let mut engine = CorrelationEngine::new(vec![short, long]);
        for s in 0..3 {
            engine.observe(&failed(s, X), t(s));
        }
        let active = engine.active_blocks(t(3));
        assert_eq!(active.len(), 1);
        assert_eq!(active[0].expires, t(2 + 120));
        assert_eq!(active[0].rule_id, "bruteforce");

        assert_eq!(engine.expire_blocks(t(62)).len(), 1);
        assert_eq!(engine.active_blocks(t(62)).len(), 1);
        assert!(engine.active_blocks(t(122)).is_empty());
        assert!(engine.active_blocks(t(121))[0].expires > t(121));
    }

    #[test]
    fn block_expiring_in_future_is_active() {
        let mut engine = CorrelationEngine::new(vec![bruteforce().with_block(Duration::from_secs(60))]);
        for s in 0..3 {
            engine.observe(&failed(s, X), t(2));
        }
        assert_eq!(engine.active_blocks(t(2)).len(), 1);
        assert!(engine.active_blocks(t(63)).is_empty());
    }

    #[test]
    fn loads_sample_document() {
        let rules = load_correlation_rules(SAMPLE).unwrap();
        assert_eq!(rules, vec![bruteforce(), svc_attack()]);
    }

    #[test]
    fn rejects_bad_documents() {
        let r = load_correlation_rules(&SAMPLE.replace("count=\"3\"", "count=\"1\"")).unwrap_err();
        assert!(r.mentions("count must be >= 2"), "{r}");

        let one_step = r#"<correlation version="1"><rule id="s" mode="sequence"><step><match kind="login"/></step></rule></correlation>"#;
        let r = load_correlation_rules(one_step).unwrap_err();
        assert!(r.mentions("at least 2 steps"), "{r}");

        let r = load_correlation_rules(&SAMPLE.replace("window=\"60s\"", "window=\"0s\"")).unwrap_err();
        assert!(r.mentions("must be positive"), "{r}");

        let r = load_correlation_rules(&SAMPLE.replace("max-gap=\"30s\"", "max-gap=\"30s\" from=\"start\"")).unwrap_err();
        assert!(r.mentions("reserved"), "{r}");

        let r = load_correlation_rules(&SAMPLE.replace("kind=\"failed-login\"", "kind=\"any\"")).unwrap_err();
        assert!(r.mentions("must constrain"), "{r}");

        let r = load_correlation_rules(&SAMPLE.replace("svc-attack", "bruteforce")).unwrap_err();
        assert!(r.mentions("duplicate"), "{r}");
    }
}
