//! Meta-policy compilation.
//!
//! A compiled ruleset has three tiers, in match order:
//!
//! 1. one deny per actively blocked address, ascending by address;
//! 2. the meta rules in document order, with every identity rule expanded to
//!    one host rule per address its user currently holds (ascending);
//! 3. the default action as a catch-all.
//!
//! Priorities are 10, 20, 30, ... in emission order. Compilation is a pure
//! function of (policy, snapshot, blocks); generations are stamped by
//! [`Recompiler`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::correlation::{ActiveBlock, BlockChange};
use crate::identity_table::{ChangeSummary, IdentitySnapshot};
use crate::meta_policy::{MetaPolicy, MetaRule};
use crate::net::{Action, Cidr, PacketProto, Port, Proto};

pub const ORIGIN_BLOCK: &str = "__block__";
pub const ORIGIN_DEFAULT: &str = "__default__";
pub const PRIORITY_STRIDE: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConcreteRule {
    pub priority: u32,
    pub action: Action,
    pub src: Cidr,
    pub dst: Cidr,
    pub proto: Proto,
    pub dport: Port,
    pub origin_rule_id: String,
    pub origin_user: Option<String>,
}

impl ConcreteRule {
    pub fn matches(&self, q: &PacketQuery) -> bool {
        self.src.contains(q.src) && self.dst.contains(q.dst) && self.proto.matches(q.proto) && self.dport.matches(q.dport)
    }
}

/// A fully concrete packet to classify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PacketQuery {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub proto: PacketProto,
    pub dport: u16,
}

/// Verdict for one packet.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Decision {
    pub action: Action,
    pub matched_priority: u32,
    pub origin_rule_id: String,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcreteRuleset {
    /// Strictly ascending by priority.
    pub rules: Vec<ConcreteRule>,
    pub generation: u64,
    pub policy_version: u64,
    pub snapshot_version: u64,
    /// Set when the ruleset is stamped for installation. Only appears in the
    /// emitted header.
    pub compiled_at: Option<DateTime<Utc>>,
}

impl ConcreteRuleset {
    /// First-match classification by linear scan.
    pub fn evaluate(&self, q: &PacketQuery) -> Option<Decision> {
        self.rules.iter().find(|r| r.matches(q)).map(|r| Decision {
            action: r.action,
            matched_priority: r.priority,
            origin_rule_id: r.origin_rule_id.clone(),
            generation: self.generation,
        })
    }

    /// Classify a batch. Runs on the rayon pool with the `parallel` feature.
    pub fn evaluate_batch(&self, queries: &[PacketQuery]) -> Vec<Option<Decision>> {
        #[cfg(feature = "parallel")]
        {
            self.evaluate_batch_parallel(queries)
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.evaluate_batch_sequential(queries)
        }
    }

    pub fn evaluate_batch_sequential(&self, queries: &[PacketQuery]) -> Vec<Option<Decision>> {
        queries.iter().map(|q| self.evaluate(q)).collect()
    }

    #[cfg(feature = "parallel")]
    pub fn evaluate_batch_parallel(&self, queries: &[PacketQuery]) -> Vec<Option<Decision>> {
        use rayon::prelude::*;
        queries.par_iter().with_min_len(256).map(|q| self.evaluate(q)).collect()
    }

    /// True when both rulesets hold the same rules compiled from the same
    /// inputs, ignoring generation and timestamp.
    pub fn same_policy(&self, other: &ConcreteRuleset) -> bool {
        self.rules == other.rules
            && self.policy_version == other.policy_version
            && self.snapshot_version == other.snapshot_version
    }
}

/// Compile `policy` against the identity `snapshot` and active `blocks`.
/// The result carries generation 0 and no timestamp.
pub fn compile(policy: &MetaPolicy, snapshot: &IdentitySnapshot, blocks: &[ActiveBlock]) -> ConcreteRuleset {
    let mut rules = Vec::new();
    let mut push = |action, src, dst, proto, dport, origin: &str, user: Option<&str>| {
        let priority = (rules.len() as u32 + 1) * PRIORITY_STRIDE;
        rules.push(ConcreteRule {
            priority,
            action,
            src,
            dst,
            proto,
            dport,
            origin_rule_id: origin.to_string(),
            origin_user: user.map(str::to_string),
        });
    };

    let blocked: BTreeMap<Ipv4Addr, ()> = blocks.iter().map(|b| (b.ip, ())).collect();
    for ip in blocked.keys() {
        push(Action::Deny, Cidr::host(*ip), Cidr::ANY, Proto::Any, Port::Any, ORIGIN_BLOCK, None);
    }

    for rule in &policy.rules {
        match rule {
            MetaRule::Identity(r) => {
                for ip in snapshot.lookup_ips(&r.user) {
                    push(
                        r.action,
                        Cidr::host(ip),
                        r.destination,
                        r.service.proto,
                        r.service.port,
                        &r.id,
                        Some(&r.user),
                    );
                }
            }
            MetaRule::L3(r) => push(r.action, r.source, r.destination, r.service.proto, r.service.port, &r.id, None),
        }
    }

    push(policy.default_action, Cidr::ANY, Cidr::ANY, Proto::Any, Port::Any, ORIGIN_DEFAULT, None);

    ConcreteRuleset {
        rules,
        generation: 0,
        policy_version: policy.version,
        snapshot_version: snapshot.version,
        compiled_at: None,
    }
}

/// What prompted a recompile.
#[derive(Debug, Clone)]
pub enum Change {
    Identity(ChangeSummary),
    Blocks(BlockChange),
}

impl Change {
    pub fn is_empty(&self) -> bool {
        match self {
            Change::Identity(c) => c.is_empty(),
            Change::Blocks(c) => c.is_empty(),
        }
    }
}

impl From<ChangeSummary> for Change {
    fn from(c: ChangeSummary) -> Self {
        Change::Identity(c)
    }
}

impl From<BlockChange> for Change {
    fn from(c: BlockChange) -> Self {
        Change::Blocks(c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recompiled {
    Unchanged,
    Ruleset(ConcreteRuleset),
}

/// Change detection plus full recompilation, stamping a fresh generation
/// on every produced ruleset.
#[derive(Debug, Default)]
pub struct Recompiler {
    generation: u64,
}

impl Recompiler {
    pub fn new() -> Self {
        Recompiler::default()
    }

    /// Start numbering after `generation`.
    pub fn starting_after(generation: u64) -> Self {
        Recompiler { generation }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Unconditionally compile and stamp the next generation.
    pub fn compile_next(
        &mut self,
        policy: &MetaPolicy,
        snapshot: &IdentitySnapshot,
        blocks: &[ActiveBlock],
        now: DateTime<Utc>,
    ) -> ConcreteRuleset {
        let mut ruleset = compile(policy, snapshot, blocks);
        self.generation += 1;
        ruleset.generation = self.generation;
        ruleset.compiled_at = Some(now);
        ruleset
    }

    pub fn recompile_on_change(
        &mut self,
        change: &Change,
        policy: &MetaPolicy,
        snapshot: &IdentitySnapshot,
        blocks: &[ActiveBlock],
        now: DateTime<Utc>,
    ) -> Recompiled {
        if change.is_empty() {
            return Recompiled::Unchanged;
        }
        Recompiled::Ruleset(self.compile_next(policy, snapshot, blocks, now))
    }
}

/// Render the rule lines only, one per rule, each newline-terminated.
pub fn emit_rule_lines(ruleset: &ConcreteRuleset) -> String {
    let mut out = String::new();
    for r in &ruleset.rules {
        let _ = writeln!(
            out,
            "{} {} src {} dst {} proto {} dport {} # origin={} user={}",
            r.priority,
            r.action,
            r.src,
            r.dst,
            r.proto,
            r.dport,
            r.origin_rule_id,
            r.origin_user.as_deref().unwrap_or("-"),
        );
    }
    out
}

/// Firewall-readable text: header comments followed by one line per rule.
pub fn emit_text(ruleset: &ConcreteRuleset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# generation {}", ruleset.generation);
    let _ = writeln!(out, "# policy-version {}", ruleset.policy_version);
    let _ = writeln!(out, "# snapshot-version {}", ruleset.snapshot_version);
    match ruleset.compiled_at {
        Some(ts) => {
            let _ = writeln!(out, "# compiled-at {}", ts.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true));
        }
        None => out.push_str("# compiled-at -\n"),
    }
    out.push_str(&emit_rule_lines(ruleset));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct RuleTextError {
    pub line: usize,
    pub message: String,
}

/// Parse text produced by [`emit_text`] back into a ruleset.
pub fn parse_rule_text(text: &str) -> Result<ConcreteRuleset, RuleTextError> {
    let mut ruleset = ConcreteRuleset {
        rules: Vec::new(),
        generation: 0,
        policy_version: 0,
        snapshot_version: 0,
        compiled_at: None,
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let err = |message: String| RuleTextError { line: lineno, message };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let mut parts = comment.split_whitespace();
            let (Some(key), Some(value)) = (parts.next(), parts.next()) else {
                continue;
            };
            let number = || value.parse::<u64>().map_err(|_| err(format!("bad {key} `{value}`")));
            match key {
                "generation" => ruleset.generation = number()?,
                "policy-version" => ruleset.policy_version = number()?,
                "snapshot-version" => ruleset.snapshot_version = number()?,
                "compiled-at" if value != "-" => {
                    let ts = DateTime::parse_from_rfc3339(value).map_err(|_| err(format!("bad timestamp `{value}`")))?;
                    ruleset.compiled_at = Some(ts.with_timezone(&Utc));
                }
                _ => {}
            }
            continue;
        }
        let rule = parse_rule_line(line).map_err(err)?;
        if ruleset.rules.last().is_some_and(|prev| prev.priority >= rule.priority) {
            return Err(err(format!("priority {} is not ascending", rule.priority)));
        }
        ruleset.rules.push(rule);
    }
    Ok(ruleset)
}

fn parse_rule_line(line: &str) -> Result<ConcreteRule, String> {
    let (body, meta) = line.split_once(" # ").ok_or("missing `# origin=` trailer")?;
    let tok: Vec<&str> = body.split_whitespace().collect();
    if tok.len() != 10 || tok[2] != "src" || tok[4] != "dst" || tok[6] != "proto" || tok[8] != "dport" {
        return Err(format!("malformed rule `{body}`"));
    }
    let meta = meta.trim();
    let rest = meta.strip_prefix("origin=").ok_or("missing origin=")?;
    let (origin, user) = rest.split_once(" user=").ok_or("missing user=")?;
    Ok(ConcreteRule {
        priority: tok[0].parse().map_err(|_| format!("bad priority `{}`", tok[0]))?,
        action: tok[1].parse().map_err(|e| format!("{e}"))?,
        src: tok[3].parse().map_err(|e| format!("{e}"))?,
        dst: tok[5].parse().map_err(|e| format!("{e}"))?,
        proto: tok[7].parse().map_err(|e| format!("{e}"))?,
        dport: tok[9].parse().map_err(|e| format!("{e}"))?,
        origin_rule_id: origin.to_string(),
        origin_user: (user != "-").then(|| user.to_string()),
    })
}
