//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL` line
//! before asserting, so `cargo test --test acceptance -- --nocapture` gives
//! a readable scorecard.

use std::collections::{BTreeMap, HashMap};
use std::net::{Ipv4Addr, UdpSocket};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use idfw::bench::{bench_csv, run_bench, BenchOptions};
use idfw::compiler::{emit_rule_lines, Change, Recompiled, ORIGIN_BLOCK};
use idfw::correlation::{ActiveBlock, BlockChange, BlockEntry, CorrelationEngine, CorrelationRule, EventPredicate};
use idfw::event_ingest::{default_patterns, parse_replay_line, parse_syslog_datagram, EventIdMap, Parsed, SyslogListener};
use idfw::meta_policy::{IdentityRule, L3Rule, MetaRule, Service};
use idfw::pipeline::Pipeline;
use idfw::{
    compile, emit_text, Action, Cidr, ConcreteRuleset, Decision, EventKind, FirewallBackend, IdentitySnapshot,
    IdentityTable, MetaPolicy, PacketProto, PacketQuery, Port, Proto, Recompiler, SessionEvent,
};

/// Criteria run one at a time so the latency bench is not measured while
/// another criterion saturates the CPU.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    println!("criterion {n} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
}

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 3, 2, 8, 0, 0).unwrap()
}

// ---------------------------------------------------------------- criterion 1

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let icept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - (icept + slope * x)).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

#[test]
fn criterion_1_bench_scales_linearly() {
    let _serial = serial();
    let started = Instant::now();
    let clients = [10usize, 15, 20, 25, 30];
    let reports: Vec<_> = clients
        .iter()
        .map(|&n| run_bench(n, &BenchOptions::default()).expect("bench run"))
        .collect();
    let elapsed = started.elapsed();
    let csv = bench_csv(&reports);

    // read the numbers back from the CSV, not from the structs
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("clients,avg_ms,total_ms,failed"));
    let rows: Vec<(f64, f64, f64, u64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let totals: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let r2 = r_squared(&xs, &totals);
    let max_avg = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let failed: u64 = rows.iter().map(|r| r.3).sum();

    let ok = rows.len() == 5 && r2 > 0.99 && max_avg < 50.0 && elapsed < Duration::from_secs(30) && failed == 0;
    verdict(
        1,
        "bench totals linear in client count",
        ok,
        &format!("R2={r2:.5}, max avg={max_avg:.3} ms, wall={:.2?}, failed={failed}", elapsed),
    );
    print!("{csv}");
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_event_id_mapping_golden() {
    let _serial = serial();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_replay.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let ids = EventIdMap::default();

    // (kind, username, ip) per line, written out by hand
    use EventKind::{FailedLogin as F, Login as I, Logoff as O};
    let expected: [(EventKind, &str, [u8; 4]); 20] = [
        (I, "alice", [10, 0, 0, 11]),
        (I, "bob", [10, 0, 0, 12]),
        (F, "mallory", [10, 0, 0, 66]),
        (F, "mallory", [10, 0, 0, 66]),
        (O, "alice", [10, 0, 0, 11]),
        (I, "carol", [10, 0, 0, 13]),
        (F, "eve", [10, 0, 0, 77]),
        (I, r"CORP\dave", [10, 0, 0, 14]),
        (O, "bob", [10, 0, 0, 12]),
        (F, "mallory", [10, 0, 0, 66]),
        (I, "alice", [10, 0, 0, 21]),
        (O, "carol", [10, 0, 0, 13]),
        (F, "", [10, 0, 0, 88]),
        (I, "erin", [10, 0, 0, 15]),
        (O, r"CORP\dave", [10, 0, 0, 14]),
        (F, "eve", [10, 0, 0, 77]),
        (I, "frank", [10, 0, 0, 16]),
        (O, "erin", [10, 0, 0, 15]),
        (F, "trent", [10, 0, 0, 99]),
        (O, "alice", [10, 0, 0, 21]),
    ];

    let mut mismatches = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    for (i, (line, (kind, user, ip))) in lines.iter().zip(expected.iter()).enumerate() {
        let got = parse_replay_line(line, &ids);
        let ok = match &got {
            Ok(Parsed::Event(ev)) => {
                let id_ok = match kind {
                    EventKind::Login => ev.event_id == 540,
                    EventKind::Logoff => ev.event_id == 538,
                    EventKind::FailedLogin => ev.event_id == 529,
                    EventKind::System => false,
                };
                ev.kind == *kind
                    && id_ok
                    && ev.username == *user
                    && ev.ip == Ipv4Addr::from(*ip)
                    && ev.ts == t0() + chrono::Duration::minutes(i as i64)
                    && ev.source == "dc01"
            }
            _ => false,
        };
        if !ok {
            mismatches.push(format!("line {}: {got:?}", i + 1));
        }
    }
    let ok = lines.len() == 20 && mismatches.is_empty();
    verdict(2, "event ids 540/538/529 map to login/logoff/failed-login", ok, &format!("{} lines, {} mismatches", lines.len(), mismatches.len()));
    assert!(ok, "{mismatches:#?}");
}

// ---------------------------------------------------------------- criterion 3

const BF_WINDOW: Duration = Duration::from_secs(60);

fn brute_force_rule() -> CorrelationRule {
    CorrelationRule::threshold("brute-force", EventPredicate::kind(EventKind::FailedLogin), 3, BF_WINDOW)
}

/// Indices of the events after which the sliding-window oracle fires. After
/// each firing only later events count for that address again.
fn threshold_oracle(events: &[SessionEvent], count: usize, window: Duration) -> Vec<usize> {
    let window = chrono::Duration::from_std(window).unwrap();
    let mut since_fire: HashMap<Ipv4Addr, usize> = HashMap::new();
    let mut fired = Vec::new();
    for (i, ev) in events.iter().enumerate() {
        if ev.kind != EventKind::FailedLogin {
            continue;
        }
        let start = since_fire.get(&ev.ip).copied().unwrap_or(0);
        let in_window = events[start..=i]
            .iter()
            .filter(|e| e.kind == EventKind::FailedLogin && e.ip == ev.ip && ev.ts - e.ts <= window)
            .count();
        if in_window >= count {
            fired.push(i);
            since_fire.insert(ev.ip, i + 1);
        }
    }
    fired
}

fn engine_firings(events: &[SessionEvent]) -> Vec<usize> {
    let mut engine = CorrelationEngine::new(vec![brute_force_rule()]);
    events
        .iter()
        .enumerate()
        .filter(|(_, ev)| !engine.observe(ev, ev.ts).is_empty())
        .map(|(i, _)| i)
        .collect()
}

#[test]
fn criterion_3_brute_force_threshold() {
    let _serial = serial();
    let x = Ipv4Addr::new(10, 0, 0, 66);
    let fail = |secs: i64| SessionEvent::classic(EventKind::FailedLogin, "mallory", x, t0() + chrono::Duration::seconds(secs));

    let mut engine = CorrelationEngine::new(vec![brute_force_rule()]);
    let first = engine.observe(&fail(0), t0());
    let second = engine.observe(&fail(20), t0());
    let third = engine.observe(&fail(40), t0());
    let exact_ok = first.is_empty() && second.is_empty() && third.len() == 1 && third[0].ip == x;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let ips = [x, Ipv4Addr::new(10, 0, 0, 67), Ipv4Addr::new(10, 0, 0, 68)];
    let gaps = [0i64, 1, 5, 19, 20, 21, 29, 30, 31, 59, 60, 61, 90];
    let mut disagreements = 0;
    let mut total_fires = 0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..40);
        let mut ts = t0();
        let events: Vec<SessionEvent> = (0..len)
            .map(|_| {
                ts += chrono::Duration::seconds(*gaps.choose(&mut rng).unwrap());
                let kind = if rng.gen_bool(0.8) { EventKind::FailedLogin } else { EventKind::Login };
                SessionEvent::classic(kind, "u", *ips.choose(&mut rng).unwrap(), ts)
            })
            .collect();
        let expected = threshold_oracle(&events, 3, BF_WINDOW);
        total_fires += expected.len();
        if engine_firings(&events) != expected {
            disagreements += 1;
        }
    }
    let ok = exact_ok && disagreements == 0;
    verdict(
        3,
        "threshold rule vs sliding-window oracle",
        ok,
        &format!("2 fails -> no block, 3rd -> block: {exact_ok}; 1000 sequences, {total_fires} oracle firings, {disagreements} disagreements"),
    );
    assert!(ok);
}

// ------------------------------------------------------ random input helpers

const USERS: [&str; 5] = ["alice", "bob", "carol", "dave", "erin"];

fn client(i: u8) -> Ipv4Addr {
    Ipv4Addr::new(10, 0, 0, i)
}

fn cidr(s: &str) -> Cidr {
    s.parse().unwrap()
}

fn random_cidr(rng: &mut impl Rng, pool: &[&str]) -> Cidr {
    cidr(pool.choose(rng).unwrap())
}

fn random_service(rng: &mut impl Rng) -> Service {
    let proto = *[Proto::Any, Proto::Tcp, Proto::Udp].choose(rng).unwrap();
    let port = match rng.gen_range(0..4) {
        0 => Port::Any,
        n => Port::Exact([22, 80, 443][n - 1]),
    };
    Service::new(proto, port)
}

const DSTS: [&str; 6] = ["0.0.0.0/0", "10.1.0.0/16", "10.1.2.0/24", "10.1.2.3/32", "192.168.0.0/16", "10.1.2.8/29"];
const SRCS: [&str; 6] = ["0.0.0.0/0", "10.0.0.0/28", "10.0.0.8/29", "10.0.0.3/32", "10.0.0.12/32", "172.16.0.0/12"];

fn random_policy(rng: &mut impl Rng) -> MetaPolicy {
    let n = rng.gen_range(0..9);
    let rules = (0..n)
        .map(|i| {
            let id = format!("r{i}");
            let action = if rng.gen_bool(0.5) { Action::Permit } else { Action::Deny };
            if rng.gen_bool(0.6) {
                MetaRule::Identity(IdentityRule {
                    id,
                    action,
                    user: USERS.choose(rng).unwrap().to_string(),
                    destination: random_cidr(rng, &DSTS),
                    service: random_service(rng),
                })
            } else {
                MetaRule::L3(L3Rule {
                    id,
                    action,
                    source: random_cidr(rng, &SRCS),
                    destination: random_cidr(rng, &DSTS),
                    service: random_service(rng),
                })
            }
        })
        .collect();
    MetaPolicy {
        version: rng.gen_range(1..5),
        rules,
        default_action: if rng.gen_bool(0.5) { Action::Permit } else { Action::Deny },
    }
}

fn random_login(rng: &mut impl Rng, ts: DateTime<Utc>) -> SessionEvent {
    SessionEvent::classic(EventKind::Login, *USERS.choose(rng).unwrap(), client(rng.gen_range(1..16)), ts)
}

fn random_event(rng: &mut impl Rng, ts: DateTime<Utc>) -> SessionEvent {
    let kind = *[EventKind::Login, EventKind::Logoff, EventKind::FailedLogin].choose(rng).unwrap();
    SessionEvent::classic(kind, *USERS.choose(rng).unwrap(), client(rng.gen_range(1..16)), ts)
}

fn random_table(rng: &mut impl Rng, now: DateTime<Utc>) -> IdentityTable {
    let mut table = IdentityTable::new(Duration::from_secs(3600));
    for _ in 0..rng.gen_range(0..12) {
        table.apply_event(&random_login(rng, now), now);
    }
    table
}

fn random_blocks(rng: &mut impl Rng, now: DateTime<Utc>) -> Vec<ActiveBlock> {
    let mut by_ip = BTreeMap::new();
    for _ in 0..rng.gen_range(0..4) {
        let ip = client(rng.gen_range(1..16));
        by_ip.insert(
            ip,
            ActiveBlock {
                ip,
                expires: now + chrono::Duration::seconds(900),
                rule_id: "brute-force".into(),
            },
        );
    }
    by_ip.into_values().collect()
}

fn random_query(rng: &mut impl Rng) -> PacketQuery {
    let src = if rng.gen_bool(0.85) {
        client(rng.gen_range(0..20))
    } else {
        Ipv4Addr::from(rng.gen::<u32>())
    };
    let dst = match rng.gen_range(0..6) {
        0 => Ipv4Addr::new(10, 1, 2, 3),
        1 => Ipv4Addr::new(10, 1, 2, 9),
        2 => Ipv4Addr::new(10, 1, 7, 7),
        3 => Ipv4Addr::new(192, 168, 4, 4),
        4 => Ipv4Addr::new(10, 1, 2, 12),
        _ => Ipv4Addr::from(rng.gen::<u32>()),
    };
    let proto = if rng.gen_bool(0.5) { PacketProto::Tcp } else { PacketProto::Udp };
    let dport = match rng.gen_range(0..5) {
        0 => 22,
        1 => 80,
        2 => 443,
        3 => 8080,
        _ => rng.gen_range(1..=u16::MAX),
    };
    PacketQuery { src, dst, proto, dport }
}

// ---------------------------------------------------------------- criterion 4

fn oracle_in(c: &Cidr, ip: Ipv4Addr) -> bool {
    let prefix = u32::from(c.prefix());
    if prefix == 0 {
        return true;
    }
    let mask = !0u32 << (32 - prefix);
    u32::from(ip) & mask == u32::from(c.addr()) & mask
}

/// Scan every rule and keep the lowest-priority match.
fn oracle_decide(rs: &ConcreteRuleset, q: &PacketQuery) -> Option<Decision> {
    let mut best: Option<&idfw::ConcreteRule> = None;
    for r in &rs.rules {
        let proto_ok = matches!(
            (r.proto, q.proto),
            (Proto::Any, _) | (Proto::Tcp, PacketProto::Tcp) | (Proto::Udp, PacketProto::Udp)
        );
        let port_ok = match r.dport {
            Port::Any => true,
            Port::Exact(p) => p == q.dport,
        };
        if oracle_in(&r.src, q.src) && oracle_in(&r.dst, q.dst) && proto_ok && port_ok && best.is_none_or(|b| r.priority < b.priority) {
            best = Some(r);
        }
    }
    best.map(|r| Decision {
        action: r.action,
        matched_priority: r.priority,
        origin_rule_id: r.origin_rule_id.clone(),
        generation: rs.generation,
    })
}

#[test]
fn criterion_4_decisions_match_linear_scan_oracle() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    let now = t0();
    let mut mismatches = 0u64;
    let mut evaluated = 0u64;
    let mut undecided = 0u64;
    for g in 0..100u64 {
        let policy = random_policy(&mut rng);
        let table = random_table(&mut rng, now);
        let blocks = random_blocks(&mut rng, now);
        let mut rs = compile(&policy, &table.snapshot(), &blocks);
        rs.generation = g + 1;
        let queries: Vec<PacketQuery> = (0..10_000).map(|_| random_query(&mut rng)).collect();
        let single: Vec<_> = queries.iter().map(|q| rs.evaluate(q)).collect();
        let batch = rs.evaluate_batch(&queries);
        for ((q, a), b) in queries.iter().zip(&single).zip(&batch) {
            let want = oracle_decide(&rs, q);
            undecided += u64::from(want.is_none());
            if format!("{a:?}") != format!("{want:?}") || a != b {
                mismatches += 1;
            }
            evaluated += 1;
        }
    }
    let ok = mismatches == 0 && undecided == 0;
    verdict(
        4,
        "evaluate() equals naive linear-scan oracle",
        ok,
        &format!("{evaluated} queries over 100 rulesets, {mismatches} mismatches, {undecided} without a verdict"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_compiler_determinism_and_incremental_equivalence() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let now = t0();
    let mut nondeterministic = 0;
    let mut diverged = 0;
    let mut unchanged = 0;
    for _ in 0..500 {
        let policy = random_policy(&mut rng);
        let mut table = random_table(&mut rng, now);
        let mut blocks = random_blocks(&mut rng, now);
        let snap = table.snapshot();

        let a = compile(&policy, &snap, &blocks);
        let b = compile(&policy, &snap, &blocks);
        if emit_text(&a) != emit_text(&b) {
            nondeterministic += 1;
        }

        let mut recompiler = Recompiler::new();
        let installed = recompiler.compile_next(&policy, &snap, &blocks, now);
        let later = now + chrono::Duration::seconds(rng.gen_range(1..60));
        let change: Change = if rng.gen_bool(0.8) {
            table.apply_event(&random_event(&mut rng, later), later).into()
        } else {
            let ip = client(rng.gen_range(1..16));
            let entry = BlockEntry {
                ip,
                created: later,
                expires: later + chrono::Duration::seconds(900),
                rule_id: "brute-force".into(),
            };
            blocks.retain(|b| b.ip != ip);
            blocks.push(ActiveBlock {
                ip,
                expires: entry.expires,
                rule_id: entry.rule_id.clone(),
            });
            blocks.sort_by_key(|b| b.ip);
            BlockChange {
                added: vec![entry],
                expired: vec![],
            }
            .into()
        };
        let snap = table.snapshot();
        let incremental = match recompiler.recompile_on_change(&change, &policy, &snap, &blocks, later) {
            Recompiled::Ruleset(rs) => rs,
            Recompiled::Unchanged => {
                unchanged += 1;
                installed
            }
        };
        let scratch = compile(&policy, &snap, &blocks);
        if emit_rule_lines(&incremental) != emit_rule_lines(&scratch) || incremental.rules != scratch.rules {
            diverged += 1;
        }
    }
    let ok = nondeterministic == 0 && diverged == 0;
    verdict(
        5,
        "compile deterministic, incremental recompile equals scratch",
        ok,
        &format!("500 triples, {nondeterministic} nondeterministic, {diverged} diverged, {unchanged} no-op changes"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 6

fn office_policy() -> MetaPolicy {
    idfw::parse_meta_policy(
        r#"<metapolicy version="3">
  <identity-rule id="web" action="permit">
    <user>alice</user>
    <destination>10.1.0.10/32</destination>
    <service proto="tcp" port="443"/>
  </identity-rule>
  <identity-rule id="ssh" action="permit">
    <user>alice</user>
    <destination>10.1.0.0/24</destination>
    <service proto="tcp" port="22"/>
  </identity-rule>
  <l3-rule id="guests" action="permit">
    <source>192.168.50.0/24</source>
    <destination>0.0.0.0/0</destination>
    <service proto="tcp" port="80"/>
  </l3-rule>
  <default action="deny"/>
</metapolicy>
"#,
    )
    .unwrap()
}

#[test]
fn criterion_6_logoff_and_lease_cleanup() {
    let _serial = serial();
    let policy = office_policy();
    let baseline = compile(&policy, &IdentitySnapshot::empty(), &[]);
    let ip = Ipv4Addr::new(10, 0, 0, 42);

    let mut p = Pipeline::new(policy.clone(), vec![], Duration::from_secs(3600), Arc::new(FirewallBackend::new()));
    p.start(Utc::now()).unwrap();
    p.handle_event(&SessionEvent::classic(EventKind::Login, "alice", ip, Utc::now()), Utc::now()).unwrap();
    let logged_in = p.current_ruleset().unwrap();
    p.handle_event(&SessionEvent::classic(EventKind::Logoff, "alice", ip, Utc::now()), Utc::now()).unwrap();
    let after_logoff = p.current_ruleset().unwrap();
    let logoff_ok = logged_in.rules.len() == baseline.rules.len() + 2
        && after_logoff.rules == baseline.rules
        && emit_rule_lines(&after_logoff) == emit_rule_lines(&baseline);

    let mut p = Pipeline::new(policy, vec![], Duration::from_secs(2), Arc::new(FirewallBackend::new()));
    p.start(Utc::now()).unwrap();
    p.handle_event(&SessionEvent::classic(EventKind::Login, "alice", ip, Utc::now()), Utc::now()).unwrap();
    let before = p.current_ruleset().unwrap();
    thread::sleep(Duration::from_secs(3));
    p.sweep(Utc::now()).unwrap();
    let after_sweep = p.current_ruleset().unwrap();
    let lease_ok = before.rules != baseline.rules
        && after_sweep.rules == baseline.rules
        && emit_rule_lines(&after_sweep) == emit_rule_lines(&baseline)
        && p.snapshot().is_empty();

    let ok = logoff_ok && lease_ok;
    verdict(
        6,
        "logoff and lease expiry restore the no-login ruleset",
        ok,
        &format!("logoff: {logoff_ok}, 2s lease + 3s wait + sweep: {lease_ok}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 7

fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

#[test]
fn criterion_7_blocks_take_precedence() {
    let _serial = serial();
    let x = Ipv4Addr::new(10, 0, 0, 66);
    let rules = vec![
        MetaRule::Identity(IdentityRule {
            id: "mallory-any".into(),
            action: Action::Permit,
            user: "mallory".into(),
            destination: Cidr::ANY,
            service: Service::ANY,
        }),
        MetaRule::Identity(IdentityRule {
            id: "mallory-web".into(),
            action: Action::Permit,
            user: "mallory".into(),
            destination: cidr("10.1.2.0/24"),
            service: Service::new(Proto::Tcp, Port::Exact(443)),
        }),
        MetaRule::L3(L3Rule {
            id: "host-x".into(),
            action: Action::Permit,
            source: Cidr::host(x),
            destination: Cidr::ANY,
            service: Service::ANY,
        }),
        MetaRule::L3(L3Rule {
            id: "lan".into(),
            action: Action::Permit,
            source: cidr("10.0.0.0/24"),
            destination: cidr("10.1.0.0/16"),
            service: Service::new(Proto::Udp, Port::Any),
        }),
        MetaRule::Identity(IdentityRule {
            id: "bob-ssh".into(),
            action: Action::Deny,
            user: "bob".into(),
            destination: cidr("10.1.2.3/32"),
            service: Service::new(Proto::Tcp, Port::Exact(22)),
        }),
    ];

    // the block comes from the correlation engine itself
    let now = t0();
    let mut engine = CorrelationEngine::new(vec![brute_force_rule()]);
    for s in 0..3 {
        engine.observe(&SessionEvent::classic(EventKind::FailedLogin, "mallory", x, now + chrono::Duration::seconds(s)), now);
    }
    let blocks = engine.active_blocks(now);
    assert_eq!(blocks.len(), 1);

    let mut table = IdentityTable::new(Duration::from_secs(3600));
    table.apply_event(&SessionEvent::classic(EventKind::Login, "mallory", x, now), now);
    table.apply_event(&SessionEvent::classic(EventKind::Login, "bob", Ipv4Addr::new(10, 0, 0, 67), now), now);
    let snap = table.snapshot();

    let dsts = [
        Ipv4Addr::new(10, 1, 2, 3),
        Ipv4Addr::new(10, 1, 2, 200),
        Ipv4Addr::new(10, 1, 9, 9),
        Ipv4Addr::new(8, 8, 8, 8),
    ];
    let ports = [22u16, 53, 80, 443, 8080];
    let mut checked = 0;
    let mut violations = 0;
    let mut permitted_without_block = 0;
    let perms = permutations(&rules);
    for (pi, order) in perms.iter().enumerate() {
        for default_action in [Action::Permit, Action::Deny] {
            let policy = MetaPolicy {
                version: pi as u64 + 1,
                rules: order.clone(),
                default_action,
            };
            let blocked = compile(&policy, &snap, &blocks);
            let unblocked = compile(&policy, &snap, &[]);
            for &dst in &dsts {
                for proto in [PacketProto::Tcp, PacketProto::Udp] {
                    for &dport in &ports {
                        let q = PacketQuery { src: x, dst, proto, dport };
                        let d = blocked.evaluate(&q).unwrap();
                        if d.action != Action::Deny || d.origin_rule_id != ORIGIN_BLOCK {
                            violations += 1;
                        }
                        if unblocked.evaluate(&q).unwrap().action == Action::Permit {
                            permitted_without_block += 1;
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    let ok = perms.len() == 120 && violations == 0 && permitted_without_block == checked;
    verdict(
        7,
        "blocked source denied by __block__ under every rule order",
        ok,
        &format!("{} orders x 2 defaults, {checked} queries, {violations} not blocked, {permitted_without_block} would be permitted without the block", perms.len()),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 8

fn random_decoy(rng: &mut impl Rng) -> String {
    let ip = Ipv4Addr::from(rng.gen::<u32>());
    match rng.gen_range(0..4) {
        0 => ip.to_string(),
        1 => format!("[{ip}]"),
        2 => format!("{ip}:{}", rng.gen_range(1..65535)),
        _ => format!("::ffff:{ip}"),
    }
}

fn fuzzed_body(rng: &mut impl Rng, user: &str) -> String {
    let d1 = random_decoy(rng);
    let d2 = random_decoy(rng);
    let d3 = random_decoy(rng);
    let pri = rng.gen_range(0..=191);
    let host = if rng.gen_bool(0.5) { d3.clone() } else { "gw01".into() };
    match rng.gen_range(0..4) {
        0 => format!("<{pri}>Oct 16 10:00:00 {host} sshd[4242]: Accepted password for {user} from {d1} port 22 ssh2"),
        1 => format!("<{pri}>Oct 16 10:00:00 {host} sshd[1]: Accepted publickey for {user} from {d1} port {} ssh2: RSA SHA256:{d2}", rng.gen_range(1..65535)),
        2 => format!("<{pri}>Oct  6 01:02:03 {host} sshd[77]: Accepted keyboard-interactive/pam for invalid user {user} from {d1} port 22 ssh2 via {d2}"),
        _ => format!("Accepted password for {user} from {d1} port 22 ssh2 client_ip={d2} x-forwarded-for={d3}"),
    }
}

#[test]
fn criterion_8_binding_ip_is_syslog_sender() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0008);
    let patterns = default_patterns(&EventIdMap::default());

    let listener = SyslogListener::bind("127.0.0.1:0").unwrap();
    let target = listener.local_addr().unwrap();
    let shutdown = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let worker = {
        let shutdown = Arc::clone(&shutdown);
        let patterns = patterns.clone();
        thread::spawn(move || listener.run(&patterns, &shutdown, |ev| tx.send(ev).unwrap()))
    };

    // senders on distinct loopback addresses where the host allows it
    let mut senders: Vec<(Ipv4Addr, UdpSocket)> = Vec::new();
    for last in [1u8, 23, 57, 101, 199] {
        let addr = Ipv4Addr::new(127, 0, 0, last);
        if let Ok(sock) = UdpSocket::bind((addr, 0)) {
            senders.push((addr, sock));
        }
    }
    assert!(!senders.is_empty());

    let mut table = IdentityTable::new(Duration::from_secs(3600));
    let mut direct_bad = 0;
    let mut udp_bad = 0;
    let mut expected_users = Vec::new();
    for i in 0..200 {
        let user = if rng.gen_bool(0.2) { random_decoy(&mut rng).replace([':', '[', ']'], "") } else { format!("u{i}") };
        let body = fuzzed_body(&mut rng, &user);

        let fake_sender = Ipv4Addr::from(rng.gen::<u32>());
        match parse_syslog_datagram(body.as_bytes(), fake_sender, &patterns, Utc::now()) {
            Ok(Parsed::Event(ev)) if ev.ip == fake_sender && ev.username == user => {}
            other => {
                eprintln!("direct parse mismatch for {body:?}: {other:?}");
                direct_bad += 1;
            }
        }

        let (addr, sock) = senders.choose(&mut rng).unwrap();
        sock.send_to(body.as_bytes(), target).unwrap();
        expected_users.push((user, *addr));
        // bound the backlog so the kernel buffer never drops anything
        if i % 20 == 19 {
            thread::sleep(Duration::from_millis(5));
        }
    }

    let mut received = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(10);
    while received.len() < 200 && Instant::now() < deadline {
        if let Ok(ev) = rx.recv_timeout(Duration::from_millis(100)) {
            received.push(ev);
        }
    }
    shutdown.store(true, Ordering::Relaxed);
    let stats = worker.join().unwrap();

    for (ev, (user, addr)) in received.iter().zip(&expected_users) {
        table.apply_event(ev, Utc::now());
        if ev.ip != *addr || &ev.username != user || ev.source != addr.to_string() {
            udp_bad += 1;
        }
    }
    let sender_addrs: Vec<Ipv4Addr> = senders.iter().map(|s| s.0).collect();
    let bindings_ok = table.snapshot().bindings.iter().all(|b| sender_addrs.contains(&b.ip));

    let ok = received.len() == 200 && direct_bad == 0 && udp_bad == 0 && bindings_ok;
    verdict(
        8,
        "binding address is always the syslog sender",
        ok,
        &format!(
            "200 bodies, {} senders; direct parse mismatches {direct_bad}; UDP received {}/200, mismatches {udp_bad}, listener errors {}",
            senders.len(),
            received.len(),
            stats.errors
        ),
    );
    assert!(ok);
}
