use std::collections::HashSet;
use std::fs;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use idfw::bench::{bench_csv, emit_bench_csv, reference_csv, run_bench, BenchOptions, BenchReport};
use idfw::compiler::{compile, emit_text, parse_rule_text};
use idfw::config::{ConfigError, PipelineConfig};
use idfw::firewall_backend::write_rule_file;
use idfw::identity_table::IdentityTable;
use idfw::meta_policy::parse_meta_policy;
use idfw::pipeline::{load_correlation, replay_file, run_pipeline, PipelineError, RunOptions};
use idfw::validation::ValidationReport;
use idfw::{IdentitySnapshot, PacketProto, PacketQuery};

const EXIT_RUNTIME: u8 = 1;
const EXIT_VALIDATION: u8 = 2;

#[derive(Parser)]
#[command(name = "idfw", version, about = "Agentless identity-based firewall")]
struct Cli {
    /// Configuration file (TOML).
    #[arg(long, global = true, env = "IDFW_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the daemon: ingest events, recompile and install on every change.
    Run(RunArgs),
    /// Compile a policy against a bindings file once.
    Compile {
        #[arg(long)]
        policy: PathBuf,
        /// Identity table JSON as written by `idfw state`, or a bare array.
        #[arg(long)]
        bindings: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a meta-policy document.
    Check {
        policy: PathBuf,
        /// Newline-separated list of directory accounts to lint against.
        #[arg(long)]
        known_users: Option<PathBuf>,
        /// Also validate a correlation rule document.
        #[arg(long)]
        correlation: Option<PathBuf>,
    },
    /// Evaluate a packet against the persisted rule file.
    Query {
        #[arg(long)]
        src: Ipv4Addr,
        #[arg(long)]
        dst: Ipv4Addr,
        #[arg(long)]
        proto: PacketProto,
        #[arg(long)]
        dport: u16,
        /// Defaults to installer.rule_file from the configuration.
        #[arg(long)]
        rule_file: Option<PathBuf>,
    },
    /// Print the identity table as JSON.
    State {
        /// State file written by the daemon (defaults to identity.state_file).
        #[arg(long, conflicts_with = "replay")]
        file: Option<PathBuf>,
        /// Build the table offline from a replay file instead.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Measure login-to-policy-active latency.
    Bench {
        /// Comma-separated client counts.
        #[arg(long, value_delimiter = ',')]
        clients: Option<Vec<usize>>,
        /// CSV output (clients,avg_ms,total_ms,failed).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write measured values next to the literature reference values.
        #[arg(long)]
        reference_out: Option<PathBuf>,
        #[arg(long, value_parser = humantime::parse_duration)]
        timeout: Option<Duration>,
        #[arg(long, value_parser = humantime::parse_duration)]
        poll_interval: Option<Duration>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Stop after the replay file has been consumed.
    #[arg(long)]
    once: bool,
    /// Experimental: coalesce events arriving within this window into one install.
    #[arg(long, value_parser = humantime::parse_duration)]
    batch_window: Option<Duration>,
    /// Overrides policy.path.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Overrides replay.path.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Overrides correlation.rules_path.
    #[arg(long)]
    correlation: Option<PathBuf>,
    /// Overrides installer.rule_file.
    #[arg(long)]
    rule_file: Option<PathBuf>,
    /// Overrides identity.state_file.
    #[arg(long)]
    state_file: Option<PathBuf>,
    /// Overrides syslog.bind, e.g. 0.0.0.0:5514.
    #[arg(long)]
    syslog_bind: Option<String>,
    /// Overrides identity.lease, e.g. 10h.
    #[arg(long, value_parser = humantime::parse_duration)]
    lease: Option<Duration>,
    /// Overrides identity.sweep_interval.
    #[arg(long, value_parser = humantime::parse_duration)]
    sweep_interval: Option<Duration>,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::load(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_validation(&e) {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|cause| {
        cause.is::<ValidationReport>()
            || matches!(cause.downcast_ref::<ConfigError>(), Some(ConfigError::Invalid(_) | ConfigError::Parse(_)))
            || cause.downcast_ref::<PipelineError>().is_some_and(PipelineError::is_validation)
    })
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Run(args) => cmd_run(config, args),
        Command::Compile { policy, bindings, out } => cmd_compile(&policy, &bindings, out.as_deref()),
        Command::Check {
            policy,
            known_users,
            correlation,
        } => cmd_check(&policy, known_users.as_deref(), correlation.as_deref()),
        Command::Query {
            src,
            dst,
            proto,
            dport,
            rule_file,
        } => {
            let path = rule_file
                .or(config.installer.rule_file)
                .context("no rule file: pass --rule-file or set installer.rule_file")?;
            cmd_query(&path, PacketQuery { src, dst, proto, dport })
        }
        Command::State { file, replay } => cmd_state(&config, file, replay),
        Command::Bench {
            clients,
            out,
            reference_out,
            timeout,
            poll_interval,
        } => {
            let mut opts = BenchOptions::from(&config.bench);
            opts.timeout = timeout.unwrap_or(opts.timeout);
            opts.poll_interval = poll_interval.unwrap_or(opts.poll_interval);
            let clients = clients.unwrap_or_else(|| config.bench.clients.clone());
            cmd_bench(&clients, &opts, out.as_deref(), reference_out.as_deref())
        }
    }
}

fn cmd_run(mut config: PipelineConfig, args: RunArgs) -> Result<ExitCode> {
    // flags win over the file
    if args.policy.is_some() {
        config.policy.path = args.policy;
    }
    if args.replay.is_some() {
        config.replay.path = args.replay;
    }
    if args.correlation.is_some() {
        config.correlation.rules_path = args.correlation;
    }
    if args.rule_file.is_some() {
        config.installer.rule_file = args.rule_file;
    }
    if args.state_file.is_some() {
        config.identity.state_file = args.state_file;
    }
    if args.syslog_bind.is_some() {
        config.syslog.bind = args.syslog_bind;
    }
    if let Some(lease) = args.lease {
        config.identity.lease = lease;
    }
    if let Some(interval) = args.sweep_interval {
        config.identity.sweep_interval = interval;
    }

    let shutdown = Arc::new(AtomicBool::new(false));
    {
        let shutdown = Arc::clone(&shutdown);
        ctrlc::set_handler(move || shutdown.store(true, Ordering::Relaxed)).context("installing signal handler")?;
    }
    let summary = run_pipeline(
        &config,
        RunOptions {
            once: args.once,
            batch_window: args.batch_window,
        },
        shutdown,
    )?;
    println!(
        "final generation {} ({} events, {} installs, {} bindings)",
        summary.generation,
        summary.stats.events,
        summary.stats.installs,
        summary.snapshot.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_compile(policy: &Path, bindings: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let text = fs::read_to_string(policy).with_context(|| policy.display().to_string())?;
    let policy = parse_meta_policy(&text).map_err(|r| anyhow::Error::new(r).context(policy.display().to_string()))?;
    let text = fs::read_to_string(bindings).with_context(|| bindings.display().to_string())?;
    let snapshot = IdentitySnapshot::from_json(&text).with_context(|| bindings.display().to_string())?;
    let mut ruleset = compile(&policy, &snapshot, &[]);
    ruleset.generation = 1;
    match out {
        Some(path) => {
            write_rule_file(&ruleset, path)?;
            info!("wrote {} rules to {}", ruleset.rules.len(), path.display());
        }
        None => print!("{}", emit_text(&ruleset)),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(policy_path: &Path, known_users: Option<&Path>, correlation: Option<&Path>) -> Result<ExitCode> {
    let text = fs::read_to_string(policy_path).with_context(|| policy_path.display().to_string())?;
    let mut ok = true;
    match parse_meta_policy(&text) {
        Ok(policy) => {
            println!("{}: ok ({} rules, default {})", policy_path.display(), policy.rules.len(), policy.default_action);
            if let Some(path) = known_users {
                let users: HashSet<String> = fs::read_to_string(path)
                    .with_context(|| path.display().to_string())?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .map(String::from)
                    .collect();
                for w in policy.validate_against_directory(&users) {
                    println!("{w}");
                }
            }
        }
        Err(report) => {
            ok = false;
            print!("{}: {report}", policy_path.display());
        }
    }
    if let Some(path) = correlation {
        match load_correlation(path) {
            Ok(rules) => println!("{}: ok ({} rules)", path.display(), rules.len()),
            Err(e) if e.is_validation() => {
                ok = false;
                print!("{e}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VALIDATION)
    })
}

fn cmd_query(path: &Path, query: PacketQuery) -> Result<ExitCode> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let ruleset = parse_rule_text(&text).with_context(|| path.display().to_string())?;
    let Some(d) = ruleset.evaluate(&query) else {
        bail!("no rule in {} matches the query", path.display());
    };
    println!(
        "{} priority={} origin={} generation={}",
        d.action, d.matched_priority, d.origin_rule_id, d.generation
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_state(config: &PipelineConfig, file: Option<PathBuf>, replay: Option<PathBuf>) -> Result<ExitCode> {
    let snapshot = if let Some(replay) = replay {
        let (tx, rx) = mpsc::channel();
        replay_file(&replay, &config.eventlog.id_map, &tx)?;
        drop(tx);
        let mut table = IdentityTable::new(config.identity.lease);
        for ev in rx {
            table.apply_event(&ev, chrono::Utc::now());
        }
        table.snapshot()
    } else {
        let path = file
            .or_else(|| config.identity.state_file.clone())
            .context("no state file: pass --file, --replay, or set identity.state_file")?;
        let text = fs::read_to_string(&path).with_context(|| path.display().to_string())?;
        IdentitySnapshot::from_json(&text).with_context(|| path.display().to_string())?
    };
    println!("{}", snapshot.to_json());
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(clients: &[usize], opts: &BenchOptions, out: Option<&Path>, reference_out: Option<&Path>) -> Result<ExitCode> {
    let mut reports: Vec<BenchReport> = Vec::with_capacity(clients.len());
    for &n in clients {
        let report = run_bench(n, opts)?;
        info!(
            "{n} clients: avg {:.3} ms, serialized total {:.3} ms, {} failed",
            report.avg.as_secs_f64() * 1e3,
            report.total_serialized.as_secs_f64() * 1e3,
            report.failed
        );
        reports.push(report);
    }
    match out {
        Some(path) => emit_bench_csv(&reports, path)?,
        None => print!("{}", bench_csv(&reports)),
    }
    if let Some(path) = reference_out {
        fs::write(path, reference_csv(&reports)).with_context(|| path.display().to_string())?;
    }
    if reports.iter().any(|r| !r.is_complete()) {
        eprintln!("warning: some clients timed out; report is incomplete");
        return Ok(ExitCode::from(EXIT_RUNTIME));
    }
    Ok(ExitCode::SUCCESS)
}
