//! Daemon configuration, read from a TOML file.
//!
//! ```toml
//! [syslog]
//! bind = "0.0.0.0:5514"
//!
//! [replay]
//! path = "events.jsonl"
//!
//! [eventlog.id_map]
//! login = [540, 4624]
//! logoff = [538, 4634]
//! failed = [529, 4625]
//! system = [7001]
//!
//! [identity]
//! lease = "10h"
//! sweep_interval = "30s"
//!
//! [policy]
//! path = "policy.xml"
//!
//! [correlation]
//! rules_path = "correlation.xml"
//!
//! [installer]
//! rule_file = "/var/lib/idfw/rules.txt"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_ingest::{default_pattern_specs, EventIdMap, SyslogPattern, SyslogPatternSpec};
use crate::identity_table::{DEFAULT_LEASE, DEFAULT_SWEEP_INTERVAL};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub syslog: SyslogConfig,
    pub replay: ReplayConfig,
    pub eventlog: EventLogConfig,
    pub identity: IdentityConfig,
    pub policy: PolicyConfig,
    pub correlation: CorrelationConfig,
    pub installer: InstallerConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyslogConfig {
    pub bind: Option<String>,
    /// Replaces the stock sshd patterns when present.
    pub patterns: Option<Vec<SyslogPatternSpec>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventLogConfig {
    pub id_map: EventIdMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentityConfig {
    #[serde(with = "humantime_serde")]
    pub lease: Duration,
    #[serde(with = "humantime_serde")]
    pub sweep_interval: Duration,
    /// Where the daemon dumps the identity table after every change.
    pub state_file: Option<PathBuf>,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        IdentityConfig {
            lease: DEFAULT_LEASE,
            sweep_interval: DEFAULT_SWEEP_INTERVAL,
            state_file: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationConfig {
    pub rules_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstallerConfig {
    pub rule_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub clients: Vec<usize>,
    #[serde(with = "humantime_serde")]
    pub timeout: Duration,
    #[serde(with = "humantime_serde")]
    pub poll_interval: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            clients: vec![10, 15, 20, 25, 30],
            timeout: Duration::from_secs(10),
            poll_interval: Duration::from_millis(1),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Read `path` and resolve relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.replay.path);
        fix(&mut self.identity.state_file);
        fix(&mut self.policy.path);
        fix(&mut self.correlation.rules_path);
        fix(&mut self.installer.rule_file);
    }

    /// Compiled syslog patterns: the configured set, or the stock sshd pair.
    pub fn syslog_patterns(&self) -> Result<Vec<SyslogPattern>, ConfigError> {
        let specs = self.syslog.patterns.clone().unwrap_or_else(default_pattern_specs);
        specs
            .iter()
            .map(|s| SyslogPattern::compile(s, &self.eventlog.id_map))
            .collect::<Result<_, _>>()
            .map_err(|e| ConfigError::Invalid(vec![e.to_string()]))
    }

    /// Startup checks for the daemon: the policy is set, referenced input
    /// files exist and durations are positive.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        match &self.policy.path {
            None => problems.push("policy.path is required".to_string()),
            Some(p) if !p.is_file() => problems.push(format!("policy file {} does not exist", p.display())),
            Some(_) => {}
        }
        for (key, path) in [
            ("replay.path", &self.replay.path),
            ("correlation.rules_path", &self.correlation.rules_path),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    problems.push(format!("{key}: {} does not exist", p.display()));
                }
            }
        }
        if self.identity.lease.is_zero() {
            problems.push("identity.lease must be positive".into());
        }
        if self.identity.sweep_interval.is_zero() {
            problems.push("identity.sweep_interval must be positive".into());
        }
        if self.bench.timeout.is_zero() || self.bench.poll_interval.is_zero() {
            problems.push("bench durations must be positive".into());
        }
        if let Err(ConfigError::Invalid(mut e)) = self.syslog_patterns() {
            problems.append(&mut e);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }
}
