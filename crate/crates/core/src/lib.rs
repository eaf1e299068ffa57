//! Agentless identity-based firewall engine.
//!
//! Authentication events (event-log replays and syslog) are normalized by
//! [`event_ingest`], translated into username/IP bindings by
//! [`identity_table`], joined with the XML [`meta_policy`] by the
//! [`compiler`], and installed atomically into the [`firewall_backend`].
//! The [`correlation`] engine watches the same stream and blocks offending
//! addresses. [`pipeline`] wires the stages together and [`bench`] measures
//! login-to-policy-active latency.
//!
//! With the default `parallel` feature, batch classification runs on rayon.

pub mod bench;
pub mod compiler;
pub mod config;
pub mod correlation;
pub mod event_ingest;
pub mod firewall_backend;
pub mod identity_table;
pub mod meta_policy;
pub mod net;
pub mod pipeline;
pub mod validation;

pub use compiler::{compile, emit_text, ConcreteRule, ConcreteRuleset, Decision, PacketQuery, Recompiler};
pub use event_ingest::{EventKind, SessionEvent};
pub use firewall_backend::FirewallBackend;
pub use identity_table::{IdentitySnapshot, IdentityTable};
pub use meta_policy::{parse_meta_policy, MetaPolicy};
pub use net::{Action, Cidr, PacketProto, Port, Proto};
