//! The XML meta-policy: identity rules keyed on usernames, plain L3 rules
//! for unauthenticated traffic, and an explicit default action.
//!
//! ```xml
//! <metapolicy version="1">
//!   <identity-rule id="r1" action="permit">
//!     <user>CORP\alice</user>
//!     <destination>10.1.0.10/32</destination>
//!     <service proto="tcp" port="443"/>
//!   </identity-rule>
//!   <l3-rule id="g1" action="permit">
//!     <source>192.168.50.0/24</source>
//!     <destination>10.1.0.20/32</destination>
//!     <service proto="tcp" port="80"/>
//!   </l3-rule>
//!   <default action="deny"/>
//! </metapolicy>
//! ```
//!
//! Document order is match order once compiled.

use std::collections::HashSet;
use std::fmt::Write as _;

use roxmltree::{Document, Node};

use crate::identity_table::user_key;
use crate::net::{Action, Cidr, Port, Proto};
use crate::validation::ValidationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Service {
    pub proto: Proto,
    pub port: Port,
}

impl Service {
    pub const ANY: Service = Service {
        proto: Proto::Any,
        port: Port::Any,
    };

    pub fn new(proto: Proto, port: Port) -> Self {
        Service { proto, port }
    }
}

/// A rule whose source is a user identity, resolved at compile time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityRule {
    pub id: String,
    pub action: Action,
    pub user: String,
    pub destination: Cidr,
    pub service: Service,
}

/// A classic address-based rule (guest devices, phones).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct L3Rule {
    pub id: String,
    pub action: Action,
    pub source: Cidr,
    pub destination: Cidr,
    pub service: Service,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetaRule {
    Identity(IdentityRule),
    L3(L3Rule),
}

impl MetaRule {
    pub fn id(&self) -> &str {
        match self {
            MetaRule::Identity(r) => &r.id,
            MetaRule::L3(r) => &r.id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaPolicy {
    pub version: u64,
    pub rules: Vec<MetaRule>,
    pub default_action: Action,
}

/// Lint finding from [`MetaPolicy::validate_against_directory`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Warning {
    pub rule_id: String,
    pub message: String,
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "warning: rule {}: {}", self.rule_id, self.message)
    }
}

impl MetaPolicy {
    pub fn identity_rules(&self) -> impl Iterator<Item = &IdentityRule> {
        self.rules.iter().filter_map(|r| match r {
            MetaRule::Identity(r) => Some(r),
            MetaRule::L3(_) => None,
        })
    }

    /// One warning per identity rule naming a user absent from `known_users`.
    pub fn validate_against_directory(&self, known_users: &HashSet<String>) -> Vec<Warning> {
        let known: HashSet<String> = known_users.iter().map(|u| user_key(u)).collect();
        self.identity_rules()
            .filter(|r| !known.contains(&user_key(&r.user)))
            .map(|r| Warning {
                rule_id: r.id.clone(),
                message: format!("user `{}` is not in the directory", r.user),
            })
            .collect()
    }

    /// Canonical XML rendering. Parsing it yields an equal policy.
    pub fn to_xml(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "<metapolicy version=\"{}\">", self.version);
        for rule in &self.rules {
            match rule {
                MetaRule::Identity(r) => {
                    let _ = writeln!(
                        out,
                        "  <identity-rule id=\"{}\" action=\"{}\">",
                        escape(&r.id),
                        r.action
                    );
                    let _ = writeln!(out, "    <user>{}</user>", escape(&r.user));
                    let _ = writeln!(out, "    <destination>{}</destination>", r.destination);
                    write_service(&mut out, r.service);
                    out.push_str("  </identity-rule>\n");
                }
                MetaRule::L3(r) => {
                    let _ = writeln!(
                        out,
                        "  <l3-rule id=\"{}\" action=\"{}\">",
                        escape(&r.id),
                        r.action
                    );
                    let _ = writeln!(out, "    <source>{}</source>", r.source);
                    let _ = writeln!(out, "    <destination>{}</destination>", r.destination);
                    write_service(&mut out, r.service);
                    out.push_str("  </l3-rule>\n");
                }
            }
        }
        let _ = writeln!(out, "  <default action=\"{}\"/>", self.default_action);
        out.push_str("</metapolicy>\n");
        out
    }
}

fn write_service(out: &mut String, service: Service) {
    match service.port {
        Port::Any => {
            let _ = writeln!(out, "    <service proto=\"{}\"/>", service.proto);
        }
        Port::Exact(p) => {
            let _ = writeln!(out, "    <service proto=\"{}\" port=\"{p}\"/>", service.proto);
        }
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Parse and validate a meta-policy document, collecting every violation.
pub fn parse_meta_policy(document: &str) -> Result<MetaPolicy, ValidationReport> {
    let mut report = ValidationReport::default();
    let doc = match Document::parse(document) {
        Ok(d) => d,
        Err(e) => {
            report.push("document", format!("malformed XML: {e}"));
            return Err(report);
        }
    };

    let root = doc.root_element();
    if root.tag_name().name() != "metapolicy" {
        report.push(
            "document",
            format!("root element must be <metapolicy>, found <{}>", root.tag_name().name()),
        );
        return Err(report);
    }
    check_attributes(root, "metapolicy", &["version"], &mut report);
    let version = match root.attribute("version") {
        None => {
            report.push("metapolicy", "missing `version` attribute");
            0
        }
        Some(v) => v.trim().parse::<u64>().unwrap_or_else(|_| {
            report.push("metapolicy", format!("invalid version `{v}`"));
            0
        }),
    };

    let mut rules = Vec::new();
    let mut default_action = None;
    let mut seen_ids = HashSet::new();

    for (index, node) in root.children().filter(Node::is_element).enumerate() {
        let name = node.tag_name().name();
        match name {
            "identity-rule" | "l3-rule" => {
                // a rule that fails to parse still claims its id
                if let Some(id) = node.attribute("id").filter(|id| !id.trim().is_empty()) {
                    if !seen_ids.insert(id.to_string()) {
                        report.push(format!("rule {id}"), format!("duplicate rule id \"{id}\""));
                    }
                }
                if let Some(rule) = parse_rule(node, index, &mut report) {
                    rules.push(rule);
                }
            }
            "default" => {
                check_attributes(node, "default", &["action"], &mut report);
                if default_action.is_some() {
                    report.push("default", "more than one <default> element");
                }
                match parse_action(node, "default", &mut report) {
                    Some(a) => default_action = Some(a),
                    None => default_action = default_action.or(Some(Action::Deny)),
                }
            }
            other => report.push("metapolicy", format!("unknown element <{other}>")),
        }
    }

    let Some(default_action) = default_action else {
        report.push("metapolicy", "missing <default> element");
        return Err(report);
    };

    report.into_result(MetaPolicy {
        version,
        rules,
        default_action,
    })
}

fn check_attributes(node: Node, location: &str, allowed: &[&str], report: &mut ValidationReport) {
    for attr in node.attributes() {
        if !allowed.contains(&attr.name()) {
            report.push(location, format!("unknown attribute `{}`", attr.name()));
        }
    }
}

fn parse_action(node: Node, location: &str, report: &mut ValidationReport) -> Option<Action> {
    match node.attribute("action") {
        None => {
            report.push(location, "missing `action` attribute");
            None
        }
        Some(a) => match a.parse() {
            Ok(a) => Some(a),
            Err(e) => {
                report.push(location, e.to_string());
                None
            }
        },
    }
}

fn parse_rule(node: Node, index: usize, report: &mut ValidationReport) -> Option<MetaRule> {
    let kind = node.tag_name().name();
    let identity = kind == "identity-rule";
    let before = report.len();

    check_attributes(node, kind, &["id", "action"], report);
    let id = match node.attribute("id") {
        Some(id) if !id.trim().is_empty() => id.to_string(),
        _ => {
            report.push(format!("{kind} #{}", index + 1), "missing `id` attribute");
            format!("#{}", index + 1)
        }
    };
    let location = format!("rule {id}");
    let action = parse_action(node, &location, report);

    let mut user = None;
    let mut source = None;
    let mut destination = None;
    let mut service = None;

    for child in node.children().filter(Node::is_element) {
        let name = child.tag_name().name();
        let slot_taken = match name {
            "user" if identity => {
                let text = child.text().unwrap_or("").trim();
                if text.is_empty() {
                    report.push(&location, "empty <user>");
                }
                user.replace(text.to_string()).is_some()
            }
            "source" if !identity => {
                let c = parse_cidr(child, &location, report);
                source.replace(c).is_some()
            }
            "destination" => {
                let c = parse_cidr(child, &location, report);
                destination.replace(c).is_some()
            }
            "service" => {
                let s = parse_service(child, &location, report);
                service.replace(s).is_some()
            }
            other => {
                report.push(&location, format!("unknown element <{other}> in <{kind}>"));
                false
            }
        };
        if slot_taken {
            report.push(&location, format!("duplicate <{name}> element"));
        }
    }

    if identity && user.is_none() {
        report.push(&location, "missing <user> element");
    }
    if !identity && source.is_none() {
        report.push(&location, "missing <source> element");
    }
    if destination.is_none() {
        report.push(&location, "missing <destination> element");
    }
    if report.len() > before {
        return None;
    }

    let action = action?;
    let destination = destination.flatten()?;
    let service = service.flatten().unwrap_or(Service::ANY);
    Some(if identity {
        MetaRule::Identity(IdentityRule {
            id,
            action,
            user: user?,
            destination,
            service,
        })
    } else {
        MetaRule::L3(L3Rule {
            id,
            action,
            source: source.flatten()?,
            destination,
            service,
        })
    })
}

fn parse_cidr(node: Node, location: &str, report: &mut ValidationReport) -> Option<Cidr> {
    let text = node.text().unwrap_or("").trim();
    match text.parse::<Cidr>() {
        Ok(c) => Some(c),
        Err(e) => {
            report.push(location, format!("<{}>: {e}", node.tag_name().name()));
            None
        }
    }
}

fn parse_service(node: Node, location: &str, report: &mut ValidationReport) -> Option<Service> {
    check_attributes(node, location, &["proto", "port"], report);
    let proto = match node.attribute("proto").map(str::parse::<Proto>) {
        None => Some(Proto::Any),
        Some(Ok(p)) => Some(p),
        Some(Err(e)) => {
            report.push(location, format!("<service>: {e}"));
            None
        }
    };
    let port = match node.attribute("port").map(str::parse::<Port>) {
        None => Some(Port::Any),
        Some(Ok(p)) => Some(p),
        Some(Err(e)) => {
            report.push(location, format!("<service>: {e}"));
            None
        }
    };
    Some(Service::new(proto?, port?))
}
