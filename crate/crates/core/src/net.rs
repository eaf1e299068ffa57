//! Address, protocol and verdict primitives shared by the policy, compiler
//! and backend layers.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Verdict attached to a rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Permit,
    Deny,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Permit => "permit",
            Action::Deny => "deny",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = NetParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "permit" => Ok(Action::Permit),
            "deny" => Ok(Action::Deny),
            other => Err(NetParseError::Action(other.to_string())),
        }
    }
}

/// Protocol selector on a rule. `Any` matches both TCP and UDP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proto {
    Tcp,
    Udp,
    Any,
}

impl Proto {
    pub fn as_str(self) -> &'static str {
        match self {
            Proto::Tcp => "tcp",
            Proto::Udp => "udp",
            Proto::Any => "any",
        }
    }

    pub fn matches(self, packet: PacketProto) -> bool {
        matches!(
            (self, packet),
            (Proto::Any, _) | (Proto::Tcp, PacketProto::Tcp) | (Proto::Udp, PacketProto::Udp)
        )
    }
}

impl fmt::Display for Proto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Proto {
    type Err = NetParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(Proto::Tcp),
            "udp" => Ok(Proto::Udp),
            "any" => Ok(Proto::Any),
            other => Err(NetParseError::Proto(other.to_string())),
        }
    }
}

/// Concrete transport protocol of a packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PacketProto {
    Tcp,
    Udp,
}

impl fmt::Display for PacketProto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PacketProto::Tcp => "tcp",
            PacketProto::Udp => "udp",
        })
    }
}

impl FromStr for PacketProto {
    type Err = NetParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(PacketProto::Tcp),
            "udp" => Ok(PacketProto::Udp),
            other => Err(NetParseError::Proto(other.to_string())),
        }
    }
}

/// Destination port selector: a single port in 1..=65535, or any port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Port {
    Any,
    Exact(u16),
}

impl Port {
    pub fn matches(self, port: u16) -> bool {
        match self {
            Port::Any => true,
            Port::Exact(p) => p == port,
        }
    }
}

impl fmt::Display for Port {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Port::Any => f.write_str("any"),
            Port::Exact(p) => write!(f, "{p}"),
        }
    }
}

impl FromStr for Port {
    type Err = NetParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "any" {
            return Ok(Port::Any);
        }
        match s.parse::<u16>() {
            Ok(0) | Err(_) => Err(NetParseError::Port(s.to_string())),
            Ok(p) => Ok(Port::Exact(p)),
        }
    }
}

/// An IPv4 network in CIDR notation. The address is always the network
/// address: host bits below the prefix are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cidr {
    addr: Ipv4Addr,
    prefix: u8,
}

impl Cidr {
    pub const ANY: Cidr = Cidr {
        addr: Ipv4Addr::UNSPECIFIED,
        prefix: 0,
    };

    pub fn new(addr: Ipv4Addr, prefix: u8) -> Result<Self, NetParseError> {
        if prefix > 32 {
            return Err(NetParseError::Prefix(prefix.to_string()));
        }
        let cidr = Cidr { addr, prefix };
        if u32::from(addr) & !cidr.mask() != 0 {
            return Err(NetParseError::HostBits(format!("{addr}/{prefix}")));
        }
        Ok(cidr)
    }

    pub fn host(addr: Ipv4Addr) -> Self {
        Cidr { addr, prefix: 32 }
    }

    pub fn addr(&self) -> Ipv4Addr {
        self.addr
    }

    pub fn prefix(&self) -> u8 {
        self.prefix
    }

    fn mask(&self) -> u32 {
        if self.prefix == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(self.prefix))
        }
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & self.mask() == u32::from(self.addr)
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.prefix)
    }
}

impl FromStr for Cidr {
    type Err = NetParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, prefix) = s
            .split_once('/')
            .ok_or_else(|| NetParseError::Cidr(s.to_string()))?;
        let addr: Ipv4Addr = addr
            .parse()
            .map_err(|_| NetParseError::Address(addr.to_string()))?;
        // u8 parsing alone would accept "+8"
        if prefix.is_empty() || !prefix.bytes().all(|b| b.is_ascii_digit()) {
            return Err(NetParseError::Prefix(prefix.to_string()));
        }
        let prefix: u8 = prefix
            .parse()
            .map_err(|_| NetParseError::Prefix(prefix.to_string()))?;
        Cidr::new(addr, prefix)
    }
}

impl Serialize for Cidr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Cidr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetParseError {
    #[error("invalid action `{0}` (expected permit or deny)")]
    Action(String),
    #[error("invalid protocol `{0}`")]
    Proto(String),
    #[error("invalid port `{0}` (expected 1-65535 or any)")]
    Port(String),
    #[error("invalid CIDR `{0}`")]
    Cidr(String),
    #[error("invalid IPv4 address `{0}`")]
    Address(String),
    #[error("invalid CIDR prefix `{0}` (expected 0-32)")]
    Prefix(String),
    #[error("CIDR `{0}` has host bits set")]
    HostBits(String),
}
