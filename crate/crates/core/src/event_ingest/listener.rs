use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use chrono::Utc;
use log::{debug, warn};

use super::{parse_syslog_datagram, Parsed, SessionEvent, SyslogPattern, MAX_DATAGRAM};

const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ListenerStats {
    pub received: u64,
    pub delivered: u64,
    pub skipped: u64,
    pub errors: u64,
}

/// UDP syslog receiver. Binding happens up front so that a bad address
/// fails at startup rather than inside the worker thread.
#[derive(Debug)]
pub struct SyslogListener {
    socket: UdpSocket,
}

impl SyslogListener {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(POLL))?;
        Ok(SyslogListener { socket })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    /// Receive until `shutdown` is raised. Datagrams are handed to `sink` in
    /// arrival order.
    pub fn run<F>(&self, patterns: &[SyslogPattern], shutdown: &AtomicBool, mut sink: F) -> ListenerStats
    where
        F: FnMut(SessionEvent),
    {
        // one spare byte to detect oversize datagrams
        let mut buf = vec![0u8; MAX_DATAGRAM + 1];
        let mut stats = ListenerStats::default();

        while !shutdown.load(Ordering::Relaxed) {
            let (len, peer) = match self.socket.recv_from(&mut buf) {
                Ok(r) => r,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    continue
                }
                Err(e) => {
                    warn!("syslog recv failed: {e}");
                    stats.errors += 1;
                    continue;
                }
            };
            stats.received += 1;

            let Some(sender) = sender_v4(peer) else {
                warn!("dropping syslog datagram from non-IPv4 peer {peer}");
                stats.errors += 1;
                continue;
            };
            match parse_syslog_datagram(&buf[..len], sender, patterns, Utc::now()) {
                Ok(Parsed::Event(ev)) => {
                    stats.delivered += 1;
                    sink(ev);
                }
                Ok(Parsed::Skip) => stats.skipped += 1,
                Err(e) => {
                    debug!("bad syslog datagram from {sender}: {e}");
                    stats.errors += 1;
                }
            }
        }
        stats
    }
}

fn sender_v4(peer: SocketAddr) -> Option<Ipv4Addr> {
    match peer.ip() {
        IpAddr::V4(v4) => Some(v4),
        IpAddr::V6(v6) => v6.to_ipv4_mapped(),
    }
}

/// Bind `bind_addr` and receive until `shutdown` is raised.
pub fn run_syslog_listener<F>(
    bind_addr: impl ToSocketAddrs,
    patterns: &[SyslogPattern],
    shutdown: &AtomicBool,
    sink: F,
) -> io::Result<ListenerStats>
where
    F: FnMut(SessionEvent),
{
    let listener = SyslogListener::bind(bind_addr)?;
    Ok(listener.run(patterns, shutdown, sink))
}
