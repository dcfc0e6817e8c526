use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;

use crate::domain::NodeId;
use crate::wire::{Packet, SendDataPayload};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerSessionState {
    AwaitingAnnounce,
    KnownClient { ip: Ipv4Addr },
    Connected { ip: Ipv4Addr, session_id: u32 },
}

impl fmt::Display for ServerSessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServerSessionState::AwaitingAnnounce => f.write_str("AwaitingAnnounce"),
            ServerSessionState::KnownClient { .. } => f.write_str("KnownClient"),
            ServerSessionState::Connected { session_id, .. } => {
                write!(f, "Connected({session_id})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerEvent {
    AnnounceReceived { node_id: NodeId, ip: Ipv4Addr },
    ReqConnReceived { node_id: NodeId, nonce: u32 },
    SendDataReceived(SendDataPayload),
    LinkDown,
}

impl ServerEvent {
    pub fn name(&self) -> String {
        match self {
            ServerEvent::AnnounceReceived { node_id, ip } => format!("Announce({node_id},{ip})"),
            ServerEvent::ReqConnReceived { nonce, .. } => format!("ReqConn(nonce={nonce})"),
            ServerEvent::SendDataReceived(p) => format!("SendData(seq={})", p.seq),
            ServerEvent::LinkDown => "LinkDown".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerAction {
    ToControl(Packet),
    ToData(Packet),
    /// Hand the payload to the ingest pipeline. Emitted before the matching
    /// `DataAck`, so executing actions in order stores before acknowledging.
    Forward { node_id: NodeId, payload: SendDataPayload },
    Log(String),
}

/// Client list shared by all server sessions: node id to last announced
/// address, plus session-id allocation. Optionally mirrored to a CSV file so
/// a restarted server still recognises nodes that announced earlier.
#[derive(Debug)]
pub struct Registry {
    server_ip: Ipv4Addr,
    clients: Mutex<BTreeMap<NodeId, Ipv4Addr>>,
    live: Mutex<HashSet<u32>>,
    next_session: AtomicU32,
    persist: Option<PathBuf>,
}

impl Registry {
    pub fn new(server_ip: Ipv4Addr) -> Self {
        Registry {
            server_ip,
            clients: Mutex::new(BTreeMap::new()),
            live: Mutex::new(HashSet::new()),
            next_session: AtomicU32::new(1),
            persist: None,
        }
    }

    /// Registry backed by `path` (`node_id,ip` per line). Existing entries
    /// are loaded; unparseable lines are skipped with a warning.
    pub fn persistent(server_ip: Ipv4Addr, path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut clients = BTreeMap::new();
        match fs::read_to_string(&path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    let parsed = line.split_once(',').and_then(|(n, ip)| {
                        Some((NodeId(n.trim().parse().ok()?), ip.trim().parse().ok()?))
                    });
                    match parsed {
                        Some((n, ip)) => {
                            clients.insert(n, ip);
                        }
                        None if i == 0 => {}
                        None => log::warn!("{}:{}: bad client row {line:?}", path.display(), i + 1),
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        let reg = Registry {
            clients: Mutex::new(clients),
            persist: Some(path),
            ..Registry::new(server_ip)
        };
        Ok(reg)
    }

    pub fn server_ip(&self) -> Ipv4Addr {
        self.server_ip
    }

    pub fn lookup(&self, node: NodeId) -> Option<Ipv4Addr> {
        self.clients.lock().expect("registry lock").get(&node).copied()
    }

    pub fn clients(&self) -> BTreeMap<NodeId, Ipv4Addr> {
        self.clients.lock().expect("registry lock").clone()
    }

    /// Adds or replaces the entry for `node`.
    pub fn announce(&self, node: NodeId, ip: Ipv4Addr) {
        let mut clients = self.clients.lock().expect("registry lock");
        let changed = clients.insert(node, ip) != Some(ip);
        if changed {
            if let Some(path) = &self.persist {
                if let Err(e) = write_clients(path, &clients) {
                    log::error!("failed to persist client list to {}: {e}", path.display());
                }
            }
        }
    }

    pub fn allocate_session(&self) -> u32 {
        let mut live = self.live.lock().expect("registry lock");
        loop {
            let id = self.next_session.fetch_add(1, Ordering::Relaxed);
            if id != 0 && live.insert(id) {
                return id;
            }
        }
    }

    pub fn release_session(&self, id: u32) {
        self.live.lock().expect("registry lock").remove(&id);
    }

    pub fn live_sessions(&self) -> usize {
        self.live.lock().expect("registry lock").len()
    }
}

fn write_clients(path: &Path, clients: &BTreeMap<NodeId, Ipv4Addr>) -> io::Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        writeln!(f, "node_id,ip")?;
        for (n, ip) in clients {
            writeln!(f, "{n},{ip}")?;
        }
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

/// Server-side state for one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerSession {
    pub node_id: NodeId,
    pub state: ServerSessionState,
}

impl ServerSession {
    /// Fresh session for `node_id`, starting from `KnownClient` if the
    /// registry already holds its address.
    pub fn for_node(node_id: NodeId, registry: &Registry) -> Self {
        let state = match registry.lookup(node_id) {
            Some(ip) => ServerSessionState::KnownClient { ip },
            None => ServerSessionState::AwaitingAnnounce,
        };
        ServerSession { node_id, state }
    }

    pub fn session_id(&self) -> Option<u32> {
        match self.state {
            ServerSessionState::Connected { session_id, .. } => Some(session_id),
            _ => None,
        }
    }
}

/// One server-side transition. The registry is the only shared state
/// touched: announcements and session-id allocation.
pub fn server_step(
    session: &ServerSession,
    event: ServerEvent,
    registry: &Registry,
) -> (ServerSession, Vec<ServerAction>) {
    use ServerSessionState as S;
    let mut next = *session;
    let mut out = Vec::new();
    match (session.state, event) {
        (state, ServerEvent::AnnounceReceived { node_id, ip }) => {
            if node_id != session.node_id {
                out.push(ServerAction::Log(format!(
                    "announce for node {node_id} routed to session of node {}",
                    session.node_id
                )));
            } else {
                if let S::Connected { session_id, .. } = state {
                    registry.release_session(session_id);
                }
                registry.announce(node_id, ip);
                next.state = S::KnownClient { ip };
                out.push(ServerAction::ToControl(Packet::ServerIp {
                    ip: registry.server_ip(),
                }));
            }
        }
        (S::AwaitingAnnounce, ServerEvent::ReqConnReceived { node_id, .. }) => {
            out.push(ServerAction::Log(format!(
                "protocol violation: ReqConn from unannounced node {node_id}"
            )));
        }
        (S::KnownClient { ip } | S::Connected { ip, .. }, ServerEvent::ReqConnReceived { node_id, nonce }) => {
            if node_id != session.node_id {
                out.push(ServerAction::Log(format!(
                    "protocol violation: ReqConn for node {node_id} on session of node {}",
                    session.node_id
                )));
            } else {
                if let Some(old) = session.session_id() {
                    registry.release_session(old);
                }
                let session_id = registry.allocate_session();
                next.state = S::Connected { ip, session_id };
                out.push(ServerAction::ToData(Packet::ConnAck { nonce, session_id }));
            }
        }
        (S::Connected { session_id, .. }, ServerEvent::SendDataReceived(payload))
            if payload.session_id == session_id =>
        {
            let seq = payload.seq;
            out.push(ServerAction::Forward {
                node_id: session.node_id,
                payload,
            });
            out.push(ServerAction::ToData(Packet::DataAck { session_id, seq }));
        }
        (state, ServerEvent::SendDataReceived(payload)) => {
            out.push(ServerAction::Log(format!(
                "protocol violation: SendData(seq={}) with session {} in state {state}",
                payload.seq, payload.session_id
            )));
        }
        (S::Connected { ip, session_id }, ServerEvent::LinkDown) => {
            registry.release_session(session_id);
            next.state = S::KnownClient { ip };
        }
        (_, ServerEvent::LinkDown) => {}
    }
    for a in &out {
        if let ServerAction::Log(m) = a {
            log::warn!("server: {m}");
        }
    }
    (next, out)
}

/// Routes events for many nodes to their sessions over the in-process
/// simulated link.
#[derive(Debug)]
pub struct Server {
    registry: Registry,
    sessions: HashMap<NodeId, ServerSession>,
}

impl Server {
    pub fn new(registry: Registry) -> Self {
        Server {
            registry,
            sessions: HashMap::new(),
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn session(&self, node: NodeId) -> Option<&ServerSession> {
        self.sessions.get(&node)
    }

    /// Handles a data-channel or control-channel event from `node`.
    pub fn handle(&mut self, node: NodeId, event: ServerEvent) -> Vec<ServerAction> {
        let current = *self
            .sessions
            .entry(node)
            .or_insert_with(|| ServerSession::for_node(node, &self.registry));
        let (next, actions) = server_step(&current, event, &self.registry);
        self.sessions.insert(node, next);
        actions
    }
}
