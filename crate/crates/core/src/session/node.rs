use std::collections::VecDeque;
use std::fmt;
use std::net::Ipv4Addr;

use super::{backoff_delay, Millis};
use crate::domain::{NodeId, RawReading, SensorKind, Timestamp};
use crate::wire::{Packet, SendDataPayload, MAX_READINGS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Boot,
    AcquiringIp,
    AnnouncingIp,
    AwaitingServerIp,
    Connecting,
    Streaming,
    Backoff { attempt: u32, resume_at: Millis },
}

impl NodeState {
    pub fn name(&self) -> &'static str {
        match self {
            NodeState::Boot => "Boot",
            NodeState::AcquiringIp => "AcquiringIp",
            NodeState::AnnouncingIp => "AnnouncingIp",
            NodeState::AwaitingServerIp => "AwaitingServerIp",
            NodeState::Connecting => "Connecting",
            NodeState::Streaming => "Streaming",
            NodeState::Backoff { .. } => "Backoff",
        }
    }
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeState::Backoff { attempt, resume_at } => {
                write!(f, "Backoff({attempt}@{resume_at})")
            }
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeEvent {
    IpAssigned(Ipv4Addr),
    ServerIpReceived(Ipv4Addr),
    ConnAckReceived { nonce: u32, session_id: u32 },
    DataAckReceived(u32),
    LinkDown,
    TimerFired,
    ReadingsAvailable(Vec<RawReading>),
}

impl NodeEvent {
    pub fn name(&self) -> String {
        match self {
            NodeEvent::IpAssigned(ip) => format!("IpAssigned({ip})"),
            NodeEvent::ServerIpReceived(ip) => format!("ServerIpReceived({ip})"),
            NodeEvent::ConnAckReceived { nonce, session_id } => {
                format!("ConnAck(nonce={nonce} sid={session_id})")
            }
            NodeEvent::DataAckReceived(seq) => format!("DataAck({seq})"),
            NodeEvent::LinkDown => "LinkDown".into(),
            NodeEvent::TimerFired => "TimerFired".into(),
            NodeEvent::ReadingsAvailable(r) => format!("Readings({})", r.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeAction {
    /// Frame addressed to the modem / ISP.
    ToIsp(Packet),
    /// Frame on the lossless out-of-band channel.
    ToControl(Packet),
    /// Open (or re-open) the data link.
    Dial,
    ToData(Packet),
    /// Arm the single node timer, replacing any pending one.
    SetTimer(Millis),
    Log(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeConfig {
    pub node_id: NodeId,
    pub ip_retry_ms: Millis,
    pub announce_retry_ms: Millis,
    pub connect_timeout_ms: Millis,
    pub ack_timeout_ms: Millis,
    /// Consecutive ack timeouts after which the link is declared broken.
    pub max_missed_acks: u32,
}

impl NodeConfig {
    pub fn new(node_id: NodeId) -> Self {
        NodeConfig {
            node_id,
            ip_retry_ms: 5_000,
            announce_retry_ms: 10_000,
            connect_timeout_ms: 5_000,
            ack_timeout_ms: 2_000,
            max_missed_acks: 4,
        }
    }
}

/// Readings sent together in one SENDDATA frame. `seq` is the sequence
/// number of the first reading and doubles as the batch id for acks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub seq: u32,
    pub timestamp: Timestamp,
    pub readings: Vec<(SensorKind, i32)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }
}

/// Groups readings into batches of consecutive sequence numbers that share
/// a timestamp.
fn batch_readings(readings: &[RawReading]) -> Vec<Batch> {
    let mut out: Vec<Batch> = Vec::new();
    for r in readings {
        match out.last_mut() {
            Some(b)
                if b.timestamp == r.timestamp
                    && b.readings.len() < MAX_READINGS
                    && b.seq.wrapping_add(b.readings.len() as u32) == r.seq =>
            {
                b.readings.push((r.sensor, r.raw));
            }
            _ => out.push(Batch {
                seq: r.seq,
                timestamp: r.timestamp,
                readings: vec![(r.sensor, r.raw)],
            }),
        }
    }
    out
}

/// Field-node side of the protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    cfg: NodeConfig,
    state: NodeState,
    ip: Option<Ipv4Addr>,
    server_ip: Option<Ipv4Addr>,
    session_id: Option<u32>,
    nonce: u32,
    failed_attempts: u32,
    missed_acks: u32,
    unacked: VecDeque<Batch>,
}

impl Node {
    pub fn new(cfg: NodeConfig) -> Self {
        Node {
            cfg,
            state: NodeState::Boot,
            ip: None,
            server_ip: None,
            session_id: None,
            nonce: 0,
            failed_attempts: 0,
            missed_acks: 0,
            unacked: VecDeque::new(),
        }
    }

    pub fn state(&self) -> NodeState {
        self.state
    }

    pub fn node_id(&self) -> NodeId {
        self.cfg.node_id
    }

    pub fn ip(&self) -> Option<Ipv4Addr> {
        self.ip
    }

    pub fn server_ip(&self) -> Option<Ipv4Addr> {
        self.server_ip
    }

    pub fn session_id(&self) -> Option<u32> {
        self.session_id
    }

    /// Batches awaiting acknowledgement, oldest first.
    pub fn unacked(&self) -> impl Iterator<Item = &Batch> {
        self.unacked.iter()
    }

    pub fn unacked_readings(&self) -> usize {
        self.unacked.iter().map(Batch::len).sum()
    }

    /// Advances the machine by one event.
    pub fn handle(&mut self, now: Millis, event: NodeEvent) -> Vec<NodeAction> {
        use NodeEvent as E;
        use NodeState as S;
        let mut out = Vec::new();
        match (self.state, event) {
            (S::Boot, E::TimerFired) | (S::AcquiringIp, E::TimerFired) => {
                self.state = S::AcquiringIp;
                out.push(NodeAction::ToIsp(Packet::ReqIp {
                    node_id: self.cfg.node_id,
                }));
                out.push(NodeAction::SetTimer(now + self.cfg.ip_retry_ms));
            }
            (S::AcquiringIp, E::IpAssigned(ip)) => {
                self.ip = Some(ip);
                self.state = S::AnnouncingIp;
                out.push(NodeAction::SetTimer(now));
            }
            (S::AnnouncingIp, E::TimerFired) | (S::AwaitingServerIp, E::TimerFired) => {
                let ip = self.ip.expect("ip assigned before announcing");
                self.state = S::AwaitingServerIp;
                out.push(NodeAction::ToControl(Packet::SendIp {
                    node_id: self.cfg.node_id,
                    ip,
                }));
                out.push(NodeAction::SetTimer(now + self.cfg.announce_retry_ms));
            }
            (S::AwaitingServerIp, E::ServerIpReceived(ip)) => {
                self.server_ip = Some(ip);
                self.begin_connect(now, &mut out);
            }
            (S::Connecting, E::ConnAckReceived { nonce, session_id }) => {
                if nonce != self.nonce {
                    out.push(NodeAction::Log(format!(
                        "stale ConnAck nonce {nonce} (expected {})",
                        self.nonce
                    )));
                } else {
                    self.state = S::Streaming;
                    self.session_id = Some(session_id);
                    self.failed_attempts = 0;
                    self.missed_acks = 0;
                    self.send_unacked(&mut out);
                    if !self.unacked.is_empty() {
                        out.push(NodeAction::SetTimer(now + self.cfg.ack_timeout_ms));
                    }
                }
            }
            (S::Connecting, E::TimerFired) | (S::Connecting, E::LinkDown) => {
                self.enter_backoff(now, &mut out);
            }
            (S::Backoff { .. }, E::TimerFired) => {
                self.begin_connect(now, &mut out);
            }
            (S::Streaming, E::LinkDown) => {
                self.enter_backoff(now, &mut out);
            }
            (S::Streaming, E::TimerFired) => {
                if !self.unacked.is_empty() {
                    self.missed_acks += 1;
                    if self.missed_acks >= self.cfg.max_missed_acks {
                        out.push(NodeAction::Log(format!(
                            "{} ack timeouts in a row, connection considered broken",
                            self.missed_acks
                        )));
                        self.enter_backoff(now, &mut out);
                    } else {
                        self.send_unacked(&mut out);
                        out.push(NodeAction::SetTimer(now + self.cfg.ack_timeout_ms));
                    }
                }
            }
            (state, E::ReadingsAvailable(readings)) => {
                let was_idle = self.unacked.is_empty();
                let batches = batch_readings(&readings);
                if state == S::Streaming {
                    for b in &batches {
                        out.push(NodeAction::ToData(self.senddata(b)));
                    }
                    if was_idle && !batches.is_empty() {
                        self.missed_acks = 0;
                        out.push(NodeAction::SetTimer(now + self.cfg.ack_timeout_ms));
                    }
                }
                self.unacked.extend(batches);
            }
            (state, E::DataAckReceived(seq)) => {
                if let Some(pos) = self.unacked.iter().position(|b| b.seq == seq) {
                    self.unacked.remove(pos);
                    if state == S::Streaming {
                        self.missed_acks = 0;
                    }
                } else {
                    out.push(NodeAction::Log(format!("duplicate DataAck({seq}) ignored")));
                }
            }
            (_, E::ServerIpReceived(ip)) if self.server_ip.is_some() => {
                self.server_ip = Some(ip);
            }
            (S::Backoff { .. }, E::LinkDown) => {}
            (state, event) => {
                log::warn!(
                    "node {}: ignoring {} in state {state}",
                    self.cfg.node_id,
                    event.name()
                );
                out.push(NodeAction::Log(format!(
                    "ignored {} in {state}",
                    event.name()
                )));
            }
        }
        out
    }

    fn begin_connect(&mut self, now: Millis, out: &mut Vec<NodeAction>) {
        self.nonce = self.nonce.wrapping_add(1);
        self.session_id = None;
        self.state = NodeState::Connecting;
        out.push(NodeAction::Dial);
        out.push(NodeAction::ToData(Packet::ReqConn {
            node_id: self.cfg.node_id,
            nonce: self.nonce,
        }));
        out.push(NodeAction::SetTimer(now + self.cfg.connect_timeout_ms));
    }

    fn enter_backoff(&mut self, now: Millis, out: &mut Vec<NodeAction>) {
        self.failed_attempts = self.failed_attempts.saturating_add(1);
        self.session_id = None;
        let attempt = self.failed_attempts;
        let resume_at = now + backoff_delay(attempt).as_millis() as Millis;
        self.state = NodeState::Backoff { attempt, resume_at };
        out.push(NodeAction::SetTimer(resume_at));
    }

    fn send_unacked(&self, out: &mut Vec<NodeAction>) {
        for b in &self.unacked {
            out.push(NodeAction::ToData(self.senddata(b)));
        }
    }

    fn senddata(&self, b: &Batch) -> Packet {
        Packet::SendData(SendDataPayload {
            session_id: self.session_id.unwrap_or(0),
            seq: b.seq,
            timestamp: b.timestamp,
            readings: b.readings.clone(),
        })
    }
}

/// Pure form of [`Node::handle`].
pub fn node_step(node: &Node, now: Millis, event: NodeEvent) -> (Node, Vec<NodeAction>) {
    let mut next = node.clone();
    let actions = next.handle(now, event);
    (next, actions)
}
