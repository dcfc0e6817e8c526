//! TCP transport. Every connection carries the same frames as the simulated
//! link. A node keeps one long-lived control connection (ISP and
//! announcements) and dials a fresh data connection for each session
//! attempt; the server learns a connection's role from the frames on it.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, Shutdown, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use ews_core::alert::ConsoleSink;
use ews_core::config::Config;
use ews_core::domain::NodeId;
use ews_core::nodesim::{Emitter, Scenario};
use ews_core::session::{Millis, Node, NodeAction, NodeConfig, NodeEvent, NodeState, ServerAction, ServerEvent};
use ews_core::station::Station;
use ews_core::wire::{FrameReader, Packet};

const POLL: Duration = Duration::from_millis(100);

fn ip_for(node: NodeId) -> Ipv4Addr {
    Ipv4Addr::new(10, 0, (node.0 >> 8) as u8, node.0 as u8)
}

fn send(stream: &mut TcpStream, p: &Packet) -> io::Result<()> {
    let bytes = p.encode().map_err(io::Error::other)?;
    stream.write_all(&bytes)
}

/// Reads frames from `stream` until EOF or error, handing each decoded
/// packet to `on_packet`. Undecodable frames are logged and skipped.
fn read_packets(stream: &mut TcpStream, stop: &AtomicBool, mut on_packet: impl FnMut(Packet)) {
    let mut reader = FrameReader::new();
    let mut buf = [0u8; 4096];
    while !stop.load(Ordering::Relaxed) {
        match stream.read(&mut buf) {
            Ok(0) => return,
            Ok(n) => {
                reader.push(&buf[..n]);
                while let Some(frame) = reader.next_frame() {
                    match Packet::from_frame(&frame) {
                        Ok(p) => on_packet(p),
                        Err(e) => log::warn!("dropping undecodable frame: {e}"),
                    }
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => {
                log::debug!("connection read failed: {e}");
                return;
            }
        }
    }
}

struct ServerShared {
    station: Mutex<Station>,
    /// Generation of the newest data connection per node, so a stale
    /// connection closing does not tear down its replacement.
    data_conn: Mutex<HashMap<NodeId, u64>>,
    next_gen: AtomicU64,
    stop: AtomicBool,
}

fn serve_connection(shared: Arc<ServerShared>, mut stream: TcpStream) {
    let peer = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_else(|_| "?".into());
    if let Err(e) = stream.set_read_timeout(Some(POLL)) {
        log::warn!("{peer}: {e}");
        return;
    }
    let Ok(mut writer) = stream.try_clone() else {
        return;
    };
    let mut bound: Option<(NodeId, u64)> = None;
    read_packets(&mut stream, &shared.stop, |packet| {
        let node = match &packet {
            Packet::ReqIp { node_id } => {
                let reply = Packet::IpAssign { ip: ip_for(*node_id) };
                if let Err(e) = send(&mut writer, &reply) {
                    log::warn!("{peer}: {e}");
                }
                return;
            }
            Packet::SendIp { node_id, .. } => *node_id,
            Packet::ReqConn { node_id, .. } => {
                let gen = shared.next_gen.fetch_add(1, Ordering::Relaxed);
                shared.data_conn.lock().unwrap().insert(*node_id, gen);
                bound = Some((*node_id, gen));
                *node_id
            }
            Packet::SendData(_) => match bound {
                Some((node, _)) => node,
                None => {
                    log::warn!("{peer}: data before connection request");
                    return;
                }
            },
            other => {
                log::warn!("{peer}: unexpected {:?}", other.msg_type());
                return;
            }
        };
        let Some(event) = Station::event_for(packet) else {
            return;
        };
        let output = shared.station.lock().unwrap().handle(node, event);
        match output {
            Ok(out) => {
                for action in out.replies {
                    let result = match action {
                        ServerAction::ToControl(p) | ServerAction::ToData(p) => send(&mut writer, &p),
                        ServerAction::Log(m) => {
                            log::debug!("{m}");
                            Ok(())
                        }
                        ServerAction::Forward { .. } => Ok(()),
                    };
                    if let Err(e) = result {
                        log::warn!("{peer}: {e}");
                    }
                }
            }
            Err(e) => log::error!("node {node}: {e}"),
        }
    });
    if let Some((node, gen)) = bound {
        let current = shared.data_conn.lock().unwrap().get(&node) == Some(&gen);
        if current && !shared.stop.load(Ordering::Relaxed) {
            if let Err(e) = shared.station.lock().unwrap().handle(node, ServerEvent::LinkDown) {
                log::error!("node {node}: {e}");
            }
        }
    }
    log::debug!("{peer}: closed");
}

/// Serves nodes on `listen` until SIGINT or SIGTERM, then flushes the store.
pub fn run_server(config: &Config, store: &Path, listen: &str) -> Result<()> {
    std::fs::create_dir_all(store).with_context(|| format!("creating store {}", store.display()))?;
    let dispatcher = config.sinks.dispatcher(store, ConsoleSink::stdout());
    let (station, warnings) = Station::from_config(config, store, dispatcher)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    listener.set_nonblocking(true)?;
    let shared = Arc::new(ServerShared {
        station: Mutex::new(station),
        data_conn: Mutex::new(HashMap::new()),
        next_gen: AtomicU64::new(0),
        stop: AtomicBool::new(false),
    });
    let interrupted = Arc::new(AtomicBool::new(false));
    let flag = interrupted.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing signal handler")?;

    println!("listening on {}", listener.local_addr()?);
    io::stdout().flush()?;
    while !interrupted.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let shared = shared.clone();
                thread::spawn(move || serve_connection(shared, stream));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }

    shared.stop.store(true, Ordering::SeqCst);
    // Holding the lock keeps connection threads from writing after the sync.
    let mut station = shared.station.lock().unwrap();
    station.sync()?;
    let s = station.stats();
    println!(
        "shutdown: {} batches received, {} readings stored, {} duplicates, {} acks sent",
        s.batches_received, s.readings_stored, s.duplicate_readings, s.acks_sent
    );
    io::stdout().flush()?;
    std::process::exit(0);
}

enum Inbound {
    Control(Packet),
    Data { gen: u64, packet: Packet },
    DataClosed { gen: u64 },
    ControlClosed,
}

fn spawn_reader(stream: &TcpStream, tx: Sender<Inbound>, gen: Option<u64>) -> io::Result<()> {
    let mut stream = stream.try_clone()?;
    thread::spawn(move || {
        let never = AtomicBool::new(false);
        read_packets(&mut stream, &never, |packet| {
            let msg = match gen {
                Some(gen) => Inbound::Data { gen, packet },
                None => Inbound::Control(packet),
            };
            let _ = tx.send(msg);
        });
        let _ = tx.send(match gen {
            Some(gen) => Inbound::DataClosed { gen },
            None => Inbound::ControlClosed,
        });
    });
    Ok(())
}

struct NodeDriver {
    addr: String,
    node: Node,
    emitter: Emitter,
    speedup: f64,
    start: u64,
    epoch: Instant,
    tx: Sender<Inbound>,
    control: Option<TcpStream>,
    data: Option<TcpStream>,
    data_gen: u64,
    timer: Option<Millis>,
    pending: Vec<NodeEvent>,
    reconnects: u32,
    in_backoff: bool,
}

impl NodeDriver {
    fn now(&self) -> Millis {
        self.epoch.elapsed().as_millis() as Millis
    }

    /// Wall-clock offset at which simulated time `t` is reached.
    fn wall_ms(&self, t: u64) -> Millis {
        ((t - self.start) as f64 * 1000.0 / self.speedup) as Millis
    }

    fn sim_now(&self) -> u64 {
        self.start + (self.epoch.elapsed().as_secs_f64() * self.speedup) as u64
    }

    fn control(&mut self) -> Option<&mut TcpStream> {
        if self.control.is_none() {
            match TcpStream::connect(&self.addr).and_then(|s| spawn_reader(&s, self.tx.clone(), None).map(|_| s)) {
                Ok(s) => self.control = Some(s),
                Err(e) => log::warn!("control connection to {}: {e}", self.addr),
            }
        }
        self.control.as_mut()
    }

    fn handle(&mut self, event: NodeEvent) {
        let before = self.node.state();
        let now = self.now();
        let actions = self.node.handle(now, event);
        let after = self.node.state();
        if matches!(after, NodeState::Backoff { .. }) {
            self.in_backoff = true;
        }
        if before == NodeState::Connecting && after == NodeState::Streaming {
            if self.in_backoff {
                self.reconnects += 1;
                self.in_backoff = false;
            }
            log::info!("streaming, session {:?}", self.node.session_id());
        }
        for action in actions {
            match action {
                NodeAction::ToIsp(p) | NodeAction::ToControl(p) => {
                    let failed = match self.control() {
                        Some(s) => send(s, &p).is_err(),
                        None => false,
                    };
                    if failed {
                        self.control = None;
                    }
                }
                NodeAction::Dial => {
                    if let Some(old) = self.data.take() {
                        let _ = old.shutdown(Shutdown::Both);
                    }
                    self.data_gen += 1;
                    match TcpStream::connect(&self.addr)
                        .and_then(|s| spawn_reader(&s, self.tx.clone(), Some(self.data_gen)).map(|_| s))
                    {
                        Ok(s) => {
                            let _ = s.set_nodelay(true);
                            self.data = Some(s);
                        }
                        Err(e) => {
                            log::warn!("dial {}: {e}", self.addr);
                            self.pending.push(NodeEvent::LinkDown);
                        }
                    }
                }
                NodeAction::ToData(p) => {
                    if let Some(s) = self.data.as_mut() {
                        if let Err(e) = send(s, &p) {
                            log::warn!("data link: {e}");
                            let _ = s.shutdown(Shutdown::Both);
                            self.data = None;
                            self.pending.push(NodeEvent::LinkDown);
                        }
                    }
                }
                NodeAction::SetTimer(at) => self.timer = Some(at),
                NodeAction::Log(m) => log::debug!("{m}"),
            }
        }
    }

    fn inbound(&mut self, msg: Inbound) {
        let packet = match msg {
            Inbound::Control(p) => p,
            Inbound::Data { gen, packet } if gen == self.data_gen => packet,
            Inbound::Data { .. } => return,
            Inbound::DataClosed { gen } => {
                if gen == self.data_gen && self.data.take().is_some() {
                    self.handle(NodeEvent::LinkDown);
                }
                return;
            }
            Inbound::ControlClosed => {
                self.control = None;
                return;
            }
        };
        let event = match packet {
            Packet::IpAssign { ip } => NodeEvent::IpAssigned(ip),
            Packet::ServerIp { ip } => NodeEvent::ServerIpReceived(ip),
            Packet::ConnAck { nonce, session_id } => NodeEvent::ConnAckReceived { nonce, session_id },
            Packet::DataAck { seq, .. } => NodeEvent::DataAckReceived(seq),
            other => {
                log::warn!("node received unexpected {:?}", other.msg_type());
                return;
            }
        };
        self.handle(event);
    }

    fn finished(&self) -> bool {
        self.emitter.is_done() && self.node.unacked().next().is_none()
    }
}

/// Streams `scenario` to the server at `addr`, returning once every reading
/// has been acknowledged.
pub fn run_node(addr: &str, scenario: Scenario, node_id: NodeId, speedup: f64, start: u64) -> Result<()> {
    let (tx, rx): (Sender<Inbound>, Receiver<Inbound>) = mpsc::channel();
    let total = scenario.steps.len();
    let mut d = NodeDriver {
        addr: addr.to_string(),
        node: Node::new(NodeConfig::new(node_id)),
        emitter: Emitter::new(scenario, node_id, start),
        speedup,
        start,
        epoch: Instant::now(),
        tx,
        control: None,
        data: None,
        data_gen: 0,
        timer: None,
        pending: Vec::new(),
        reconnects: 0,
        in_backoff: false,
    };
    d.control().with_context(|| format!("connecting to {addr}"))?;
    d.handle(NodeEvent::TimerFired);

    while !d.finished() {
        for ev in std::mem::take(&mut d.pending) {
            d.handle(ev);
        }
        let sample_at = d.emitter.next_due().map(|t| d.wall_ms(t));
        let wake = [d.timer, sample_at].into_iter().flatten().min();
        let now = d.now();
        let wait = wake.map_or(POLL, |w| Duration::from_millis(w.saturating_sub(now)).min(POLL));
        match rx.recv_timeout(wait) {
            Ok(msg) => d.inbound(msg),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => unreachable!("driver holds a sender"),
        }
        let now = d.now();
        if d.timer.is_some_and(|t| t <= now) {
            d.timer = None;
            d.handle(NodeEvent::TimerFired);
        }
        if sample_at.is_some_and(|t| t <= now) {
            let readings = d.emitter.emit_readings(d.sim_now());
            if !readings.is_empty() {
                d.handle(NodeEvent::ReadingsAvailable(readings));
            }
        }
    }
    if let Some(s) = d.data.take() {
        let _ = s.shutdown(Shutdown::Both);
    }
    println!(
        "node {node_id}: {total} readings delivered and acknowledged, {} reconnects",
        d.reconnects
    );
    Ok(())
}
