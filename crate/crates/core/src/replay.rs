//! Deterministic end-to-end replay of a scenario: one node, the simulated
//! data link in both directions, and a station, driven by a discrete-event
//! loop over a simulated millisecond clock.
//!
//! The ISP and control channels are lossless and delayed by the link
//! latency. Data frames go through [`SimLink`]s; a severed link (random or
//! forced) discards every data frame still in flight and reports
//! `LinkDown` to both ends.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::io::{self, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::alert::{rain_events, DeliveryOutcome, Notification};
use crate::config::Config;
use crate::domain::{AlertLevel, NodeId, Timestamp};
use crate::ingest::Repository;
use crate::nodesim::{Emitter, Scenario};
use crate::session::{
    Delivery, LinkConfig, LinkConfigError, Millis, Node, NodeAction, NodeConfig, NodeEvent,
    NodeState, ServerAction, ServerEvent, SimLink,
};
use crate::station::{Station, StationError};
use crate::wire::Packet;

/// 2010-04-01T00:00:00Z, the default scenario start.
pub const REPLAY_EPOCH: Timestamp = 1_270_080_000;

/// Mixed into the seed of the server-to-node link.
const DOWNLINK_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Station(#[from] StationError),
    #[error("link: {0}")]
    Link(#[from] LinkConfigError),
    #[error("trace output: {0}")]
    Trace(#[source] io::Error),
    #[error("store {0} already holds readings; replay needs an empty store")]
    StoreNotEmpty(PathBuf),
}

pub struct ReplayOptions {
    pub seed: u64,
    /// Simulated seconds per wall second; `None` runs unpaced.
    pub speedup: Option<f64>,
    pub start: Timestamp,
    pub node_id: NodeId,
    pub node_config: Option<NodeConfig>,
    /// Simulated times (ms) at which the data link is cut.
    pub forced_disconnects: Vec<Millis>,
    /// How long after the last scenario step the run may continue while
    /// unacknowledged batches remain.
    pub settle_ms: Millis,
    /// Writer for the console sink, created anew for every station start.
    pub console: fn() -> Box<dyn Write + Send>,
    /// One CSV line per handled event: `ts,side,node_id,state,event,action`.
    pub trace: Option<Box<dyn Write>>,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            seed: 0,
            speedup: None,
            start: REPLAY_EPOCH,
            node_id: NodeId(1),
            node_config: None,
            forced_disconnects: Vec::new(),
            settle_ms: 24 * 3600 * 1000,
            console: || Box::new(io::sink()),
            trace: None,
        }
    }
}

pub const TRACE_HEADER: &str = "ts,side,node_id,state,event,action";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Channel {
    Isp,
    Control,
    Data,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ev {
    Boot,
    NodeTimer(u64),
    Sample,
    ToNode { channel: Channel, frame: Vec<u8>, epoch: u64 },
    ToServer { channel: Channel, frame: Vec<u8>, epoch: u64 },
    NodeLinkDown,
    ServerLinkDown { epoch: u64 },
    ForcedDisconnect,
}

#[derive(Debug, PartialEq, Eq)]
struct Scheduled {
    at: Millis,
    order: u64,
    ev: Ev,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.order).cmp(&(self.at, self.order))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counters {
    data_frames_sent: u64,
    frames_dropped: u64,
    links_severed: u64,
    forced_disconnects: u64,
    stale_frames: u64,
    lost_to_server_down: u64,
    retransmitted_batches: u64,
    recoveries: u32,
    sink_failures: u64,
    trace_lines: u64,
}

/// Outcome of a replay. Contains nothing wall-clock dependent, so equal
/// inputs give equal summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySummary {
    pub scenario: String,
    pub seed: u64,
    pub readings_generated: usize,
    pub readings_stored: usize,
    pub data_frames_sent: u64,
    pub frames_dropped: u64,
    pub links_severed: u64,
    pub forced_disconnects: u64,
    pub retransmitted_batches: u64,
    /// Backoff -> Connecting -> Streaming recoveries.
    pub reconnects: u32,
    pub rain_events: usize,
    pub alert_timeline: Vec<Notification>,
    pub final_level: AlertLevel,
    pub sink_failures: u64,
    pub sim_duration_ms: Millis,
    /// All readings generated and acknowledged before the settle deadline.
    pub complete: bool,
}

impl ReplaySummary {
    /// Levels in order, starting from the initial Green.
    pub fn level_sequence(&self) -> Vec<AlertLevel> {
        std::iter::once(AlertLevel::Green)
            .chain(self.alert_timeline.iter().map(|n| n.level))
            .collect()
    }
}

impl fmt::Display for ReplaySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario            {}", self.scenario)?;
        writeln!(f, "seed                {}", self.seed)?;
        writeln!(f, "readings generated  {}", self.readings_generated)?;
        writeln!(f, "readings stored     {}", self.readings_stored)?;
        writeln!(f, "data frames sent    {}", self.data_frames_sent)?;
        writeln!(f, "frames dropped      {}", self.frames_dropped)?;
        writeln!(f, "links severed       {}", self.links_severed)?;
        writeln!(f, "forced disconnects  {}", self.forced_disconnects)?;
        writeln!(f, "batch retransmits   {}", self.retransmitted_batches)?;
        writeln!(f, "reconnects          {}", self.reconnects)?;
        writeln!(f, "rain events         {}", self.rain_events)?;
        writeln!(f, "sink failures       {}", self.sink_failures)?;
        writeln!(f, "simulated time      {:.3} h", self.sim_duration_ms as f64 / 3.6e6)?;
        writeln!(f, "complete            {}", self.complete)?;
        writeln!(f, "alert timeline:")?;
        writeln!(f, "  start  {}", AlertLevel::Green)?;
        for n in &self.alert_timeline {
            writeln!(f, "  {}  {} ({:?}/{:?})", n.ts, n.level, n.source, n.mode)?;
        }
        write!(f, "final level         {}", self.final_level)
    }
}

pub struct Replay {
    config: Config,
    store: PathBuf,
    opts: ReplayOptions,
    node: Node,
    emitter: Emitter,
    uplink: SimLink,
    downlink: SimLink,
    station: Option<Station>,
    queue: BinaryHeap<Scheduled>,
    order: u64,
    now: Millis,
    timer_gen: u64,
    epoch: u64,
    since_backoff: bool,
    sent_batches: BTreeSet<u32>,
    acked: BTreeSet<u32>,
    timeline: Vec<Notification>,
    counters: Counters,
    wall_start: Instant,
}

fn sim_ip(node: NodeId) -> Ipv4Addr {
    Ipv4Addr::new(10, 0, (node.0 >> 8) as u8, node.0 as u8)
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

fn action_name(a: &NodeAction) -> String {
    match a {
        NodeAction::ToIsp(p) => format!("ToIsp({:?})", p.msg_type()),
        NodeAction::ToControl(p) => format!("ToControl({:?})", p.msg_type()),
        NodeAction::Dial => "Dial".into(),
        NodeAction::ToData(Packet::SendData(p)) => format!("SendData({})", p.seq),
        NodeAction::ToData(p) => format!("ToData({:?})", p.msg_type()),
        NodeAction::SetTimer(t) => format!("SetTimer({t})"),
        NodeAction::Log(m) => format!("Log({m})"),
    }
}

fn server_action_name(a: &ServerAction) -> String {
    match a {
        ServerAction::ToControl(p) => format!("ToControl({:?})", p.msg_type()),
        ServerAction::ToData(Packet::DataAck { seq, .. }) => format!("DataAck({seq})"),
        ServerAction::ToData(p) => format!("ToData({:?})", p.msg_type()),
        ServerAction::Forward { payload, .. } => format!("Forward({})", payload.seq),
        ServerAction::Log(m) => format!("Log({m})"),
    }
}

impl Replay {
    /// Prepares a run of `scenario` into `store`, which must not yet hold
    /// readings.
    pub fn new(
        config: Config,
        scenario: Scenario,
        store: &Path,
        mut opts: ReplayOptions,
    ) -> Result<Replay, ReplayError> {
        let existing = Repository::open_read_only(store).map_err(StationError::from)?.0;
        if !existing.is_empty() {
            return Err(ReplayError::StoreNotEmpty(store.to_path_buf()));
        }
        let up = LinkConfig {
            rng_seed: opts.seed,
            ..config.link
        };
        let down = LinkConfig {
            rng_seed: opts.seed ^ DOWNLINK_SEED_MIX,
            ..config.link
        };
        let node_cfg = opts.node_config.unwrap_or_else(|| NodeConfig::new(opts.node_id));
        let mut queue = BinaryHeap::new();
        let mut order = 0;
        let mut push = |at, ev| {
            queue.push(Scheduled { at, order, ev });
            order += 1;
        };
        push(0, Ev::Boot);
        if let Some(first) = scenario.steps.first() {
            push(first.t_offset * 1000, Ev::Sample);
        }
        opts.forced_disconnects.sort_unstable();
        for &t in &opts.forced_disconnects {
            push(t, Ev::ForcedDisconnect);
        }
        if let Some(w) = opts.trace.as_mut() {
            writeln!(w, "{TRACE_HEADER}").map_err(ReplayError::Trace)?;
        }
        let mut replay = Replay {
            uplink: SimLink::new(up)?,
            downlink: SimLink::new(down)?,
            emitter: Emitter::new(scenario, node_cfg.node_id, opts.start),
            node: Node::new(node_cfg),
            station: None,
            queue,
            order,
            now: 0,
            timer_gen: 0,
            epoch: 0,
            since_backoff: false,
            sent_batches: BTreeSet::new(),
            acked: BTreeSet::new(),
            timeline: Vec::new(),
            counters: Counters::default(),
            wall_start: Instant::now(),
            store: store.to_path_buf(),
            config,
            opts,
        };
        replay.restart_server()?;
        Ok(replay)
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn node(&self) -> &Node {
        &self.node
    }

    pub fn station(&self) -> Option<&Station> {
        self.station.as_ref()
    }

    /// Batch seqs the station has acknowledged so far.
    pub fn acked_batches(&self) -> &BTreeSet<u32> {
        &self.acked
    }

    /// Stops the station abruptly. Open connections break; frames reaching
    /// the server while it is down are lost.
    pub fn kill_server(&mut self) {
        if self.station.take().is_some() {
            log::info!("station killed at {} ms", self.now);
            self.sever();
        }
    }

    /// Starts a station on the same store, as a fresh process would.
    /// Returns the store's load warnings.
    pub fn restart_server(&mut self) -> Result<Vec<String>, ReplayError> {
        let dispatcher = self
            .config
            .sinks
            .dispatcher(&self.store, crate::alert::ConsoleSink::new((self.opts.console)()));
        let (station, warnings) = Station::from_config(&self.config, &self.store, dispatcher)?;
        for w in &warnings {
            log::warn!("{w}");
        }
        self.station = Some(station);
        Ok(warnings)
    }

    fn is_complete(&self) -> bool {
        self.emitter.is_done() && self.node.unacked().next().is_none()
    }

    fn deadline(&self) -> Millis {
        self.emitter.scenario().end_offset() * 1000 + self.opts.settle_ms
    }

    /// Processes every event scheduled at or before `t`.
    pub fn run_until(&mut self, t: Millis) -> Result<(), ReplayError> {
        while self.queue.peek().is_some_and(|s| s.at <= t) {
            let s = self.queue.pop().expect("peeked");
            self.process(s)?;
        }
        self.now = self.now.max(t);
        Ok(())
    }

    /// Runs until every generated reading is acknowledged or the settle
    /// deadline passes, then summarises.
    pub fn run_to_completion(mut self) -> Result<ReplaySummary, ReplayError> {
        if self.station.is_none() {
            self.restart_server()?;
        }
        let deadline = self.deadline();
        while !self.is_complete() {
            let Some(s) = self.queue.pop() else { break };
            if s.at > deadline {
                break;
            }
            self.process(s)?;
        }
        if let Some(st) = self.station.as_mut() {
            st.sync()?;
        }
        if let Some(w) = self.opts.trace.as_mut() {
            w.flush().map_err(ReplayError::Trace)?;
        }
        let station = self.station.as_ref().expect("station running");
        let events = rain_events(station.repo(), &self.config.analysis).len();
        Ok(ReplaySummary {
            scenario: self.emitter.scenario().name.clone(),
            seed: self.opts.seed,
            readings_generated: self.emitter.emitted(),
            readings_stored: station.repo().len(),
            data_frames_sent: self.counters.data_frames_sent,
            frames_dropped: self.counters.frames_dropped,
            links_severed: self.counters.links_severed,
            forced_disconnects: self.counters.forced_disconnects,
            retransmitted_batches: self.counters.retransmitted_batches,
            reconnects: self.counters.recoveries,
            rain_events: events,
            final_level: station.engine().state().active_level,
            alert_timeline: self.timeline,
            sink_failures: self.counters.sink_failures,
            sim_duration_ms: self.now,
            complete: self.emitter.is_done() && self.node.unacked().next().is_none(),
        })
    }

    fn schedule(&mut self, at: Millis, ev: Ev) {
        self.queue.push(Scheduled {
            at,
            order: self.order,
            ev,
        });
        self.order += 1;
    }

    fn pace(&self, at: Millis) {
        if let Some(speedup) = self.opts.speedup.filter(|s| *s > 0.0) {
            let target = Duration::from_secs_f64(at as f64 / 1000.0 / speedup);
            let elapsed = self.wall_start.elapsed();
            if target > elapsed {
                std::thread::sleep(target - elapsed);
            }
        }
    }

    fn trace(&mut self, side: &str, state: &str, event: &str, actions: &[String]) -> Result<(), ReplayError> {
        if let Some(w) = self.opts.trace.as_mut() {
            writeln!(
                w,
                "{},{side},{},{},{},{}",
                self.now,
                self.node.node_id(),
                csv_field(state),
                csv_field(event),
                csv_field(&actions.join("|"))
            )
            .map_err(ReplayError::Trace)?;
            self.counters.trace_lines += 1;
        }
        Ok(())
    }

    fn process(&mut self, s: Scheduled) -> Result<(), ReplayError> {
        self.pace(s.at);
        self.now = self.now.max(s.at);
        match s.ev {
            Ev::Boot => self.node_event(NodeEvent::TimerFired)?,
            Ev::NodeTimer(gen) => {
                if gen == self.timer_gen {
                    self.node_event(NodeEvent::TimerFired)?;
                }
            }
            Ev::Sample => {
                let up_to = self.opts.start + self.now / 1000;
                let readings = self.emitter.emit_readings(up_to);
                if let Some(next) = self.emitter.next_due() {
                    self.schedule((next - self.opts.start) * 1000, Ev::Sample);
                }
                if !readings.is_empty() {
                    self.node_event(NodeEvent::ReadingsAvailable(readings))?;
                }
            }
            Ev::ToNode { channel, frame, epoch } => {
                if channel == Channel::Data && epoch != self.epoch {
                    self.counters.stale_frames += 1;
                    return Ok(());
                }
                let event = match Packet::decode(&frame) {
                    Ok(Packet::IpAssign { ip }) => NodeEvent::IpAssigned(ip),
                    Ok(Packet::ServerIp { ip }) => NodeEvent::ServerIpReceived(ip),
                    Ok(Packet::ConnAck { nonce, session_id }) => NodeEvent::ConnAckReceived { nonce, session_id },
                    Ok(Packet::DataAck { seq, .. }) => NodeEvent::DataAckReceived(seq),
                    Ok(other) => {
                        log::warn!("node received unexpected {:?}", other.msg_type());
                        return Ok(());
                    }
                    Err(e) => {
                        log::warn!("node dropped undecodable frame: {e}");
                        return Ok(());
                    }
                };
                self.node_event(event)?;
            }
            Ev::ToServer { channel, frame, epoch } => {
                if self.station.is_none() {
                    self.counters.lost_to_server_down += 1;
                    return Ok(());
                }
                if channel == Channel::Data && epoch != self.epoch {
                    self.counters.stale_frames += 1;
                    return Ok(());
                }
                match Packet::decode(&frame).map(Station::event_for) {
                    Ok(Some(event)) => self.server_event(event)?,
                    Ok(None) => log::warn!("server ignored frame on {channel:?} channel"),
                    Err(e) => log::warn!("server dropped undecodable frame: {e}"),
                }
            }
            Ev::NodeLinkDown => self.node_event(NodeEvent::LinkDown)?,
            Ev::ServerLinkDown { epoch } => {
                // A later dial has already replaced the broken connection.
                if self.station.is_some() && epoch + 1 == self.epoch {
                    self.server_event(ServerEvent::LinkDown)?;
                }
            }
            Ev::ForcedDisconnect => {
                if matches!(self.node.state(), NodeState::Streaming | NodeState::Connecting) {
                    self.counters.forced_disconnects += 1;
                    self.sever();
                }
            }
        }
        Ok(())
    }

    fn sever(&mut self) {
        self.counters.links_severed += 1;
        let broken = self.epoch;
        self.epoch += 1;
        self.uplink.reset_queue();
        self.downlink.reset_queue();
        self.schedule(self.now, Ev::NodeLinkDown);
        self.schedule(self.now, Ev::ServerLinkDown { epoch: broken });
    }

    fn node_event(&mut self, event: NodeEvent) -> Result<(), ReplayError> {
        let event_name = event.name();
        let before = self.node.state();
        let actions = self.node.handle(self.now, event);
        let after = self.node.state();
        if matches!(after, NodeState::Backoff { .. }) {
            self.since_backoff = true;
        }
        if before == NodeState::Connecting && after == NodeState::Streaming && self.since_backoff {
            self.counters.recoveries += 1;
            self.since_backoff = false;
        }
        let names: Vec<String> = actions.iter().map(action_name).collect();
        self.trace("node", &after.to_string(), &event_name, &names)?;
        let latency = self.config.link.latency_ms;
        for a in actions {
            match a {
                NodeAction::ToIsp(Packet::ReqIp { node_id }) => {
                    let reply = Packet::IpAssign { ip: sim_ip(node_id) };
                    let frame = reply.encode().expect("fixed-size packet");
                    self.schedule(self.now + 2 * latency, Ev::ToNode { channel: Channel::Isp, frame, epoch: 0 });
                }
                NodeAction::ToIsp(p) => log::warn!("ISP ignores {:?}", p.msg_type()),
                NodeAction::ToControl(p) => {
                    let frame = p.encode().expect("fixed-size packet");
                    self.schedule(self.now + latency, Ev::ToServer { channel: Channel::Control, frame, epoch: 0 });
                }
                NodeAction::Dial => {
                    self.epoch += 1;
                    self.uplink.reset_queue();
                    self.downlink.reset_queue();
                }
                NodeAction::ToData(p) => {
                    if let Packet::SendData(d) = &p {
                        if !self.sent_batches.insert(d.seq) {
                            self.counters.retransmitted_batches += 1;
                        }
                    }
                    let frame = p.encode().expect("batches respect the frame limit");
                    self.counters.data_frames_sent += 1;
                    match self.uplink.deliver(&frame, self.now) {
                        Delivery::Delivered { at } => {
                            let epoch = self.epoch;
                            self.schedule(at, Ev::ToServer { channel: Channel::Data, frame, epoch });
                        }
                        Delivery::Dropped => self.counters.frames_dropped += 1,
                        Delivery::LinkSevered => self.sever(),
                    }
                }
                NodeAction::SetTimer(at) => {
                    self.timer_gen += 1;
                    let gen = self.timer_gen;
                    self.schedule(at.max(self.now), Ev::NodeTimer(gen));
                }
                NodeAction::Log(m) => log::debug!("node: {m}"),
            }
        }
        Ok(())
    }

    fn server_event(&mut self, event: ServerEvent) -> Result<(), ReplayError> {
        let node_id = self.node.node_id();
        let event_name = event.name();
        let station = self.station.as_mut().expect("caller checked");
        let out = station.handle(node_id, event)?;
        let state = station
            .server()
            .session(node_id)
            .map(|s| s.state.to_string())
            .unwrap_or_default();
        for (n, results) in out.notifications {
            self.counters.sink_failures += results
                .iter()
                .filter(|r| matches!(r.outcome, DeliveryOutcome::Failed(_)))
                .count() as u64;
            self.timeline.push(n);
        }
        let names: Vec<String> = out.replies.iter().map(server_action_name).collect();
        self.trace("server", &state, &event_name, &names)?;
        let latency = self.config.link.latency_ms;
        for a in out.replies {
            match a {
                ServerAction::ToControl(p) => {
                    let frame = p.encode().expect("fixed-size packet");
                    self.schedule(self.now + latency, Ev::ToNode { channel: Channel::Control, frame, epoch: 0 });
                }
                ServerAction::ToData(p) => {
                    if let Packet::DataAck { seq, .. } = p {
                        self.acked.insert(seq);
                    }
                    let frame = p.encode().expect("fixed-size packet");
                    self.counters.data_frames_sent += 1;
                    match self.downlink.deliver(&frame, self.now) {
                        Delivery::Delivered { at } => {
                            let epoch = self.epoch;
                            self.schedule(at, Ev::ToNode { channel: Channel::Data, frame, epoch });
                        }
                        Delivery::Dropped => self.counters.frames_dropped += 1,
                        Delivery::LinkSevered => self.sever(),
                    }
                }
                ServerAction::Forward { .. } => unreachable!("station consumes forwards"),
                ServerAction::Log(m) => log::debug!("server: {m}"),
            }
        }
        Ok(())
    }
}

/// Runs `scenario` to completion into `store`.
pub fn run_replay(
    config: Config,
    scenario: Scenario,
    store: &Path,
    opts: ReplayOptions,
) -> Result<ReplaySummary, ReplayError> {
    Replay::new(config, scenario, store, opts)?.run_to_completion()
}
