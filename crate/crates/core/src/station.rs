//! Base station: session routing, calibrated ingest and alert evaluation
//! over one store directory. Transports feed it decoded packets and carry
//! its replies.

use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::alert::{AlertEngine, Dispatcher, Notification, SinkResult};
use crate::config::Config;
use crate::domain::NodeId;
use crate::ingest::{CalibrationTable, IngestError, Repository};
use crate::session::{Registry, Server, ServerAction, ServerEvent};
use crate::wire::Packet;

pub const CLIENTS_FILE: &str = "clients.csv";
pub const DEFAULT_SERVER_IP: Ipv4Addr = Ipv4Addr::new(192, 168, 1, 1);

#[derive(Debug, Error)]
pub enum StationError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("client registry {path}: {source}")]
    Registry {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StationStats {
    pub batches_received: u64,
    pub readings_stored: u64,
    /// Readings already in the store when their batch arrived again.
    pub duplicate_readings: u64,
    /// Batches acknowledged without storing because calibration failed.
    pub rejected_batches: u64,
    pub acks_sent: u64,
}

/// Replies for the transport plus any notifications raised.
#[derive(Debug, Default)]
pub struct StationOutput {
    pub replies: Vec<ServerAction>,
    pub notifications: Vec<(Notification, Vec<SinkResult>)>,
}

pub struct Station {
    server: Server,
    repo: Repository,
    calibration: CalibrationTable,
    engine: AlertEngine,
    stats: StationStats,
}

impl Station {
    /// Opens the store in `dir` (repairing a torn tail), the persisted
    /// client list, and the last alert level. Returns load warnings.
    pub fn open(
        dir: &Path,
        server_ip: Ipv4Addr,
        calibration: CalibrationTable,
        engine: AlertEngine,
    ) -> Result<(Station, Vec<String>), StationError> {
        let (repo, warnings) = Repository::open(dir)?;
        let clients = dir.join(CLIENTS_FILE);
        let registry = Registry::persistent(server_ip, &clients).map_err(|source| StationError::Registry {
            path: clients,
            source,
        })?;
        let station = Station {
            server: Server::new(registry),
            repo,
            calibration,
            engine: engine.resume_from(dir),
            stats: StationStats::default(),
        };
        Ok((station, warnings))
    }

    /// Station for `config` writing into `dir` with the given sinks.
    pub fn from_config(
        config: &Config,
        dir: &Path,
        dispatcher: Dispatcher,
    ) -> Result<(Station, Vec<String>), StationError> {
        let engine = AlertEngine::new(config.thresholds, config.analysis, dispatcher);
        Station::open(dir, DEFAULT_SERVER_IP, config.calibration.clone(), engine)
    }

    pub fn repo(&self) -> &Repository {
        &self.repo
    }

    pub fn engine(&self) -> &AlertEngine {
        &self.engine
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn stats(&self) -> StationStats {
        self.stats
    }

    pub fn sync(&mut self) -> Result<(), StationError> {
        Ok(self.repo.sync()?)
    }

    /// Maps an inbound packet to a session event. Packets a server never
    /// receives yield `None`.
    pub fn event_for(packet: Packet) -> Option<ServerEvent> {
        match packet {
            Packet::SendIp { node_id, ip } => Some(ServerEvent::AnnounceReceived { node_id, ip }),
            Packet::ReqConn { node_id, nonce } => Some(ServerEvent::ReqConnReceived { node_id, nonce }),
            Packet::SendData(p) => Some(ServerEvent::SendDataReceived(p)),
            _ => None,
        }
    }

    /// Runs one session event. Forwarded batches are stored before the
    /// matching acknowledgement is released; a store write failure drops the
    /// acknowledgement and is returned as an error.
    pub fn handle(&mut self, node: NodeId, event: ServerEvent) -> Result<StationOutput, StationError> {
        let mut out = StationOutput::default();
        for action in self.server.handle(node, event) {
            match action {
                ServerAction::Forward { node_id, payload } => {
                    self.stats.batches_received += 1;
                    match self.repo.ingest_batch(&payload, node_id, &self.calibration) {
                        Ok(added) => {
                            self.stats.readings_stored += added as u64;
                            self.stats.duplicate_readings += (payload.readings.len() - added) as u64;
                            if added > 0 {
                                out.notifications = self.engine.evaluate(&self.repo, payload.timestamp);
                            }
                        }
                        Err(IngestError::Io { path, source }) => {
                            log::error!("store write failed, batch {} not acknowledged", payload.seq);
                            return Err(IngestError::Io { path, source }.into());
                        }
                        Err(e) => {
                            self.stats.rejected_batches += 1;
                            log::error!("node {node_id} batch {} discarded: {e}", payload.seq);
                        }
                    }
                }
                ServerAction::ToData(p @ Packet::DataAck { .. }) => {
                    self.stats.acks_sent += 1;
                    out.replies.push(ServerAction::ToData(p));
                }
                other => out.replies.push(other),
            }
        }
        Ok(out)
    }
}
