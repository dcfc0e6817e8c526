//! Connection lifecycle between field nodes and the base station.
//!
//! Both sides are pure step functions over explicit state. Transports (the
//! in-process simulated link or a TCP socket) execute the returned actions.
//!
//! Two channels exist. The data channel carries `ReqConn`, `SendData` and
//! their acknowledgements and may drop, delay or sever. The control channel
//! carries the out-of-band IP announcement (`SendIp`/`ServerIp`) and is
//! lossless.

mod link;
mod node;
mod server;

use std::time::Duration;

pub use link::{link_deliver, Delivery, LinkConfig, LinkConfigError, SimLink};
pub use node::{
    node_step, Batch, Node, NodeAction, NodeConfig, NodeEvent, NodeState,
};
pub use server::{
    server_step, Registry, Server, ServerAction, ServerEvent, ServerSession,
    ServerSessionState,
};

/// Simulated or wall-clock time in milliseconds.
pub type Millis = u64;

const BACKOFF_CAP: Duration = Duration::from_secs(60);

/// Reconnect delay after `attempt` consecutive failures:
/// `min(2^(attempt-1) s, 60 s)`.
pub fn backoff_delay(attempt: u32) -> Duration {
    let exp = attempt.max(1) - 1;
    if exp >= 6 {
        return BACKOFF_CAP;
    }
    Duration::from_secs(1 << exp).min(BACKOFF_CAP)
}
