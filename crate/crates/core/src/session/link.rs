use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Millis;

/// GPRS class-10 style downlink ceiling.
pub const DEFAULT_BANDWIDTH_BPS: u64 = 115_200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkConfigError {
    #[error("{name} must be within [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("bandwidth_cap must be positive")]
    Bandwidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub drop_probability: f64,
    pub disconnect_probability_per_frame: f64,
    pub latency_ms: Millis,
    pub bandwidth_bps: u64,
    pub rng_seed: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            drop_probability: 0.0,
            disconnect_probability_per_frame: 0.0,
            latency_ms: 200,
            bandwidth_bps: DEFAULT_BANDWIDTH_BPS,
            rng_seed: 0,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), LinkConfigError> {
        for (name, value) in [
            ("drop_probability", self.drop_probability),
            ("disconnect_probability_per_frame", self.disconnect_probability_per_frame),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(LinkConfigError::Probability { name, value });
            }
        }
        if self.bandwidth_bps == 0 {
            return Err(LinkConfigError::Bandwidth);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Delivered { at: Millis },
    Dropped,
    LinkSevered,
}

/// One direction of the simulated GPRS data link. Frames are serialised
/// behind each other at the configured bandwidth, then delayed by the fixed
/// latency. Every frame draws exactly two uniforms from the seeded
/// generator, so the outcome sequence depends only on the seed and the
/// number of frames offered.
#[derive(Debug, Clone)]
pub struct SimLink {
    cfg: LinkConfig,
    rng: ChaCha8Rng,
    busy_until: Millis,
}

impl SimLink {
    pub fn new(cfg: LinkConfig) -> Result<Self, LinkConfigError> {
        cfg.validate()?;
        Ok(SimLink {
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            cfg,
            busy_until: 0,
        })
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn deliver(&mut self, frame: &[u8], now: Millis) -> Delivery {
        let sever: f64 = self.rng.random();
        let drop: f64 = self.rng.random();
        if sever < self.cfg.disconnect_probability_per_frame {
            return Delivery::LinkSevered;
        }
        let bits = frame.len() as u64 * 8;
        let tx_ms = (bits * 1000).div_ceil(self.cfg.bandwidth_bps);
        let start = now.max(self.busy_until);
        self.busy_until = start + tx_ms;
        if drop < self.cfg.drop_probability {
            return Delivery::Dropped;
        }
        Delivery::Delivered {
            at: self.busy_until + self.cfg.latency_ms,
        }
    }

    /// Clears any queued transmission, as when a connection is torn down.
    pub fn reset_queue(&mut self) {
        self.busy_until = 0;
    }
}

pub fn link_deliver(link: &mut SimLink, frame: &[u8], now: Millis) -> Delivery {
    link.deliver(frame, now)
}
