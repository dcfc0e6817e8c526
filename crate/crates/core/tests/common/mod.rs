#![allow(dead_code)]

use std::net::Ipv4Addr;

use ews_core::config::Config;
use ews_core::domain::{NodeId, SensorKind};
use ews_core::nodesim::{Scenario, ScenarioStep};
use ews_core::wire::{Packet, SendDataPayload};
use rand::{Rng, RngExt};

/// Bit-at-a-time CRC-16 (poly 0x1021, init 0xFFFF, no reflection, no final
/// xor), written independently of the table-driven codec.
pub fn crc16_bitwise(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &byte in data {
        for bit in (0..8).rev() {
            let input = (byte >> bit) & 1 == 1;
            let top = crc & 0x8000 != 0;
            crc <<= 1;
            if input != top {
                crc ^= 0x1021;
            }
        }
    }
    crc
}

pub fn config_toml(drop: f64, extra: &str) -> String {
    format!(
        "[thresholds]\n\
         mt_rain_mm_per_h = 20\n\
         mt_pore_kpa = 40\n\
         mt_displacement_mm = 5\n\
         mt_inclination_deg = 2\n\
         [calibration]\n\
         rain_gauge = {{ gain = 0.2 }}\n\
         piezometer = {{ gain = 0.1 }}\n\
         extensometer = {{ gain = 0.01 }}\n\
         inclinometer = {{ gain = 0.001 }}\n\
         tiltmeter = {{ gain = 0.001 }}\n\
         [link]\n\
         drop_probability = {drop}\n\
         {extra}"
    )
}

pub fn config(drop: f64) -> Config {
    Config::from_toml(&config_toml(drop, "")).expect("test config")
}

/// `n_steps` timestamps `interval_s` apart, one reading per sensor each,
/// with slowly varying values well below every threshold.
pub fn quiet_scenario(n_steps: u64, interval_s: u64) -> Scenario {
    let mut steps = Vec::new();
    for i in 0..n_steps {
        for (k, sensor) in SensorKind::ALL.into_iter().enumerate() {
            steps.push(ScenarioStep {
                t_offset: i * interval_s,
                sensor,
                raw: ((i * 7 + k as u64 * 13) % 17) as i32,
            });
        }
    }
    Scenario::new("quiet", steps)
}

pub fn random_sensor<R: Rng>(rng: &mut R) -> SensorKind {
    SensorKind::ALL[rng.random_range(0..SensorKind::ALL.len())]
}

pub fn random_packet<R: Rng>(rng: &mut R) -> Packet {
    let addr = |rng: &mut R| Ipv4Addr::from(rng.random::<u32>());
    match rng.random_range(0..9) {
        0 => Packet::ReqIp {
            node_id: NodeId(rng.random()),
        },
        1 => Packet::IpAssign { ip: addr(rng) },
        2 => Packet::SendIp {
            node_id: NodeId(rng.random()),
            ip: addr(rng),
        },
        3 => Packet::ServerIp { ip: addr(rng) },
        4 => Packet::ReqConn {
            node_id: NodeId(rng.random()),
            nonce: rng.random(),
        },
        5 => Packet::ConnAck {
            nonce: rng.random(),
            session_id: rng.random(),
        },
        6 => {
            let n = rng.random_range(0..=255usize);
            Packet::SendData(SendDataPayload {
                session_id: rng.random(),
                seq: rng.random(),
                timestamp: rng.random(),
                readings: (0..n).map(|_| (random_sensor(rng), rng.random())).collect(),
            })
        }
        7 => Packet::DataAck {
            session_id: rng.random(),
            seq: rng.random(),
        },
        _ => Packet::Heartbeat,
    }
}
