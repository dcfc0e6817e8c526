//! Binary framing for the node/base-station protocol.
//!
//! Frame layout (all multi-byte integers big-endian):
//!
//! ```text
//! +------+------+---------+----------+-------------+---------+--------+
//! | 0x4C | 0x53 | version | msg_type | payload_len | payload | crc16  |
//! |  1B  |  1B  |   1B    |    1B    |     2B      |  N B    |   2B   |
//! +------+------+---------+----------+-------------+---------+--------+
//! ```
//!
//! The CRC is CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection,
//! no final xor) over `version..payload` inclusive.

use std::net::Ipv4Addr;

use thiserror::Error;

use crate::domain::{NodeId, SensorKind};

pub const MAGIC: [u8; 2] = [0x4C, 0x53];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 6;
pub const TRAILER_LEN: usize = 2;
pub const MAX_PAYLOAD: usize = u16::MAX as usize;
pub const MAX_READINGS: usize = u8::MAX as usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("bad magic byte 0x{found:02X} at offset {offset}")]
    BadMagic { offset: usize, found: u8 },
    #[error("unsupported version 0x{found:02X} at offset {offset}")]
    BadVersion { offset: usize, found: u8 },
    #[error("length mismatch at offset {offset}: need {expected} bytes, have {actual}")]
    LengthMismatch {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("crc mismatch at offset {offset}: computed 0x{computed:04X}, frame carries 0x{carried:04X}")]
    CrcMismatch {
        offset: usize,
        computed: u16,
        carried: u16,
    },
    #[error("unknown message type 0x{code:02X} at offset {offset}")]
    UnknownType { offset: usize, code: u8 },
    #[error("payload of {0} bytes exceeds the 65535-byte frame limit")]
    FrameTooLarge(usize),
    #[error("unknown sensor code 0x{code:02X} at payload offset {offset}")]
    UnknownSensor { offset: usize, code: u8 },
    #[error("reading count {declared} does not match {actual} bytes of reading data")]
    CountMismatch { declared: usize, actual: usize },
    #[error("too many readings in one batch: {0} (max 255)")]
    TooManyReadings(usize),
    #[error("{msg:?} payload must be {expected} bytes, got {actual}")]
    PayloadSize {
        msg: MessageType,
        expected: usize,
        actual: usize,
    },
}

const CRC_TABLE: [u16; 256] = {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
};

/// CRC-16/CCITT-FALSE.
pub fn crc16(data: &[u8]) -> u16 {
    data.iter().fold(0xFFFF, |crc, &b| {
        (crc << 8) ^ CRC_TABLE[usize::from((crc >> 8) as u8 ^ b)]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    ReqIp = 0x01,
    IpAssign = 0x02,
    SendIp = 0x03,
    ServerIp = 0x04,
    ReqConn = 0x05,
    ConnAck = 0x06,
    SendData = 0x07,
    DataAck = 0x08,
    Heartbeat = 0x09,
}

impl MessageType {
    pub const ALL: [MessageType; 9] = [
        MessageType::ReqIp,
        MessageType::IpAssign,
        MessageType::SendIp,
        MessageType::ServerIp,
        MessageType::ReqConn,
        MessageType::ConnAck,
        MessageType::SendData,
        MessageType::DataAck,
        MessageType::Heartbeat,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<MessageType> {
        MessageType::ALL.into_iter().find(|m| m.code() == code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub version: u8,
    pub msg_type: MessageType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MessageType, payload: Vec<u8>) -> Self {
        Frame {
            version: VERSION,
            msg_type,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + TRAILER_LEN
    }
}

pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, WireError> {
    let len = f.payload.len();
    if len > MAX_PAYLOAD {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut out = Vec::with_capacity(f.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(f.version);
    out.push(f.msg_type.code());
    out.extend_from_slice(&(len as u16).to_be_bytes());
    out.extend_from_slice(&f.payload);
    let crc = crc16(&out[2..]);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, WireError> {
    let (frame, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(WireError::LengthMismatch {
            offset: 4,
            expected: used,
            actual: bytes.len(),
        });
    }
    Ok(frame)
}

/// Decodes the frame at the start of `bytes`, returning it with the number
/// of bytes consumed. Trailing bytes are left alone.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Frame, usize), WireError> {
    for (offset, &expected) in MAGIC.iter().enumerate() {
        match bytes.get(offset) {
            Some(&b) if b == expected => {}
            Some(&b) => return Err(WireError::BadMagic { offset, found: b }),
            None => {
                return Err(WireError::LengthMismatch {
                    offset,
                    expected: HEADER_LEN + TRAILER_LEN,
                    actual: bytes.len(),
                })
            }
        }
    }
    if let Some(&v) = bytes.get(2) {
        if v != VERSION {
            return Err(WireError::BadVersion { offset: 2, found: v });
        }
    }
    if bytes.len() < HEADER_LEN {
        return Err(WireError::LengthMismatch {
            offset: bytes.len(),
            expected: HEADER_LEN + TRAILER_LEN,
            actual: bytes.len(),
        });
    }
    let len = usize::from(u16::from_be_bytes([bytes[4], bytes[5]]));
    let total = HEADER_LEN + len + TRAILER_LEN;
    if bytes.len() < total {
        return Err(WireError::LengthMismatch {
            offset: 4,
            expected: total,
            actual: bytes.len(),
        });
    }
    let crc_at = HEADER_LEN + len;
    let computed = crc16(&bytes[2..crc_at]);
    let carried = u16::from_be_bytes([bytes[crc_at], bytes[crc_at + 1]]);
    if computed != carried {
        return Err(WireError::CrcMismatch {
            offset: crc_at,
            computed,
            carried,
        });
    }
    let msg_type = MessageType::from_code(bytes[3])
        .ok_or(WireError::UnknownType { offset: 3, code: bytes[3] })?;
    Ok((
        Frame {
            version: bytes[2],
            msg_type,
            payload: bytes[HEADER_LEN..crc_at].to_vec(),
        },
        total,
    ))
}

/// Incremental decoder for byte streams. Garbage before a valid frame is
/// skipped one byte at a time until the magic lines up again.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
    skipped: usize,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes discarded so far while resynchronising.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn next_frame(&mut self) -> Option<Frame> {
        loop {
            if self.buf.is_empty() {
                return None;
            }
            match decode_prefix(&self.buf) {
                Ok((frame, used)) => {
                    self.buf.drain(..used);
                    return Some(frame);
                }
                Err(WireError::LengthMismatch { .. }) => return None,
                Err(e) => {
                    log::debug!("frame reader resync: {e}");
                    self.buf.remove(0);
                    self.skipped += 1;
                }
            }
        }
    }
}

/// Body of a SENDDATA packet: one batch of raw readings sharing a timestamp.
/// Reading `i` in the batch carries sequence number `seq + i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendDataPayload {
    pub session_id: u32,
    pub seq: u32,
    pub timestamp: u64,
    pub readings: Vec<(SensorKind, i32)>,
}

const SENDDATA_FIXED: usize = 4 + 4 + 8 + 1;

pub fn encode_senddata(p: &SendDataPayload) -> Result<Vec<u8>, WireError> {
    if p.readings.len() > MAX_READINGS {
        return Err(WireError::TooManyReadings(p.readings.len()));
    }
    let mut out = Vec::with_capacity(SENDDATA_FIXED + 5 * p.readings.len());
    out.extend_from_slice(&p.session_id.to_be_bytes());
    out.extend_from_slice(&p.seq.to_be_bytes());
    out.extend_from_slice(&p.timestamp.to_be_bytes());
    out.push(p.readings.len() as u8);
    for (sensor, raw) in &p.readings {
        out.push(sensor.code());
        out.extend_from_slice(&raw.to_be_bytes());
    }
    Ok(out)
}

pub fn decode_senddata(bytes: &[u8]) -> Result<SendDataPayload, WireError> {
    if bytes.len() < SENDDATA_FIXED {
        return Err(WireError::PayloadSize {
            msg: MessageType::SendData,
            expected: SENDDATA_FIXED,
            actual: bytes.len(),
        });
    }
    let session_id = be_u32(&bytes[0..4]);
    let seq = be_u32(&bytes[4..8]);
    let timestamp = u64::from_be_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let count = usize::from(bytes[16]);
    let body = &bytes[SENDDATA_FIXED..];
    if body.len() != count * 5 {
        return Err(WireError::CountMismatch {
            declared: count,
            actual: body.len(),
        });
    }
    let readings = body
        .chunks_exact(5)
        .enumerate()
        .map(|(i, chunk)| {
            let sensor = SensorKind::from_code(chunk[0]).ok_or(WireError::UnknownSensor {
                offset: SENDDATA_FIXED + i * 5,
                code: chunk[0],
            })?;
            Ok((sensor, i32::from_be_bytes(chunk[1..5].try_into().expect("4 bytes"))))
        })
        .collect::<Result<Vec<_>, WireError>>()?;
    Ok(SendDataPayload {
        session_id,
        seq,
        timestamp,
        readings,
    })
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes(b.try_into().expect("4 bytes"))
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes(b.try_into().expect("2 bytes"))
}

/// Typed view of every protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    /// Node asks its ISP (modem) for an address.
    ReqIp { node_id: NodeId },
    /// ISP hands the node an address.
    IpAssign { ip: Ipv4Addr },
    /// Node announces its address and asks for the server's.
    SendIp { node_id: NodeId, ip: Ipv4Addr },
    ServerIp { ip: Ipv4Addr },
    ReqConn { node_id: NodeId, nonce: u32 },
    ConnAck { nonce: u32, session_id: u32 },
    SendData(SendDataPayload),
    DataAck { session_id: u32, seq: u32 },
    Heartbeat,
}

impl Packet {
    pub fn msg_type(&self) -> MessageType {
        match self {
            Packet::ReqIp { .. } => MessageType::ReqIp,
            Packet::IpAssign { .. } => MessageType::IpAssign,
            Packet::SendIp { .. } => MessageType::SendIp,
            Packet::ServerIp { .. } => MessageType::ServerIp,
            Packet::ReqConn { .. } => MessageType::ReqConn,
            Packet::ConnAck { .. } => MessageType::ConnAck,
            Packet::SendData(_) => MessageType::SendData,
            Packet::DataAck { .. } => MessageType::DataAck,
            Packet::Heartbeat => MessageType::Heartbeat,
        }
    }

    pub fn to_frame(&self) -> Result<Frame, WireError> {
        let payload = match self {
            Packet::ReqIp { node_id } => node_id.0.to_be_bytes().to_vec(),
            Packet::IpAssign { ip } | Packet::ServerIp { ip } => ip.octets().to_vec(),
            Packet::SendIp { node_id, ip } => {
                let mut v = node_id.0.to_be_bytes().to_vec();
                v.extend_from_slice(&ip.octets());
                v
            }
            Packet::ReqConn { node_id, nonce } => {
                let mut v = node_id.0.to_be_bytes().to_vec();
                v.extend_from_slice(&nonce.to_be_bytes());
                v
            }
            Packet::ConnAck { nonce, session_id } => {
                let mut v = nonce.to_be_bytes().to_vec();
                v.extend_from_slice(&session_id.to_be_bytes());
                v
            }
            Packet::SendData(p) => encode_senddata(p)?,
            Packet::DataAck { session_id, seq } => {
                let mut v = session_id.to_be_bytes().to_vec();
                v.extend_from_slice(&seq.to_be_bytes());
                v
            }
            Packet::Heartbeat => Vec::new(),
        };
        if payload.len() > MAX_PAYLOAD {
            return Err(WireError::FrameTooLarge(payload.len()));
        }
        Ok(Frame::new(self.msg_type(), payload))
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        encode_frame(&self.to_frame()?)
    }

    pub fn from_frame(f: &Frame) -> Result<Packet, WireError> {
        let p = &f.payload;
        let want = |n: usize| {
            if p.len() == n {
                Ok(())
            } else {
                Err(WireError::PayloadSize {
                    msg: f.msg_type,
                    expected: n,
                    actual: p.len(),
                })
            }
        };
        let ip_at = |i: usize| Ipv4Addr::new(p[i], p[i + 1], p[i + 2], p[i + 3]);
        Ok(match f.msg_type {
            MessageType::ReqIp => {
                want(2)?;
                Packet::ReqIp {
                    node_id: NodeId(be_u16(&p[0..2])),
                }
            }
            MessageType::IpAssign => {
                want(4)?;
                Packet::IpAssign { ip: ip_at(0) }
            }
            MessageType::SendIp => {
                want(6)?;
                Packet::SendIp {
                    node_id: NodeId(be_u16(&p[0..2])),
                    ip: ip_at(2),
                }
            }
            MessageType::ServerIp => {
                want(4)?;
                Packet::ServerIp { ip: ip_at(0) }
            }
            MessageType::ReqConn => {
                want(6)?;
                Packet::ReqConn {
                    node_id: NodeId(be_u16(&p[0..2])),
                    nonce: be_u32(&p[2..6]),
                }
            }
            MessageType::ConnAck => {
                want(8)?;
                Packet::ConnAck {
                    nonce: be_u32(&p[0..4]),
                    session_id: be_u32(&p[4..8]),
                }
            }
            MessageType::SendData => Packet::SendData(decode_senddata(p)?),
            MessageType::DataAck => {
                want(8)?;
                Packet::DataAck {
                    session_id: be_u32(&p[0..4]),
                    seq: be_u32(&p[4..8]),
                }
            }
            MessageType::Heartbeat => {
                want(0)?;
                Packet::Heartbeat
            }
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Packet, WireError> {
        Packet::from_frame(&decode_frame(bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Shift-register CRC, one message bit at a time. Independent of the
    /// table-driven path above.
    fn crc16_bitwise(data: &[u8]) -> u16 {
        let mut reg: u16 = 0xFFFF;
        for &byte in data {
            for i in (0..8).rev() {
                let bit = (byte >> i) & 1 == 1;
                let top = reg & 0x8000 != 0;
                reg <<= 1;
                if top != bit {
                    reg ^= 0x1021;
                }
            }
        }
        reg
    }

    #[test]
    fn crc_examples() {
        assert_eq!(crc16(b""), 0xFFFF);
        assert_eq!(crc16_bitwise(b"123456789"), 0x29B1);
        assert_eq!(crc16(b"123456789"), 0x29B1);
        assert_eq!(crc16_bitwise(&[0x00]), 0xE1F0);
        assert_eq!(crc16(&[0x00]), 0xE1F0);
    }

    #[test]
    fn crc_table_matches_bitwise_on_many_inputs() {
        let data: Vec<u8> = (0..=255u8).chain((0..=255u8).rev()).collect();
        for n in 0..data.len() {
            assert_eq!(crc16(&data[..n]), crc16_bitwise(&data[..n]), "prefix {n}");
        }
    }

    #[test]
    fn heartbeat_frame_bytes() {
        let bytes = encode_frame(&Frame::new(MessageType::Heartbeat, vec![])).unwrap();
        assert_eq!(crc16_bitwise(&[0x01, 0x09, 0x00, 0x00]), 0x6CE5);
        assert_eq!(bytes, vec![0x4C, 0x53, 0x01, 0x09, 0x00, 0x00, 0x6C, 0xE5]);
    }

    #[test]
    fn reqip_frame_bytes() {
        let bytes = Packet::ReqIp { node_id: NodeId(7) }.encode().unwrap();
        assert_eq!(bytes.len(), 10);
        assert_eq!(crc16_bitwise(&[0x01, 0x01, 0x00, 0x02, 0x00, 0x07]), 0xFF66);
        assert_eq!(
            bytes,
            vec![0x4C, 0x53, 0x01, 0x01, 0x00, 0x02, 0x00, 0x07, 0xFF, 0x66]
        );
    }

    #[test]
    fn oversize_payload_rejected() {
        let f = Frame::new(MessageType::SendData, vec![0; MAX_PAYLOAD + 1]);
        assert_eq!(encode_frame(&f), Err(WireError::FrameTooLarge(MAX_PAYLOAD + 1)));
        let f = Frame::new(MessageType::SendData, vec![0; MAX_PAYLOAD]);
        assert_eq!(encode_frame(&f).unwrap().len(), MAX_PAYLOAD + 8);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let good = Packet::ReqIp { node_id: NodeId(7) }.encode().unwrap();

        let mut b = good.clone();
        b[0] = 0x00;
        assert!(matches!(decode_frame(&b), Err(WireError::BadMagic { offset: 0, .. })));

        let mut b = good.clone();
        b[2] = 0x02;
        assert!(matches!(decode_frame(&b), Err(WireError::BadVersion { offset: 2, .. })));

        assert!(matches!(
            decode_frame(&good[..good.len() - 1]),
            Err(WireError::LengthMismatch { .. })
        ));

        let mut b = good.clone();
        b[7] ^= 0x01;
        assert!(matches!(decode_frame(&b), Err(WireError::CrcMismatch { offset: 8, .. })));

        // Unknown type with a CRC that is valid for it.
        let mut b = good.clone();
        b[3] = 0x7F;
        let crc = crc16(&b[2..8]);
        b[8..10].copy_from_slice(&crc.to_be_bytes());
        assert_eq!(
            decode_frame(&b),
            Err(WireError::UnknownType { offset: 3, code: 0x7F })
        );

        let mut b = good.clone();
        b.push(0);
        assert!(matches!(decode_frame(&b), Err(WireError::LengthMismatch { .. })));
    }

    #[test]
    fn truncated_length_field() {
        // Declares 16 payload bytes but carries 2.
        let b = [0x4C, 0x53, 0x01, 0x01, 0x00, 0x10, 0x00, 0x07, 0x00, 0x00];
        assert_eq!(
            decode_frame(&b),
            Err(WireError::LengthMismatch {
                offset: 4,
                expected: 24,
                actual: 10
            })
        );
    }

    #[test]
    fn senddata_examples() {
        let empty = SendDataPayload {
            session_id: 1,
            seq: 2,
            timestamp: 3,
            readings: vec![],
        };
        let bytes = encode_senddata(&empty).unwrap();
        assert_eq!(*bytes.last().unwrap(), 0x00);
        assert_eq!(decode_senddata(&bytes).unwrap(), empty);

        let one = SendDataPayload {
            readings: vec![(SensorKind::RainGauge, 3)],
            ..empty.clone()
        };
        let bytes = encode_senddata(&one).unwrap();
        assert_eq!(bytes.len(), 17 + 5);
        assert_eq!(&bytes[16..], &[0x01, 0x01, 0x00, 0x00, 0x00, 0x03]);
        assert_eq!(decode_senddata(&bytes).unwrap(), one);

        let full = SendDataPayload {
            readings: (0..255).map(|i| (SensorKind::Tiltmeter, -i)).collect(),
            ..empty.clone()
        };
        let bytes = encode_senddata(&full).unwrap();
        assert_eq!(decode_senddata(&bytes).unwrap(), full);

        let over = SendDataPayload {
            readings: (0..256).map(|i| (SensorKind::Tiltmeter, i)).collect(),
            ..empty
        };
        assert_eq!(encode_senddata(&over), Err(WireError::TooManyReadings(256)));
    }

    #[test]
    fn senddata_rejects_bad_sensor_and_count() {
        let p = SendDataPayload {
            session_id: 9,
            seq: 1,
            timestamp: 0,
            readings: vec![(SensorKind::Piezometer, -5), (SensorKind::RainGauge, 1)],
        };
        let mut bytes = encode_senddata(&p).unwrap();
        let mut bad = bytes.clone();
        bad[17 + 5] = 0x09;
        assert_eq!(
            decode_senddata(&bad),
            Err(WireError::UnknownSensor { offset: 22, code: 0x09 })
        );
        bytes[16] = 3;
        assert_eq!(
            decode_senddata(&bytes),
            Err(WireError::CountMismatch { declared: 3, actual: 10 })
        );
    }

    #[test]
    fn packets_round_trip() {
        let ip = Ipv4Addr::new(10, 0, 0, 7);
        let all = vec![
            Packet::ReqIp { node_id: NodeId(7) },
            Packet::IpAssign { ip },
            Packet::SendIp { node_id: NodeId(7), ip },
            Packet::ServerIp { ip },
            Packet::ReqConn { node_id: NodeId(7), nonce: 42 },
            Packet::ConnAck { nonce: 42, session_id: 3 },
            Packet::SendData(SendDataPayload {
                session_id: 3,
                seq: 10,
                timestamp: 1_270_166_400,
                readings: vec![(SensorKind::Extensometer, i32::MIN)],
            }),
            Packet::DataAck { session_id: 3, seq: 10 },
            Packet::Heartbeat,
        ];
        for p in all {
            assert_eq!(Packet::decode(&p.encode().unwrap()).unwrap(), p);
        }
    }

    #[test]
    fn reader_resyncs_after_garbage() {
        let a = Packet::Heartbeat.encode().unwrap();
        let b = Packet::ReqIp { node_id: NodeId(1) }.encode().unwrap();
        let mut r = FrameReader::new();
        r.push(&[0xFF, 0x4C, 0x00]);
        r.push(&a[..3]);
        assert_eq!(r.next_frame(), None);
        r.push(&a[3..]);
        r.push(&b);
        assert_eq!(r.next_frame().unwrap().msg_type, MessageType::Heartbeat);
        assert_eq!(r.next_frame().unwrap().msg_type, MessageType::ReqIp);
        assert_eq!(r.next_frame(), None);
        assert_eq!(r.skipped(), 3);
    }
}
