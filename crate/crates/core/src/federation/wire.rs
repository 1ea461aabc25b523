//! Binary frames shared by every transport.
//!
//! ```text
//! magic "FLTM" | version u8 = 1 | msg_type u8 | round u16 | dtype u8 | reserved u8
//! payload_len u64 | payload
//! ```
//! ClientUpdate payloads start with `client_id u32 | num_samples u64`; tensor
//! blobs are `element_count u64` followed by the raw values. Little-endian.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::fp16::{decode_fp16, encode_fp16};
use super::{FederationError, Result};

pub const MAGIC: &[u8; 4] = b"FLTM";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
/// Refuse to allocate for absurd declared payloads.
pub const MAX_PAYLOAD: u64 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WirePrecision {
    #[default]
    Fp32,
    Fp16,
}

impl WirePrecision {
    fn code(self) -> u8 {
        match self {
            Self::Fp32 => 0,
            Self::Fp16 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Self::Fp32 => 4,
            Self::Fp16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundMessage {
    GlobalParams { round: u16, dtype: WirePrecision, values: Vec<f32> },
    ClientUpdate { round: u16, dtype: WirePrecision, client_id: u32, num_samples: u64, values: Vec<f32> },
    Done { round: u16 },
    /// First frame on a socket connection; carries the client id.
    Hello { client_id: u32 },
}

const GLOBAL_PARAMS: u8 = 1;
const CLIENT_UPDATE: u8 = 2;
const DONE: u8 = 3;
const HELLO: u8 = 4;

fn protocol(field: &'static str, detail: impl Into<String>) -> FederationError {
    FederationError::Protocol { field, detail: detail.into() }
}

fn tensor_blob(values: &[f32], dtype: WirePrecision, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    match dtype {
        WirePrecision::Fp32 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        WirePrecision::Fp16 => out.extend_from_slice(&encode_fp16(values)?),
    }
    Ok(())
}

fn read_blob(bytes: &[u8], dtype: WirePrecision) -> Result<Vec<f32>> {
    if bytes.len() < 8 {
        return Err(protocol("element_count", format!("blob of {} bytes has no element count", bytes.len())));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let raw = &bytes[8..];
    if count.checked_mul(dtype.width() as u64) != Some(raw.len() as u64) {
        return Err(protocol(
            "element_count",
            format!("declares {count} elements but {} bytes follow at width {}", raw.len(), dtype.width()),
        ));
    }
    match dtype {
        WirePrecision::Fp32 => Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        WirePrecision::Fp16 => decode_fp16(raw),
    }
}

impl RoundMessage {
    pub fn round(&self) -> u16 {
        match self {
            Self::GlobalParams { round, .. } | Self::ClientUpdate { round, .. } | Self::Done { round } => *round,
            Self::Hello { .. } => 0,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let (kind, round, dtype) = match self {
            Self::GlobalParams { round, dtype, values } => {
                tensor_blob(values, *dtype, &mut payload)?;
                (GLOBAL_PARAMS, *round, *dtype)
            }
            Self::ClientUpdate { round, dtype, client_id, num_samples, values } => {
                payload.extend_from_slice(&client_id.to_le_bytes());
                payload.extend_from_slice(&num_samples.to_le_bytes());
                tensor_blob(values, *dtype, &mut payload)?;
                (CLIENT_UPDATE, *round, *dtype)
            }
            Self::Done { round } => (DONE, *round, WirePrecision::Fp32),
            Self::Hello { client_id } => {
                payload.extend_from_slice(&client_id.to_le_bytes());
                (HELLO, 0, WirePrecision::Fp32)
            }
        };
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(kind);
        out.extend_from_slice(&round.to_le_bytes());
        out.push(dtype.code());
        out.push(0);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn decode(frame: &[u8]) -> Result<Self> {
        let payload_len = check_header(frame)?;
        let payload = &frame[HEADER_LEN..];
        if payload.len() as u64 != payload_len {
            return Err(protocol("payload_len", format!("declares {payload_len} bytes, frame carries {}", payload.len())));
        }
        let round = u16::from_le_bytes([frame[6], frame[7]]);
        let dtype = match frame[8] {
            0 => WirePrecision::Fp32,
            1 => WirePrecision::Fp16,
            d => return Err(protocol("dtype", format!("unknown dtype {d}"))),
        };
        match frame[5] {
            GLOBAL_PARAMS => Ok(Self::GlobalParams { round, dtype, values: read_blob(payload, dtype)? }),
            CLIENT_UPDATE => {
                if payload.len() < 12 {
                    return Err(protocol("num_samples", "client update payload shorter than its prefix"));
                }
                let client_id = u32::from_le_bytes(payload[..4].try_into().unwrap());
                let num_samples = u64::from_le_bytes(payload[4..12].try_into().unwrap());
                let values = read_blob(&payload[12..], dtype)?;
                Ok(Self::ClientUpdate { round, dtype, client_id, num_samples, values })
            }
            DONE if payload.is_empty() => Ok(Self::Done { round }),
            DONE => Err(protocol("payload_len", "done frame must be empty")),
            HELLO if payload.len() == 4 => Ok(Self::Hello { client_id: u32::from_le_bytes(payload.try_into().unwrap()) }),
            HELLO => Err(protocol("payload_len", "hello frame carries exactly a client id")),
            t => Err(protocol("msg_type", format!("unknown message type {t}"))),
        }
    }
}

/// Validate the fixed header and return the declared payload length.
fn check_header(frame: &[u8]) -> Result<u64> {
    if frame.len() < HEADER_LEN {
        return Err(protocol("header", format!("{} bytes, need {HEADER_LEN}", frame.len())));
    }
    if &frame[..4] != MAGIC {
        return Err(protocol("magic", format!("{:02x?}", &frame[..4])));
    }
    if frame[4] != VERSION {
        return Err(protocol("version", format!("unsupported version {}", frame[4])));
    }
    let len = u64::from_le_bytes(frame[10..18].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(protocol("payload_len", format!("{len} exceeds limit")));
    }
    Ok(len)
}

/// Read one complete frame. `Ok(None)` on a clean end of stream before the
/// first header byte.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match reader.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(protocol("header", "stream ended inside a frame header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(FederationError::Transport(e.to_string())),
        }
    }
    let len = check_header(&header)? as usize;
    let mut frame = Vec::with_capacity(HEADER_LEN + len);
    frame.extend_from_slice(&header);
    frame.resize(HEADER_LEN + len, 0);
    reader
        .read_exact(&mut frame[HEADER_LEN..])
        .map_err(|e| protocol("payload", format!("stream ended inside a payload: {e}")))?;
    Ok(Some(frame))
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &[u8]) -> Result<()> {
    writer.write_all(frame).and_then(|_| writer.flush()).map_err(|e| FederationError::Transport(e.to_string()))
}
