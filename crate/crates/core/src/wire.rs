//! Byte layouts of the simulated control frames. Multi-byte fields are
//! big-endian; delays travel as unsigned 16.16 fixed-point milliseconds.

use thiserror::Error;

pub const PROBE_TYPE: u8 = 1;
pub const REPLY_TYPE: u8 = 2;

pub const PROBE_LEN: usize = 3;
pub const REPLY_LEN: usize = 7;

/// Largest delay representable in 16.16 fixed point.
pub const MAX_DELAY_MS: f64 = (u32::MAX as f64) / 65536.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("frame too short: need {need} bytes, got {got}")]
    Truncated { need: usize, got: usize },
    #[error("unexpected frame type {0}")]
    BadType(u8),
    #[error("delay {0} ms not representable as 16.16 fixed point")]
    DelayOutOfRange(f64),
}

/// Encodes milliseconds as 16.16 fixed point, rounding to the nearest step.
pub fn delay_to_q16(ms: f64) -> Result<u32, WireError> {
    if !(0.0..=MAX_DELAY_MS).contains(&ms) {
        return Err(WireError::DelayOutOfRange(ms));
    }
    Ok((ms * 65536.0).round() as u32)
}

pub fn q16_to_delay(raw: u32) -> f64 {
    raw as f64 / 65536.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub src: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reply {
    pub relay: u16,
    pub delay_q16: u32,
}

impl Probe {
    pub fn encode(&self) -> [u8; PROBE_LEN] {
        let src = self.src.to_be_bytes();
        [PROBE_TYPE, src[0], src[1]]
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < PROBE_LEN {
            return Err(WireError::Truncated {
                need: PROBE_LEN,
                got: buf.len(),
            });
        }
        if buf[0] != PROBE_TYPE {
            return Err(WireError::BadType(buf[0]));
        }
        Ok(Self {
            src: u16::from_be_bytes([buf[1], buf[2]]),
        })
    }
}

impl Reply {
    pub fn new(relay: u16, delay_ms: f64) -> Result<Self, WireError> {
        Ok(Self {
            relay,
            delay_q16: delay_to_q16(delay_ms)?,
        })
    }

    pub fn delay_ms(&self) -> f64 {
        q16_to_delay(self.delay_q16)
    }

    pub fn encode(&self) -> [u8; REPLY_LEN] {
        let mut out = [0u8; REPLY_LEN];
        out[0] = REPLY_TYPE;
        out[1..3].copy_from_slice(&self.relay.to_be_bytes());
        out[3..7].copy_from_slice(&self.delay_q16.to_be_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < REPLY_LEN {
            return Err(WireError::Truncated {
                need: REPLY_LEN,
                got: buf.len(),
            });
        }
        if buf[0] != REPLY_TYPE {
            return Err(WireError::BadType(buf[0]));
        }
        Ok(Self {
            relay: u16::from_be_bytes([buf[1], buf[2]]),
            delay_q16: u32::from_be_bytes([buf[3], buf[4], buf[5], buf[6]]),
        })
    }
}

/// Path delay field appended to every forwarded data frame.
pub fn encode_piggyback(delay_ms: f64) -> Result<[u8; 4], WireError> {
    Ok(delay_to_q16(delay_ms)?.to_be_bytes())
}

pub fn decode_piggyback(buf: &[u8]) -> Result<f64, WireError> {
    let bytes: [u8; 4] = buf
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or(WireError::Truncated { need: 4, got: buf.len() })?;
    Ok(q16_to_delay(u32::from_be_bytes(bytes)))
}

/// Lowercase hex rendering used in trace lines.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
