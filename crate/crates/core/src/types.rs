use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation timestamps and durations, in integer microseconds.
pub type SimTime = u64;

/// Converts fractional milliseconds to the nearest whole microsecond.
pub fn ms_to_us(ms: f64) -> SimTime {
    (ms * 1000.0).round().max(0.0) as SimTime
}

pub fn us_to_ms(us: SimTime) -> f64 {
    us as f64 / 1000.0
}

/// Lowest and highest 2.4 GHz 802.15.4 channel numbers.
pub const MIN_CHANNEL: u8 = 11;
pub const MAX_CHANNEL: u8 = 26;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("channel {0} is not a 2.4 GHz 802.15.4 channel (11-26)")]
pub struct InvalidChannel(pub u8);

/// A 2.4 GHz 802.15.4 channel number in 11..=26.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Channel(u8);

impl Channel {
    pub fn new(number: u8) -> Result<Self, InvalidChannel> {
        if (MIN_CHANNEL..=MAX_CHANNEL).contains(&number) {
            Ok(Self(number))
        } else {
            Err(InvalidChannel(number))
        }
    }

    pub fn number(self) -> u8 {
        self.0
    }

    /// All sixteen channels in ascending order.
    pub fn all() -> Vec<Channel> {
        (MIN_CHANNEL..=MAX_CHANNEL).map(Channel).collect()
    }
}

impl TryFrom<u8> for Channel {
    type Error = InvalidChannel;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Channel::new(value)
    }
}

impl From<Channel> for u8 {
    fn from(c: Channel) -> u8 {
        c.0
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelayId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SourceId(pub u16);

impl fmt::Display for RelayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}
