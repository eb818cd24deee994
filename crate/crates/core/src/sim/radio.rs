//! Link loss, airtime and retune timing.

use std::collections::BTreeMap;

use rand::Rng;

use crate::protocol::LqiModel;
use crate::scenario::RadioConfig;
use crate::types::{ms_to_us, Channel, SimTime};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TxOutcome {
    /// Data frame and its acknowledgement both got through.
    Delivered { lqi: f64 },
    AckFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadioModel {
    pub bitrate_bps: u64,
    pub packet_bytes: u32,
    pub control_bytes: u32,
    /// Mean stack overhead per attempt.
    pub service_overhead_us: SimTime,
    pub backoff_max_us: SimTime,
    pub switch_min_us: SimTime,
    pub switch_max_us: SimTime,
    pub ack_timeout_us: SimTime,
    pub ack_success: f64,
    pub max_retries: u32,
    pub lqi: LqiModel,
    d50_m: f64,
    width_m: f64,
    per_channel: BTreeMap<Channel, (f64, f64)>,
}

impl RadioModel {
    pub fn from_config(radio: &RadioConfig, ack_timeout_us: SimTime) -> Self {
        Self {
            bitrate_bps: radio.bitrate_bps,
            packet_bytes: radio.packet_bytes,
            control_bytes: radio.control_bytes,
            service_overhead_us: ms_to_us(radio.service_overhead_ms),
            backoff_max_us: ms_to_us(radio.backoff_max_ms),
            switch_min_us: ms_to_us(radio.switch_delay_min_ms),
            switch_max_us: ms_to_us(radio.switch_delay_max_ms),
            ack_timeout_us,
            ack_success: radio.ack_success,
            max_retries: radio.max_retries,
            lqi: radio.lqi_model(),
            d50_m: radio.d50_m,
            width_m: radio.width_m,
            per_channel: radio
                .channel_links
                .iter()
                .filter_map(|(&c, s)| Channel::new(c).ok().map(|c| (c, (s.d50_m, s.width_m))))
                .collect(),
        }
    }

    /// Time on air for `bytes`, rounded up to whole microseconds.
    pub fn airtime_us(&self, bytes: u32) -> SimTime {
        (bytes as u64 * 8 * 1_000_000).div_ceil(self.bitrate_bps)
    }

    /// Mean duration of one data transmission attempt.
    pub fn service_time_us(&self) -> SimTime {
        self.airtime_us(self.packet_bytes) + self.service_overhead_us
    }

    /// One attempt's duration: airtime plus the overhead, part of which is a
    /// uniform backoff centred on the mean.
    pub fn sample_service_time<R: Rng + ?Sized>(&self, rng: &mut R) -> SimTime {
        let fixed = self.service_time_us() - self.backoff_max_us / 2;
        if self.backoff_max_us == 0 {
            return fixed;
        }
        fixed + rng.random_range(0..=self.backoff_max_us)
    }

    pub fn prr_of_distance(&self, d: f64, channel: Channel) -> f64 {
        let (d50, w) = self.per_channel.get(&channel).copied().unwrap_or((self.d50_m, self.width_m));
        logistic_prr(d, d50, w)
    }

    pub fn sample_switch_delay<R: Rng + ?Sized>(&self, rng: &mut R) -> SimTime {
        rng.random_range(self.switch_min_us..=self.switch_max_us)
    }

    pub fn attempt_transmission<R: Rng + ?Sized>(&self, prr: f64, rng: &mut R) -> TxOutcome {
        if rng.random::<f64>() < prr && rng.random::<f64>() < self.ack_success {
            TxOutcome::Delivered {
                lqi: self.lqi.sample(prr, rng),
            }
        } else {
            TxOutcome::AckFailed
        }
    }
}

pub fn logistic_prr(d: f64, d50: f64, width: f64) -> f64 {
    1.0 / (1.0 + ((d - d50) / width).exp())
}
