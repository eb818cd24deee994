//! Experiment descriptions: the JSON schema, validation, the built-in
//! catalog and proportional duration scaling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::monitoring::{DriftMode, MonitorParams};
use crate::protocol::LqiModel;
use crate::seeking::SeekTiming;
use crate::types::{ms_to_us, Channel};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario is not valid JSON for the schema: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown builtin scenario `{0}`")]
    UnknownBuiltin(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub duration_s: f64,
    /// Channels that carry a backbone tree.
    pub channels: Vec<u8>,
    #[serde(default)]
    pub layout: LayoutConfig,
    pub sources: SourcesConfig,
    #[serde(default)]
    pub toggles: Vec<ToggleConfig>,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub radio: RadioConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub relays_per_channel: usize,
    pub hallway_m: f64,
    pub gateway_m: f64,
    /// Relay positions shared by every channel; evenly spaced when absent.
    pub relay_positions_m: Option<Vec<f64>>,
    /// Minimum link PRR for a backbone tree edge.
    pub backbone_min_prr: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            relays_per_channel: 4,
            hallway_m: 40.0,
            gateway_m: 0.0,
            relay_positions_m: None,
            backbone_min_prr: 0.8,
        }
    }
}

impl LayoutConfig {
    pub fn relay_positions(&self) -> Vec<f64> {
        match &self.relay_positions_m {
            Some(p) => p.clone(),
            None => {
                let n = self.relays_per_channel;
                let spacing = self.hallway_m / n as f64;
                (0..n).map(|k| (k as f64 + 0.5) * spacing).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Traffic {
    Periodic { interval_ms: f64 },
    /// A new packet is queued whenever the previous one leaves the source.
    Saturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcesConfig {
    pub count: usize,
    #[serde(default)]
    pub positions_m: Option<Vec<f64>>,
    pub traffic: Traffic,
    #[serde(default)]
    pub walkers: Vec<WalkerConfig>,
    /// Sources join at a uniform random time in `[0, start_jitter_ms)`.
    #[serde(default = "default_start_jitter")]
    pub start_jitter_ms: f64,
}

fn default_start_jitter() -> f64 {
    1000.0
}

/// A person walking the hallway carrying one or more sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkerConfig {
    pub sources: Vec<u16>,
    #[serde(default = "default_walk_speed")]
    pub speed_mps: f64,
    pub start_m: f64,
    /// +1 walks away from the gateway end, -1 towards it.
    #[serde(default = "default_heading")]
    pub heading: i8,
}

fn default_walk_speed() -> f64 {
    1.2
}

fn default_heading() -> i8 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToggleConfig {
    pub sources: Vec<u16>,
    pub off_s: f64,
    #[serde(default)]
    pub on_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub tau_d: f64,
    pub tau_lqi: f64,
    pub delay_requirement_ms: f64,
    pub n_monitor: usize,
    pub delay_drift_mode: DriftMode,
    pub ack_timeout_ms: f64,
    pub periodic_seek_s: f64,
    /// Channels probed while seeking; the backbone channels when absent.
    pub seek_channels: Option<Vec<u8>>,
    pub seek_early_advance: bool,
    /// Fixed cost of one seek on top of the per-channel waits: initial
    /// retune, probe preparation and attaching to the chosen relay.
    pub seek_overhead_ms: f64,
    pub seek_retry_ms: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let m = MonitorParams::default();
        Self {
            tau_d: m.tau_d,
            tau_lqi: m.tau_lqi,
            delay_requirement_ms: m.delay_requirement_ms,
            n_monitor: m.n_monitor,
            delay_drift_mode: m.drift_mode,
            ack_timeout_ms: 22.0,
            periodic_seek_s: 30.0,
            seek_channels: None,
            seek_early_advance: false,
            seek_overhead_ms: 18.7,
            seek_retry_ms: 1000.0,
        }
    }
}

impl ProtocolConfig {
    pub fn monitor_params(&self) -> MonitorParams {
        MonitorParams {
            tau_d: self.tau_d,
            tau_lqi: self.tau_lqi,
            delay_requirement_ms: self.delay_requirement_ms,
            n_monitor: self.n_monitor,
            drift_mode: self.delay_drift_mode,
        }
    }

    pub fn seek_timing(&self) -> SeekTiming {
        SeekTiming {
            ack_timeout_us: ms_to_us(self.ack_timeout_ms),
            early_advance: self.seek_early_advance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkShape {
    pub d50_m: f64,
    pub width_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub bitrate_bps: u64,
    pub packet_bytes: u32,
    pub control_bytes: u32,
    /// Mean per-attempt stack overhead, including the random backoff.
    pub service_overhead_ms: f64,
    /// Width of the uniform backoff drawn inside the overhead.
    pub backoff_max_ms: f64,
    pub d50_m: f64,
    pub width_m: f64,
    /// Per-channel replacement for `d50_m` / `width_m`.
    pub channel_links: BTreeMap<u8, LinkShape>,
    pub switch_delay_min_ms: f64,
    pub switch_delay_max_ms: f64,
    pub max_retries: u32,
    pub queue_bound: usize,
    pub ack_success: f64,
    pub reply_backoff_max_ms: f64,
    pub lqi_sigma: f64,
    pub lqi_min: f64,
    pub lqi_max: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            bitrate_bps: 250_000,
            packet_bytes: 114,
            control_bytes: 20,
            service_overhead_ms: 19.8,
            backoff_max_ms: 2.24,
            d50_m: 18.0,
            width_m: 2.5,
            channel_links: BTreeMap::new(),
            switch_delay_min_ms: 0.7,
            switch_delay_max_ms: 1.4,
            max_retries: 3,
            queue_bound: 4,
            ack_success: 0.98,
            reply_backoff_max_ms: 5.0,
            lqi_sigma: 3.0,
            lqi_min: 40.0,
            lqi_max: 110.0,
        }
    }
}

impl RadioConfig {
    pub fn lqi_model(&self) -> LqiModel {
        LqiModel {
            sigma: self.lqi_sigma,
            clamp_min: self.lqi_min,
            clamp_max: self.lqi_max,
        }
    }
}

impl ScenarioConfig {
    pub fn backbone_channels(&self) -> Vec<Channel> {
        self.channels.iter().filter_map(|&c| Channel::new(c).ok()).collect()
    }

    pub fn seek_channels(&self) -> Vec<Channel> {
        match &self.protocol.seek_channels {
            Some(list) => list.iter().filter_map(|&c| Channel::new(c).ok()).collect(),
            None => self.backbone_channels(),
        }
    }

    pub fn source_positions(&self) -> Vec<f64> {
        match &self.sources.positions_m {
            Some(p) => p.clone(),
            None => {
                let n = self.sources.count;
                let l = self.layout.hallway_m;
                (0..n).map(|i| (i as f64 + 0.5) * l / n as f64).collect()
            }
        }
    }

    /// Checks every invariant the simulator relies on. Errors name the
    /// offending field.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(invalid("duration_s", "must be a positive number of seconds"));
        }
        check_channels("channels", &self.channels)?;
        if let Some(list) = &self.protocol.seek_channels {
            check_channels("protocol.seek_channels", list)?;
        }

        let layout = &self.layout;
        if layout.relays_per_channel == 0 && !self.channels.is_empty() {
            return Err(invalid("layout.relays_per_channel", "must be at least 1"));
        }
        if !(layout.hallway_m > 0.0) {
            return Err(invalid("layout.hallway_m", "must be positive"));
        }
        if !(0.0..=1.0).contains(&layout.backbone_min_prr) {
            return Err(invalid("layout.backbone_min_prr", "must be a probability"));
        }
        if let Some(p) = &layout.relay_positions_m {
            if p.len() != layout.relays_per_channel {
                return Err(invalid(
                    "layout.relay_positions_m",
                    format!("has {} entries for {} relays per channel", p.len(), layout.relays_per_channel),
                ));
            }
            if p.iter().any(|x| !(0.0..=layout.hallway_m).contains(x)) {
                return Err(invalid("layout.relay_positions_m", "positions must lie inside the hallway"));
            }
        }
        let n_relays = self.channels.len() * layout.relays_per_channel;
        if n_relays > u16::MAX as usize {
            return Err(invalid("layout.relays_per_channel", "too many relays"));
        }

        let src = &self.sources;
        if src.count > u16::MAX as usize {
            return Err(invalid("sources.count", "too many sources"));
        }
        if let Some(p) = &src.positions_m {
            if p.len() != src.count {
                return Err(invalid(
                    "sources.positions_m",
                    format!("has {} entries for {} sources", p.len(), src.count),
                ));
            }
            if p.iter().any(|x| !(0.0..=layout.hallway_m).contains(x)) {
                return Err(invalid("sources.positions_m", "positions must lie inside the hallway"));
            }
        }
        if let Traffic::Periodic { interval_ms } = src.traffic {
            if !(interval_ms >= 1.0) {
                return Err(invalid("sources.traffic.periodic.interval_ms", "must be at least 1 ms"));
            }
        }
        if !(src.start_jitter_ms >= 0.0) {
            return Err(invalid("sources.start_jitter_ms", "must be non-negative"));
        }
        let mut walking = BTreeSet::new();
        for (i, w) in src.walkers.iter().enumerate() {
            let field = format!("sources.walkers[{i}]");
            for &s in &w.sources {
                if s as usize >= src.count {
                    return Err(invalid(format!("{field}.sources"), format!("unknown source id {s}")));
                }
                if !walking.insert(s) {
                    return Err(invalid(format!("{field}.sources"), format!("source {s} already walks")));
                }
            }
            if !(w.speed_mps >= 0.0) {
                return Err(invalid(format!("{field}.speed_mps"), "must be non-negative"));
            }
            if !(0.0..=layout.hallway_m).contains(&w.start_m) {
                return Err(invalid(format!("{field}.start_m"), "must lie inside the hallway"));
            }
            if w.heading != 1 && w.heading != -1 {
                return Err(invalid(format!("{field}.heading"), "must be 1 or -1"));
            }
        }

        for (i, t) in self.toggles.iter().enumerate() {
            let field = format!("toggles[{i}]");
            let mut seen = BTreeSet::new();
            for &s in &t.sources {
                if s as usize >= src.count {
                    return Err(invalid(format!("{field}.sources"), format!("unknown source id {s}")));
                }
                if !seen.insert(s) {
                    return Err(invalid(format!("{field}.sources"), format!("duplicate source id {s}")));
                }
            }
            if !(t.off_s >= 0.0 && t.off_s <= self.duration_s) {
                return Err(invalid(format!("{field}.off_s"), "must lie within the run duration"));
            }
            if let Some(on) = t.on_s {
                if !(on > t.off_s && on <= self.duration_s) {
                    return Err(invalid(format!("{field}.on_s"), "must follow off_s and lie within the run duration"));
                }
            }
        }

        let p = &self.protocol;
        self.protocol
            .monitor_params()
            .validate()
            .map_err(|e| invalid("protocol", e.to_string()))?;
        if !(p.ack_timeout_ms > 0.0) {
            return Err(invalid("protocol.ack_timeout_ms", "must be positive"));
        }
        if !(p.periodic_seek_s > 0.0) {
            return Err(invalid("protocol.periodic_seek_s", "must be positive"));
        }
        if !(p.seek_overhead_ms >= 0.0) {
            return Err(invalid("protocol.seek_overhead_ms", "must be non-negative"));
        }
        if !(p.seek_retry_ms > 0.0) {
            return Err(invalid("protocol.seek_retry_ms", "must be positive"));
        }
        if self.seek_channels().is_empty() && src.count > 0 {
            return Err(invalid("protocol.seek_channels", "sources need at least one channel to probe"));
        }

        let r = &self.radio;
        if r.bitrate_bps == 0 {
            return Err(invalid("radio.bitrate_bps", "must be positive"));
        }
        if r.packet_bytes == 0 {
            return Err(invalid("radio.packet_bytes", "must be positive"));
        }
        if !(r.service_overhead_ms >= 0.0) {
            return Err(invalid("radio.service_overhead_ms", "must be non-negative"));
        }
        if !(r.width_m > 0.0) {
            return Err(invalid("radio.width_m", "must be positive"));
        }
        for (ch, shape) in &r.channel_links {
            if Channel::new(*ch).is_err() {
                return Err(invalid("radio.channel_links", format!("channel {ch} outside 11-26")));
            }
            if !(shape.width_m > 0.0) {
                return Err(invalid("radio.channel_links", format!("channel {ch} width must be positive")));
            }
        }
        if !(r.switch_delay_min_ms >= 0.0 && r.switch_delay_min_ms <= r.switch_delay_max_ms) {
            return Err(invalid("radio.switch_delay_min_ms", "must be non-negative and not above the maximum"));
        }
        if r.queue_bound == 0 {
            return Err(invalid("radio.queue_bound", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&r.ack_success) {
            return Err(invalid("radio.ack_success", "must be a probability"));
        }
        if !(r.backoff_max_ms >= 0.0 && r.backoff_max_ms <= 2.0 * r.service_overhead_ms) {
            return Err(invalid(
                "radio.backoff_max_ms",
                "must lie in [0, 2 * service_overhead_ms]",
            ));
        }
        if !(r.reply_backoff_max_ms >= 0.0) {
            return Err(invalid("radio.reply_backoff_max_ms", "must be non-negative"));
        }
        if !(r.lqi_sigma >= 0.0) {
            return Err(invalid("radio.lqi_sigma", "must be non-negative"));
        }
        if !(0.0 <= r.lqi_min && r.lqi_min <= r.lqi_max && r.lqi_max <= 127.0) {
            return Err(invalid("radio.lqi_min", "clamp range must satisfy 0 <= min <= max <= 127"));
        }
        Ok(())
    }

    /// Rescales the run to `duration_s`, moving toggle times proportionally.
    pub fn scale_to_duration(&mut self, duration_s: f64) -> Result<(), ScenarioError> {
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(invalid("duration_s", "must be a positive number of seconds"));
        }
        let factor = duration_s / self.duration_s;
        for t in &mut self.toggles {
            t.off_s *= factor;
            t.on_s = t.on_s.map(|on| on * factor);
        }
        self.duration_s = duration_s;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

fn check_channels(field: &str, list: &[u8]) -> Result<(), ScenarioError> {
    let mut seen = BTreeSet::new();
    for &c in list {
        Channel::new(c).map_err(|e| invalid(field, e.to_string()))?;
        if !seen.insert(c) {
            return Err(invalid(field, format!("channel {c} listed twice")));
        }
    }
    Ok(())
}

pub const BUILTIN_NAMES: [&str; 8] = [
    "steady-low",
    "steady-high",
    "dynamic-low",
    "dynamic-high",
    "mobile-high",
    "mobile-low",
    "four-channel-dynamic",
    "throughput-cal",
];

const LOW_INTERVAL_MS: f64 = 1024.0;
const HIGH_INTERVAL_MS: f64 = 128.0;
const TESTBED_SOURCES: usize = 45;
const BLACKOUT_SOURCES: usize = 23;
/// Fixed so that the blacked-out subset is part of the scenario, not the run.
const BLACKOUT_PICK_SEED: u64 = 0x05EE_D0FF;

fn testbed(name: &str, interval_ms: f64, duration_s: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: name.to_string(),
        duration_s,
        channels: vec![25, 26],
        layout: LayoutConfig::default(),
        sources: SourcesConfig {
            count: TESTBED_SOURCES,
            positions_m: None,
            traffic: Traffic::Periodic { interval_ms },
            walkers: Vec::new(),
            start_jitter_ms: default_start_jitter(),
        },
        toggles: Vec::new(),
        protocol: ProtocolConfig::default(),
        radio: RadioConfig::default(),
        seed: default_seed(),
    }
}

/// The 23 sources switched off in the dynamic experiments.
pub fn blackout_set() -> Vec<u16> {
    let mut rng = ChaCha8Rng::seed_from_u64(BLACKOUT_PICK_SEED);
    let mut ids: Vec<u16> = sample(&mut rng, TESTBED_SOURCES, BLACKOUT_SOURCES)
        .into_iter()
        .map(|i| i as u16)
        .collect();
    ids.sort_unstable();
    ids
}

fn with_blackout(mut cfg: ScenarioConfig) -> ScenarioConfig {
    cfg.toggles = vec![ToggleConfig {
        sources: blackout_set(),
        off_s: 1800.0,
        on_s: Some(2700.0),
    }];
    cfg
}

fn with_walkers(mut cfg: ScenarioConfig) -> ScenarioConfig {
    let l = cfg.layout.hallway_m;
    // the five mobile sources are the last five ids
    cfg.sources.walkers = vec![
        WalkerConfig {
            sources: vec![40, 41],
            speed_mps: default_walk_speed(),
            start_m: 0.0,
            heading: 1,
        },
        WalkerConfig {
            sources: vec![42, 43, 44],
            speed_mps: default_walk_speed(),
            start_m: l,
            heading: -1,
        },
    ];
    cfg
}

pub fn builtin(name: &str) -> Result<ScenarioConfig, ScenarioError> {
    let cfg = match name {
        "steady-low" => testbed(name, LOW_INTERVAL_MS, 3600.0),
        "steady-high" => testbed(name, HIGH_INTERVAL_MS, 3600.0),
        "dynamic-low" => with_blackout(testbed(name, LOW_INTERVAL_MS, 3600.0)),
        "dynamic-high" => with_blackout(testbed(name, HIGH_INTERVAL_MS, 3600.0)),
        "mobile-high" => with_walkers(testbed(name, HIGH_INTERVAL_MS, 1200.0)),
        "mobile-low" => with_walkers(testbed(name, LOW_INTERVAL_MS, 1200.0)),
        "four-channel-dynamic" => {
            let mut cfg = with_blackout(testbed(name, HIGH_INTERVAL_MS, 3600.0));
            cfg.channels = vec![23, 24, 25, 26];
            cfg
        }
        "throughput-cal" => {
            let mut cfg = testbed(name, HIGH_INTERVAL_MS, 300.0);
            cfg.channels = vec![26];
            cfg.layout = LayoutConfig {
                relays_per_channel: 1,
                hallway_m: 10.0,
                ..LayoutConfig::default()
            };
            cfg.sources.count = 5;
            cfg.sources.traffic = Traffic::Saturating;
            cfg
        }
        other => return Err(ScenarioError::UnknownBuiltin(other.to_string())),
    };
    debug_assert!(cfg.validate().is_ok());
    Ok(cfg)
}

/// Resolves a builtin name or a JSON file. A run manifest is accepted too;
/// its embedded scenario (which carries the run seed) is returned.
pub fn load_scenario(spec: &str) -> Result<ScenarioConfig, ScenarioError> {
    if BUILTIN_NAMES.contains(&spec) {
        return builtin(spec);
    }
    let path = Path::new(spec);
    if !path.exists() && !spec.ends_with(".json") {
        return Err(ScenarioError::UnknownBuiltin(spec.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: spec.to_string(),
        source,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let scenario = match value.get("scenario") {
        Some(inner) if value.get("tool_version").is_some() => inner.clone(),
        _ => value,
    };
    let cfg: ScenarioConfig = serde_json::from_value(scenario)?;
    cfg.validate()?;
    Ok(cfg)
}
