//! Channel monitoring: after attaching, a source re-checks its link and
//! path delay against the baselines captured at selection time on every
//! frame it overhears from its relay.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{classify_link, path_delay_aggregate, DelayEwma, LinkClass, LqiAggregate, PathDelayEstimate};
use crate::seeking::Selection;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonitorError {
    #[error("tau_d must lie in (0, 1], got {0}")]
    TauD(f64),
    #[error("tau_lqi must lie in (0, 1], got {0}")]
    TauLqi(f64),
    #[error("delay requirement must be positive, got {0} ms")]
    DelayRequirement(f64),
    #[error("monitoring LQI window must hold at least one sample")]
    Window,
}

/// How the relative delay guard is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// Stay while `current >= baseline * tau_d`: a large *drop* in delay
    /// triggers a new seek.
    #[default]
    Literal,
    /// Stay while `current <= baseline / tau_d`: a large *rise* in delay
    /// triggers a new seek.
    Degradation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorParams {
    pub tau_d: f64,
    pub tau_lqi: f64,
    pub delay_requirement_ms: f64,
    pub n_monitor: usize,
    pub drift_mode: DriftMode,
}

impl Default for MonitorParams {
    fn default() -> Self {
        Self {
            tau_d: 0.9,
            tau_lqi: 0.9,
            delay_requirement_ms: 500.0,
            n_monitor: 10,
            drift_mode: DriftMode::Literal,
        }
    }
}

impl MonitorParams {
    pub fn validate(&self) -> Result<(), MonitorError> {
        if !(self.tau_d > 0.0 && self.tau_d <= 1.0) {
            return Err(MonitorError::TauD(self.tau_d));
        }
        if !(self.tau_lqi > 0.0 && self.tau_lqi <= 1.0) {
            return Err(MonitorError::TauLqi(self.tau_lqi));
        }
        if !(self.delay_requirement_ms > 0.0) {
            return Err(MonitorError::DelayRequirement(self.delay_requirement_ms));
        }
        if self.n_monitor == 0 {
            return Err(MonitorError::Window);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReseekReason {
    LqiDegraded,
    ClassDegraded,
    DelayRequirementExceeded,
    DelayDrift,
}

impl ReseekReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ReseekReason::LqiDegraded => "lqi_degraded",
            ReseekReason::ClassDegraded => "class_degraded",
            ReseekReason::DelayRequirementExceeded => "delay_requirement_exceeded",
            ReseekReason::DelayDrift => "delay_drift",
        }
    }
}

impl fmt::Display for ReseekReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Stay,
    Reseek(ReseekReason),
}

/// Outcome of the four monitoring guards, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Guards {
    /// Windowed LQI has not fallen below `lqi_init * tau_lqi`.
    pub lqi_ratio: bool,
    /// Link class has not dropped below the class at selection.
    pub class_held: bool,
    /// Path delay is under the application requirement.
    pub under_requirement: bool,
    /// Path delay has not drifted past the baseline threshold.
    pub no_drift: bool,
}

impl Guards {
    /// Nested evaluation: the first failing guard names the reason.
    pub fn decide(self) -> Decision {
        if !self.lqi_ratio {
            Decision::Reseek(ReseekReason::LqiDegraded)
        } else if !self.class_held {
            Decision::Reseek(ReseekReason::ClassDegraded)
        } else if !self.under_requirement {
            Decision::Reseek(ReseekReason::DelayRequirementExceeded)
        } else if !self.no_drift {
            Decision::Reseek(ReseekReason::DelayDrift)
        } else {
            Decision::Stay
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorState {
    d_init: f64,
    lqi_init: f64,
    class_init: LinkClass,
    lqi_window: LqiAggregate,
    current_d: f64,
    params: MonitorParams,
}

impl MonitorState {
    /// Captures the selection baselines and seeds the LQI window with the
    /// seek-time sample.
    pub fn new(sel: &Selection, params: MonitorParams) -> Result<Self, MonitorError> {
        params.validate()?;
        let mut lqi_window = LqiAggregate::new(params.n_monitor).map_err(|_| MonitorError::Window)?;
        // seek samples come from the same clamped LQI model
        let _ = lqi_window.update(sel.baseline_lqi);
        Ok(Self {
            d_init: sel.baseline_delay.total,
            lqi_init: sel.baseline_lqi,
            class_init: sel.baseline_class,
            lqi_window,
            current_d: sel.baseline_delay.total,
            params,
        })
    }

    pub fn d_init(&self) -> f64 {
        self.d_init
    }

    pub fn lqi_init(&self) -> f64 {
        self.lqi_init
    }

    pub fn class_init(&self) -> LinkClass {
        self.class_init
    }

    pub fn current_d(&self) -> f64 {
        self.current_d
    }

    pub fn mean_lqi(&self) -> f64 {
        self.lqi_window.mean().unwrap_or(self.lqi_init)
    }

    pub fn params(&self) -> &MonitorParams {
        &self.params
    }

    /// Handles one overheard frame from the associated relay.
    ///
    /// The source's own path delay is the relay's advertised value plus
    /// the source's local queuing average. Out-of-range LQI samples are
    /// dropped without touching the window.
    pub fn on_overheard(&mut self, relay_advertised: PathDelayEstimate, own_local: &DelayEwma, lqi: f64) -> Decision {
        let _ = self.lqi_window.update(lqi);
        self.current_d = path_delay_aggregate(own_local, relay_advertised).total;
        self.guards().decide()
    }

    pub fn guards(&self) -> Guards {
        let p = &self.params;
        let mean = self.mean_lqi();
        let d = self.current_d;
        Guards {
            lqi_ratio: mean >= self.lqi_init * p.tau_lqi,
            class_held: classify_link(mean) >= self.class_init,
            under_requirement: d < p.delay_requirement_ms,
            no_drift: match p.drift_mode {
                DriftMode::Literal => d >= self.d_init * p.tau_d,
                DriftMode::Degradation => d <= self.d_init / p.tau_d,
            },
        }
    }
}
