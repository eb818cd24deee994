//! Delay- and link-aware channel allocation for multi-channel sensor
//! backbones, with a discrete-event simulator to exercise it.

// NaN must fail range checks, so `!(x >= lo)` style guards are intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod metrics;
pub mod monitoring;
pub mod protocol;
pub mod scenario;
pub mod seeking;
pub mod sim;
pub mod types;
pub mod wire;

pub use metrics::{DeliveryRecord, DropCause, MetricsStore, SeekRecord, SeekResult, SummaryTables};
pub use monitoring::{Decision, DriftMode, Guards, MonitorParams, MonitorState, ReseekReason};
pub use protocol::{classify_link, path_delay_aggregate, DelayEwma, LinkClass, LqiAggregate, LqiModel, PathDelayEstimate};
pub use scenario::{builtin, load_scenario, ScenarioConfig, ScenarioError, BUILTIN_NAMES};
pub use seeking::{select_candidate, CandidateEntry, CandidateTable, SeekState, Selection};
pub use sim::{run, run_with, Engine, RunOptions, RunResult, SimError};
pub use types::{Channel, RelayId, SimTime, SourceId};
