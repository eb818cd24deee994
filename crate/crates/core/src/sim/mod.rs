//! Discrete-event simulation of sources, relays and the gateway.

pub mod event;
pub mod mobility;
pub mod radio;
pub mod topology;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metrics::{DeliveryRecord, DropCause, MetricsStore, SeekRecord, SeekResult, SummaryTables};
use crate::monitoring::{Decision, MonitorError, MonitorParams, MonitorState};
use crate::protocol::{DelayEwma, PathDelayEstimate};
use crate::scenario::{ScenarioConfig, ScenarioError, ToggleConfig, Traffic};
use crate::seeking::{ProbeReply, ReplyOutcome, SeekState, SeekStep, SeekTiming};
use crate::types::{ms_to_us, us_to_ms, Channel, RelayId, SimTime, SourceId};
use crate::wire;

pub use event::{EventKind, EventQueue, Node, SimEvent};
pub use mobility::{mobility_step, Mobility};
pub use radio::{logistic_prr, RadioModel, TxOutcome};
pub use topology::{RelaySite, Topology, TopologyError};

const SECOND_US: SimTime = 1_000_000;
const MINUTE_US: SimTime = 60 * SECOND_US;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep a text line per dispatched event.
    pub trace: bool,
    /// Collect [`CheckRecord`]s for external oracles.
    pub record_checks: bool,
}

/// Values published by the kernel, recorded for checking against an
/// independent recomputation of the path delays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckRecord {
    /// A relay put `value` on air, piggybacked or in a probe reply.
    Advertisement { relay: RelayId, value: f64 },
    /// A source evaluated its attachment with path delay `current_d`.
    Decision { source: SourceId, relay: RelayId, current_d: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Packet {
    id: u64,
    source: SourceId,
    generated_at: SimTime,
    /// Arrival at the node currently holding the packet.
    enqueued_at: SimTime,
    /// Failed attempts at the current hop.
    failures: u32,
    source_hop: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct InFlight {
    packet: Packet,
    /// Receiving relay, `None` for the gateway.
    target: Option<RelayId>,
}

#[derive(Debug, Clone)]
struct RelayState {
    queue: VecDeque<Packet>,
    in_flight: Option<InFlight>,
    ewma: DelayEwma,
    advertised: f64,
    associated: BTreeSet<SourceId>,
}

#[derive(Debug, Clone)]
enum Phase {
    Idle,
    Seeking(SeekState),
    Associated {
        relay: RelayId,
        channel: Channel,
        monitor: MonitorState,
    },
}

#[derive(Debug, Clone)]
struct SourceState {
    position: f64,
    mobility: Mobility,
    active: bool,
    /// Bumped on every activation change; stale timers compare against it.
    epoch: u32,
    /// Bumped on every seek start and abort.
    seek_gen: u32,
    phase: Phase,
    queue: VecDeque<Packet>,
    in_flight: Option<InFlight>,
    ewma: DelayEwma,
    pending_seek: bool,
    last_channel: Option<Channel>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SourceSnapshot {
    pub id: SourceId,
    pub position_m: f64,
    pub active: bool,
    pub channel: Option<Channel>,
    pub relay: Option<RelayId>,
    pub local_delay_ms: f64,
    pub queued: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RelaySnapshot {
    pub id: RelayId,
    pub channel: Channel,
    pub parent: Option<RelayId>,
    pub hops: u32,
    pub queued: usize,
    pub local_delay_ms: f64,
    pub advertised_ms: f64,
    pub associated: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario: String,
    pub seed: u64,
    pub metrics: MetricsStore,
    pub generated: u64,
    pub delivered: u64,
    /// Packets still queued or on air when the run ended.
    pub residual: u64,
    pub events_dispatched: u64,
    pub out_of_order: u64,
    /// FNV-1a over every dispatched event's time, sequence, kind and node.
    pub trace_digest: u64,
    pub trace: Option<String>,
    pub reseeks: BTreeMap<&'static str, u64>,
    pub sources: Vec<SourceSnapshot>,
    pub relays: Vec<RelaySnapshot>,
}

impl RunResult {
    pub fn dropped(&self) -> u64 {
        self.metrics.total_drops()
    }

    /// generated = delivered + dropped + residual
    pub fn conserved(&self) -> bool {
        self.generated == self.delivered + self.dropped() + self.residual
    }

    pub fn summary(&self) -> SummaryTables {
        self.metrics.summarize()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_mix(mut h: u64, words: &[u64]) -> u64 {
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

pub struct Engine {
    name: String,
    seed: u64,
    rng: ChaCha8Rng,
    radio: RadioModel,
    topo: Topology,
    subtrees: Vec<Vec<RelayId>>,
    relays: Vec<RelayState>,
    sources: Vec<SourceState>,
    queue: EventQueue,
    now: SimTime,
    end: SimTime,
    metrics: MetricsStore,
    generated: u64,
    delivered: u64,
    next_packet: u64,
    dispatched: u64,
    digest: u64,
    trace: Option<String>,
    checks: Option<Vec<CheckRecord>>,
    reseeks: BTreeMap<&'static str, u64>,
    traffic: Traffic,
    queue_bound: usize,
    toggles: Vec<ToggleConfig>,
    seek_channels: Vec<Channel>,
    timing: SeekTiming,
    params: MonitorParams,
    periodic_seek_us: SimTime,
    seek_overhead_us: SimTime,
    seek_retry_us: SimTime,
    reply_backoff_us: SimTime,
    has_walkers: bool,
}

impl Engine {
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> Result<Self, SimError> {
        Self::with_options(cfg, seed, RunOptions::default())
    }

    pub fn with_options(cfg: &ScenarioConfig, seed: u64, opts: RunOptions) -> Result<Self, SimError> {
        cfg.validate()?;
        let params = cfg.protocol.monitor_params();
        params.validate()?;
        let timing = cfg.protocol.seek_timing();
        let radio = RadioModel::from_config(&cfg.radio, timing.ack_timeout_us);
        let channels = cfg.backbone_channels();
        let topo = Topology::build(
            &channels,
            &cfg.layout.relay_positions(),
            cfg.layout.gateway_m,
            cfg.layout.hallway_m,
            cfg.layout.backbone_min_prr,
            |d, c| radio.prr_of_distance(d, c),
        )?;
        let subtrees = topo.relays.iter().map(|r| topo.subtree(r.id)).collect();
        let relays = topo
            .relays
            .iter()
            .map(|_| RelayState {
                queue: VecDeque::new(),
                in_flight: None,
                ewma: DelayEwma::new(),
                advertised: 0.0,
                associated: BTreeSet::new(),
            })
            .collect();

        let mut sources: Vec<SourceState> = cfg
            .source_positions()
            .into_iter()
            .map(|position| SourceState {
                position,
                mobility: Mobility::Stationary,
                active: false,
                epoch: 0,
                seek_gen: 0,
                phase: Phase::Idle,
                queue: VecDeque::new(),
                in_flight: None,
                ewma: DelayEwma::new(),
                pending_seek: false,
                last_channel: None,
            })
            .collect();
        for w in &cfg.sources.walkers {
            for &s in &w.sources {
                let src = &mut sources[s as usize];
                src.position = w.start_m;
                src.mobility = Mobility::Walker {
                    speed_mps: w.speed_mps,
                    heading: w.heading,
                };
            }
        }

        let end = ms_to_us(cfg.duration_s * 1000.0);
        let mut engine = Self {
            name: cfg.name.clone(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            radio,
            topo,
            subtrees,
            relays,
            has_walkers: !cfg.sources.walkers.is_empty(),
            sources,
            queue: EventQueue::new(),
            now: 0,
            end,
            metrics: MetricsStore::new(channels, cfg.radio.packet_bytes, end),
            generated: 0,
            delivered: 0,
            next_packet: 0,
            dispatched: 0,
            digest: FNV_OFFSET,
            trace: opts.trace.then(String::new),
            checks: opts.record_checks.then(Vec::new),
            reseeks: BTreeMap::new(),
            traffic: cfg.sources.traffic,
            queue_bound: cfg.radio.queue_bound,
            toggles: cfg.toggles.clone(),
            seek_channels: cfg.seek_channels(),
            timing,
            params,
            periodic_seek_us: ms_to_us(cfg.protocol.periodic_seek_s * 1000.0),
            seek_overhead_us: ms_to_us(cfg.protocol.seek_overhead_ms),
            seek_retry_us: ms_to_us(cfg.protocol.seek_retry_ms),
            reply_backoff_us: ms_to_us(cfg.radio.reply_backoff_max_ms),
        };

        let jitter_us = ms_to_us(cfg.sources.start_jitter_ms);
        for i in 0..engine.sources.len() {
            let t = if jitter_us > 0 {
                engine.rng.random_range(0..jitter_us)
            } else {
                0
            };
            let source = SourceId(i as u16);
            engine.metrics.ensure_switch_entry(source);
            engine.queue.push(t, EventKind::SourceJoin { source });
        }
        for (i, t) in cfg.toggles.iter().enumerate() {
            engine.queue.push(ms_to_us(t.off_s * 1000.0), EventKind::NodeToggle { toggle: i, on: false });
            if let Some(on) = t.on_s {
                engine.queue.push(ms_to_us(on * 1000.0), EventKind::NodeToggle { toggle: i, on: true });
            }
        }
        engine.queue.push(0, EventKind::MetricsTick);
        if engine.has_walkers {
            engine.queue.push(SECOND_US, EventKind::MobilityStep);
        }
        Ok(engine)
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn end(&self) -> SimTime {
        self.end
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn radio(&self) -> &RadioModel {
        &self.radio
    }

    pub fn relay_parent(&self, relay: RelayId) -> Option<RelayId> {
        self.topo.relay(relay).parent
    }

    pub fn relay_local_delay(&self, relay: RelayId) -> f64 {
        self.relays[relay.0 as usize].ewma.value()
    }

    pub fn relay_advertised(&self, relay: RelayId) -> f64 {
        self.relays[relay.0 as usize].advertised
    }

    pub fn source_local_delay(&self, source: SourceId) -> f64 {
        self.sources[source.0 as usize].ewma.value()
    }

    pub fn source_relay(&self, source: SourceId) -> Option<RelayId> {
        match self.sources[source.0 as usize].phase {
            Phase::Associated { relay, .. } => Some(relay),
            _ => None,
        }
    }

    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    /// Drains the check records gathered since the last call.
    pub fn take_checks(&mut self) -> Vec<CheckRecord> {
        self.checks.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Dispatches the next event. Returns `false` once no event remains
    /// before the end of the run.
    pub fn step(&mut self) -> bool {
        match self.queue.peek_time() {
            Some(t) if t < self.end => {}
            _ => return false,
        }
        let Some(ev) = self.queue.pop() else {
            return false;
        };
        self.now = ev.time;
        self.dispatched += 1;
        self.digest = fnv_mix(self.digest, &ev.digest_words());
        if self.trace.is_some() {
            let line = trace_line(&ev);
            if let Some(t) = self.trace.as_mut() {
                t.push_str(&line);
            }
        }
        self.dispatch(ev.kind);
        true
    }

    pub fn run_to_end(&mut self) {
        while self.step() {}
    }

    pub fn finish(mut self) -> RunResult {
        self.run_to_end();
        let mut residual = 0u64;
        for r in &self.relays {
            residual += r.queue.len() as u64 + r.in_flight.is_some() as u64;
        }
        for s in &self.sources {
            residual += s.queue.len() as u64 + s.in_flight.is_some() as u64;
        }
        let sources = self
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (channel, relay) = match s.phase {
                    Phase::Associated { relay, channel, .. } => (Some(channel), Some(relay)),
                    _ => (None, None),
                };
                SourceSnapshot {
                    id: SourceId(i as u16),
                    position_m: s.position,
                    active: s.active,
                    channel,
                    relay,
                    local_delay_ms: s.ewma.value(),
                    queued: s.queue.len() + s.in_flight.is_some() as usize,
                }
            })
            .collect();
        let relays = self
            .topo
            .relays
            .iter()
            .zip(&self.relays)
            .map(|(site, r)| RelaySnapshot {
                id: site.id,
                channel: site.channel,
                parent: site.parent,
                hops: site.hops,
                queued: r.queue.len() + r.in_flight.is_some() as usize,
                local_delay_ms: r.ewma.value(),
                advertised_ms: r.advertised,
                associated: r.associated.len(),
            })
            .collect();
        RunResult {
            scenario: self.name,
            seed: self.seed,
            metrics: self.metrics,
            generated: self.generated,
            delivered: self.delivered,
            residual,
            events_dispatched: self.dispatched,
            out_of_order: self.queue.out_of_order(),
            trace_digest: self.digest,
            trace: self.trace,
            reseeks: self.reseeks,
            sources,
            relays,
        }
    }

    fn schedule(&mut self, time: SimTime, kind: EventKind) {
        self.queue.push(time, kind);
    }

    fn check(&mut self, rec: CheckRecord) {
        if let Some(c) = self.checks.as_mut() {
            c.push(rec);
        }
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::SourceJoin { source } => {
                if self.sources[source.0 as usize].epoch == 0 {
                    self.activate(source);
                }
            }
            EventKind::TrafficGen { source, epoch } => {
                if self.sources[source.0 as usize].epoch != epoch {
                    return;
                }
                if let Traffic::Periodic { interval_ms } = self.traffic {
                    self.schedule(self.now + ms_to_us(interval_ms), EventKind::TrafficGen { source, epoch });
                }
                self.generate(source);
                self.try_start_source(source);
            }
            EventKind::ServiceComplete { node } => self.complete(node, true),
            EventKind::AckTimeout { node } => self.complete(node, false),
            EventKind::PacketArrival {
                source,
                relay,
                seek,
                cursor,
                advertised,
            } => self.on_reply(source, relay, seek, cursor, advertised),
            EventKind::SeekChannelDeadline { source, seek, cursor } => self.on_seek_deadline(source, seek, cursor),
            EventKind::SeekFinish { source, seek } => self.on_seek_finish(source, seek),
            EventKind::SeekStart { source, epoch } => {
                let s = &self.sources[source.0 as usize];
                if s.epoch == epoch && s.active && matches!(s.phase, Phase::Idle) {
                    self.request_seek(source);
                }
            }
            EventKind::PeriodicSeekTimer { source, epoch } => {
                let s = &self.sources[source.0 as usize];
                if s.epoch != epoch {
                    return;
                }
                let seeking = matches!(s.phase, Phase::Seeking(_));
                self.schedule(self.now + self.periodic_seek_us, EventKind::PeriodicSeekTimer { source, epoch });
                if !seeking {
                    self.request_seek(source);
                }
            }
            EventKind::MobilityStep => {
                let hallway = self.topo.hallway_m;
                for s in &mut self.sources {
                    let (pos, mob) = mobility_step(s.position, s.mobility, 1.0, hallway);
                    s.position = pos;
                    s.mobility = mob;
                }
                self.schedule(self.now + SECOND_US, EventKind::MobilityStep);
            }
            EventKind::NodeToggle { toggle, on } => {
                let ids = self.toggles[toggle].sources.clone();
                for id in ids {
                    if on {
                        self.activate(SourceId(id));
                    } else {
                        self.deactivate(SourceId(id));
                    }
                }
            }
            EventKind::MetricsTick => {
                let mut counts: BTreeMap<Channel, u64> = BTreeMap::new();
                for s in &self.sources {
                    if let (true, Phase::Associated { channel, .. }) = (s.active, &s.phase) {
                        *counts.entry(*channel).or_insert(0) += 1;
                    }
                }
                self.metrics.sample_occupancy(self.now / MINUTE_US, &counts);
                self.schedule(self.now + SECOND_US, EventKind::MetricsTick);
            }
        }
    }

    fn activate(&mut self, source: SourceId) {
        let now = self.now;
        let s = &mut self.sources[source.0 as usize];
        if s.active {
            return;
        }
        s.active = true;
        s.epoch += 1;
        let epoch = s.epoch;
        match self.traffic {
            Traffic::Periodic { interval_ms } => {
                let phase = self.rng.random_range(0..ms_to_us(interval_ms).max(1));
                self.schedule(now + phase, EventKind::TrafficGen { source, epoch });
            }
            Traffic::Saturating => {
                while self.room(source) {
                    self.generate(source);
                }
            }
        }
        // first re-check at a random phase so sources do not reseek in lockstep
        let first = self.rng.random_range(1..=self.periodic_seek_us.max(1));
        self.schedule(now + first, EventKind::PeriodicSeekTimer { source, epoch });
        self.request_seek(source);
    }

    fn deactivate(&mut self, source: SourceId) {
        let now = self.now;
        let s = &mut self.sources[source.0 as usize];
        if !s.active {
            // never joined: keep the pending join from firing
            s.epoch += 1;
            return;
        }
        s.active = false;
        s.epoch += 1;
        s.seek_gen += 1;
        s.pending_seek = false;
        if let Phase::Seeking(seek) = &s.phase {
            let rec = SeekRecord {
                source,
                start: seek.phase_start(),
                duration_us: now - seek.phase_start(),
                channels_probed: seek.cursor(),
                result: SeekResult::Aborted,
            };
            self.metrics.record_seek(rec);
        }
        self.detach(source);
        let s = &mut self.sources[source.0 as usize];
        s.phase = Phase::Idle;
        let dropped = s.queue.len();
        s.queue.clear();
        for _ in 0..dropped {
            self.metrics.record_drop(DropCause::NodeOff);
        }
    }

    fn detach(&mut self, source: SourceId) {
        if let Phase::Associated { relay, .. } = self.sources[source.0 as usize].phase {
            self.relays[relay.0 as usize].associated.remove(&source);
        }
    }

    fn room(&self, source: SourceId) -> bool {
        let s = &self.sources[source.0 as usize];
        s.queue.len() + usize::from(s.in_flight.is_some()) < self.queue_bound
    }

    fn generate(&mut self, source: SourceId) {
        self.generated += 1;
        let id = self.next_packet;
        self.next_packet += 1;
        if !self.room(source) {
            self.metrics.record_drop(DropCause::Overflow);
            return;
        }
        let now = self.now;
        self.sources[source.0 as usize].queue.push_back(Packet {
            id,
            source,
            generated_at: now,
            enqueued_at: now,
            failures: 0,
            source_hop: 0,
        });
    }

    fn distance_to_relay(&self, source: SourceId, relay: RelayId) -> f64 {
        (self.sources[source.0 as usize].position - self.topo.relay(relay).position_m).abs()
    }

    fn try_start_source(&mut self, source: SourceId) {
        let s = &self.sources[source.0 as usize];
        if !s.active || s.in_flight.is_some() || s.pending_seek || s.queue.is_empty() {
            return;
        }
        let Phase::Associated { relay, channel, .. } = s.phase else {
            return;
        };
        let prr = self.radio.prr_of_distance(self.distance_to_relay(source, relay), channel);
        let outcome = self.radio.attempt_transmission(prr, &mut self.rng);
        let s = &mut self.sources[source.0 as usize];
        let packet = s.queue.pop_front().expect("queue checked non-empty");
        s.in_flight = Some(InFlight {
            packet,
            target: Some(relay),
        });
        self.schedule_completion(Node::Source(source), outcome);
        if self.traffic == Traffic::Saturating {
            self.generate(source);
        }
    }

    fn try_start_relay(&mut self, relay: RelayId) {
        let r = &self.relays[relay.0 as usize];
        if r.in_flight.is_some() || r.queue.is_empty() {
            return;
        }
        let site = self.topo.relay(relay);
        let (target, dist) = match site.parent {
            Some(p) => (Some(p), (site.position_m - self.topo.relay(p).position_m).abs()),
            None => (None, (site.position_m - self.topo.gateway_m).abs()),
        };
        let prr = self.radio.prr_of_distance(dist, site.channel);
        let outcome = self.radio.attempt_transmission(prr, &mut self.rng);
        let r = &mut self.relays[relay.0 as usize];
        let packet = r.queue.pop_front().expect("queue checked non-empty");
        r.in_flight = Some(InFlight { packet, target });
        self.schedule_completion(Node::Relay(relay), outcome);
    }

    fn schedule_completion(&mut self, node: Node, outcome: TxOutcome) {
        let t = self.now + self.radio.sample_service_time(&mut self.rng);
        let kind = match outcome {
            TxOutcome::Delivered { .. } => EventKind::ServiceComplete { node },
            TxOutcome::AckFailed => EventKind::AckTimeout { node },
        };
        self.schedule(t, kind);
    }

    fn complete(&mut self, node: Node, acked: bool) {
        match node {
            Node::Source(s) => self.complete_source(s, acked),
            Node::Relay(r) => self.complete_relay(r, acked),
        }
    }

    fn complete_source(&mut self, source: SourceId, acked: bool) {
        let now = self.now;
        let max_retries = self.radio.max_retries;
        let s = &mut self.sources[source.0 as usize];
        let Some(InFlight { mut packet, target }) = s.in_flight.take() else {
            return;
        };
        if acked {
            let waited = us_to_ms(now - packet.enqueued_at);
            s.ewma.update(waited).expect("queuing delay is non-negative");
            let relay = target.expect("sources always send to a relay");
            packet.enqueued_at = now;
            packet.failures = 0;
            packet.source_hop = self.topo.relay(relay).hops + 1;
            self.relay_enqueue(relay, packet);
        } else {
            packet.failures += 1;
            if packet.failures > max_retries {
                self.metrics.record_drop(DropCause::Retries);
            } else if !s.active {
                self.metrics.record_drop(DropCause::NodeOff);
            } else {
                s.queue.push_front(packet);
            }
        }
        let s = &mut self.sources[source.0 as usize];
        if s.pending_seek && s.active {
            s.pending_seek = false;
            self.start_seek(source);
        } else {
            self.try_start_source(source);
        }
    }

    fn relay_enqueue(&mut self, relay: RelayId, packet: Packet) {
        let r = &mut self.relays[relay.0 as usize];
        if r.queue.len() + r.in_flight.is_some() as usize >= self.queue_bound {
            self.metrics.record_drop(DropCause::Overflow);
            return;
        }
        r.queue.push_back(packet);
        self.try_start_relay(relay);
    }

    fn complete_relay(&mut self, relay: RelayId, acked: bool) {
        let now = self.now;
        let max_retries = self.radio.max_retries;
        let r = &mut self.relays[relay.0 as usize];
        let Some(InFlight { mut packet, target }) = r.in_flight.take() else {
            return;
        };
        if acked {
            let waited = us_to_ms(now - packet.enqueued_at);
            r.ewma.update(waited).expect("queuing delay is non-negative");
            self.refresh_advertised(relay);
            match target {
                Some(parent) => {
                    packet.enqueued_at = now;
                    packet.failures = 0;
                    self.relay_enqueue(parent, packet);
                }
                None => {
                    let channel = self.topo.relay(relay).channel;
                    let rec = DeliveryRecord::new(
                        packet.id,
                        packet.source,
                        channel,
                        packet.source_hop,
                        packet.generated_at,
                        now,
                    );
                    self.metrics.record_delivery(rec);
                    self.delivered += 1;
                }
            }
        } else {
            packet.failures += 1;
            if packet.failures > max_retries {
                self.metrics.record_drop(DropCause::Retries);
            } else {
                r.queue.push_front(packet);
            }
        }
        let advertised = self.relays[relay.0 as usize].advertised;
        self.check(CheckRecord::Advertisement { relay, value: advertised });
        self.overhear(relay, advertised);
        self.try_start_relay(relay);
    }

    /// Recomputes the path delay of `relay` and everything below it.
    fn refresh_advertised(&mut self, relay: RelayId) {
        for i in 0..self.subtrees[relay.0 as usize].len() {
            let id = self.subtrees[relay.0 as usize][i];
            let parent = match self.topo.relay(id).parent {
                Some(p) => PathDelayEstimate {
                    total: self.relays[p.0 as usize].advertised,
                },
                None => PathDelayEstimate::ZERO,
            };
            let r = &mut self.relays[id.0 as usize];
            r.advertised = crate::protocol::path_delay_aggregate(&r.ewma, parent).total;
        }
    }

    /// Associated sources listen to the relay's frame and re-evaluate.
    fn overhear(&mut self, relay: RelayId, advertised: f64) {
        if self.relays[relay.0 as usize].associated.is_empty() {
            return;
        }
        let channel = self.topo.relay(relay).channel;
        let members: Vec<SourceId> = self.relays[relay.0 as usize].associated.iter().copied().collect();
        let mut reseek = Vec::new();
        for source in members {
            let prr = self.radio.prr_of_distance(self.distance_to_relay(source, relay), channel);
            if self.rng.random::<f64>() >= prr {
                continue;
            }
            let lqi = self.radio.lqi.sample(prr, &mut self.rng);
            let s = &mut self.sources[source.0 as usize];
            let Phase::Associated { monitor, .. } = &mut s.phase else {
                continue;
            };
            let decision = monitor.on_overheard(PathDelayEstimate { total: advertised }, &s.ewma, lqi);
            let current_d = monitor.current_d();
            self.check(CheckRecord::Decision {
                source,
                relay,
                current_d,
            });
            if let Decision::Reseek(reason) = decision {
                *self.reseeks.entry(reason.as_str()).or_insert(0) += 1;
                reseek.push(source);
            }
        }
        for source in reseek {
            self.request_seek(source);
        }
    }

    fn request_seek(&mut self, source: SourceId) {
        let s = &mut self.sources[source.0 as usize];
        if s.in_flight.is_some() {
            s.pending_seek = true;
        } else {
            self.start_seek(source);
        }
    }

    fn start_seek(&mut self, source: SourceId) {
        self.detach(source);
        let now = self.now;
        let channels = self.seek_channels.clone();
        let seek = SeekState::begin(source, channels, now, self.timing).expect("seek channel list is validated non-empty");
        let deadline = seek.deadline();
        let s = &mut self.sources[source.0 as usize];
        s.seek_gen += 1;
        s.pending_seek = false;
        s.phase = Phase::Seeking(seek);
        let gen = s.seek_gen;
        self.probe_channel(source, now);
        self.schedule(deadline, EventKind::SeekChannelDeadline { source, seek: gen, cursor: 0 });
    }

    /// Broadcasts a probe on the current seek channel at `at`. Each relay
    /// hearing it answers after a random backoff.
    fn probe_channel(&mut self, source: SourceId, at: SimTime) {
        let s = &self.sources[source.0 as usize];
        let Phase::Seeking(seek) = &s.phase else {
            return;
        };
        let Some(channel) = seek.current_channel() else {
            return;
        };
        let (gen, cursor) = (s.seek_gen, seek.cursor());
        let frame = self.radio.airtime_us(self.radio.control_bytes);
        let candidates: Vec<RelayId> = self.topo.on_channel(channel).map(|r| r.id).collect();
        for relay in candidates {
            let prr = self.radio.prr_of_distance(self.distance_to_relay(source, relay), channel);
            if self.rng.random::<f64>() >= prr {
                continue;
            }
            let advertised = self.relays[relay.0 as usize].advertised;
            self.check(CheckRecord::Advertisement { relay, value: advertised });
            let backoff = self.rng.random_range(0..=self.reply_backoff_us);
            if self.rng.random::<f64>() >= prr {
                continue;
            }
            self.schedule(
                at + frame + backoff + frame,
                EventKind::PacketArrival {
                    source,
                    relay,
                    seek: gen,
                    cursor,
                    advertised,
                },
            );
        }
    }

    fn on_reply(&mut self, source: SourceId, relay: RelayId, gen: u32, cursor: usize, advertised: f64) {
        let now = self.now;
        let s = &self.sources[source.0 as usize];
        if s.seek_gen != gen {
            return;
        }
        let Phase::Seeking(seek) = &s.phase else {
            return;
        };
        if seek.cursor() != cursor {
            return;
        }
        let channel = self.topo.relay(relay).channel;
        let prr = self.radio.prr_of_distance(self.distance_to_relay(source, relay), channel);
        let lqi = self.radio.lqi.sample(prr, &mut self.rng);
        let Phase::Seeking(seek) = &mut self.sources[source.0 as usize].phase else {
            return;
        };
        let reply = ProbeReply {
            relay,
            channel,
            advertised_delay: PathDelayEstimate { total: advertised },
        };
        if seek.handle_reply(reply, lqi, now) == ReplyOutcome::Recorded && self.timing.early_advance {
            let at = seek.advance_at().max(now);
            self.schedule(at, EventKind::SeekChannelDeadline { source, seek: gen, cursor });
        }
    }

    fn on_seek_deadline(&mut self, source: SourceId, gen: u32, cursor: usize) {
        let now = self.now;
        let s = &self.sources[source.0 as usize];
        if s.seek_gen != gen {
            return;
        }
        let Phase::Seeking(seek) = &s.phase else {
            return;
        };
        if seek.cursor() != cursor || now < seek.advance_at() {
            return;
        }
        let switch = self.radio.sample_switch_delay(&mut self.rng);
        let Phase::Seeking(seek) = &mut self.sources[source.0 as usize].phase else {
            return;
        };
        match seek.advance(now, switch) {
            Ok(SeekStep::Probe { deadline, .. }) => {
                let cursor = seek.cursor();
                self.probe_channel(source, deadline - self.timing.ack_timeout_us);
                self.schedule(deadline, EventKind::SeekChannelDeadline { source, seek: gen, cursor });
            }
            Ok(SeekStep::Done) => {
                self.schedule(now + self.seek_overhead_us, EventKind::SeekFinish { source, seek: gen });
            }
            Err(_) => {}
        }
    }

    fn on_seek_finish(&mut self, source: SourceId, gen: u32) {
        let now = self.now;
        let s = &mut self.sources[source.0 as usize];
        if s.seek_gen != gen {
            return;
        }
        let Phase::Seeking(seek) = &s.phase else {
            return;
        };
        let start = seek.phase_start();
        let probed = seek.channels().len();
        let selection = seek.select();
        let result = if selection.is_ok() {
            SeekResult::Associated
        } else {
            SeekResult::NoCandidates
        };
        self.metrics.record_seek(SeekRecord {
            source,
            start,
            duration_us: now - start,
            channels_probed: probed,
            result,
        });
        match selection {
            Ok(sel) => {
                let monitor = MonitorState::new(&sel, self.params).expect("monitor parameters are validated");
                if s.last_channel.is_some_and(|c| c != sel.channel) {
                    self.metrics.record_switch(source);
                }
                s.last_channel = Some(sel.channel);
                s.phase = Phase::Associated {
                    relay: sel.relay,
                    channel: sel.channel,
                    monitor,
                };
                self.relays[sel.relay.0 as usize].associated.insert(source);
                self.try_start_source(source);
            }
            Err(_) => {
                s.phase = Phase::Idle;
                let epoch = s.epoch;
                self.schedule(now + self.seek_retry_us, EventKind::SeekStart { source, epoch });
            }
        }
    }
}

fn trace_line(ev: &SimEvent) -> String {
    let node = ev.kind.node().map_or_else(|| "-".to_string(), |n| n.to_string());
    let detail = match ev.kind {
        EventKind::TrafficGen { epoch, .. }
        | EventKind::SeekStart { epoch, .. }
        | EventKind::PeriodicSeekTimer { epoch, .. } => format!("epoch={epoch}"),
        EventKind::PacketArrival {
            relay,
            seek,
            cursor,
            advertised,
            ..
        } => {
            let frame = wire::Reply::new(relay.0, advertised)
                .map(|r| wire::hex(&r.encode()))
                .unwrap_or_else(|_| "unencodable".to_string());
            format!("seek={seek} cursor={cursor} reply={frame}")
        }
        EventKind::SeekChannelDeadline { seek, cursor, .. } => format!("seek={seek} cursor={cursor}"),
        EventKind::SeekFinish { seek, .. } => format!("seek={seek}"),
        EventKind::NodeToggle { toggle, on } => format!("toggle={toggle} on={on}"),
        _ => "-".to_string(),
    };
    let mut line = String::new();
    let _ = writeln!(line, "{} {} {} {} {}", ev.time, ev.seq, ev.kind.name(), node, detail);
    line
}

pub fn run(cfg: &ScenarioConfig, seed: u64) -> Result<RunResult, SimError> {
    run_with(cfg, seed, RunOptions::default())
}

pub fn run_with(cfg: &ScenarioConfig, seed: u64, opts: RunOptions) -> Result<RunResult, SimError> {
    Ok(Engine::with_options(cfg, seed, opts)?.finish())
}
