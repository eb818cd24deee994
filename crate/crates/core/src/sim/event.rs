//! Time-ordered event queue.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::types::{RelayId, SimTime, SourceId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    /// A source creates a data packet (periodic traffic only).
    TrafficGen { source: SourceId, epoch: u32 },
    /// A transmission attempt ends with the frame acknowledged.
    ServiceComplete { node: Node },
    /// A transmission attempt ends without an acknowledgement.
    AckTimeout { node: Node },
    /// A probe reply reaches the seeking source. `seek` is the generation of the seek that sent the probe.
    PacketArrival { source: SourceId, relay: RelayId, seek: u32, cursor: usize, advertised: f64 },
    SeekChannelDeadline { source: SourceId, seek: u32, cursor: usize },
    /// End of the fixed per-seek processing overhead, selection happens here.
    SeekFinish { source: SourceId, seek: u32 },
    /// Retry after a seek found no candidates.
    SeekStart { source: SourceId, epoch: u32 },
    SourceJoin { source: SourceId },
    PeriodicSeekTimer { source: SourceId, epoch: u32 },
    MobilityStep,
    NodeToggle { toggle: usize, on: bool },
    MetricsTick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Node {
    Source(SourceId),
    Relay(RelayId),
}

impl std::fmt::Display for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Node::Source(s) => s.fmt(f),
            Node::Relay(r) => r.fmt(f),
        }
    }
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::TrafficGen { .. } => "TrafficGen",
            EventKind::ServiceComplete { .. } => "ServiceComplete",
            EventKind::AckTimeout { .. } => "AckTimeout",
            EventKind::PacketArrival { .. } => "PacketArrival",
            EventKind::SeekChannelDeadline { .. } => "SeekChannelDeadline",
            EventKind::SeekFinish { .. } => "SeekFinish",
            EventKind::SeekStart { .. } => "SeekStart",
            EventKind::SourceJoin { .. } => "SourceJoin",
            EventKind::PeriodicSeekTimer { .. } => "PeriodicSeekTimer",
            EventKind::MobilityStep => "MobilityStep",
            EventKind::NodeToggle { .. } => "NodeToggle",
            EventKind::MetricsTick => "MetricsTick",
        }
    }

    fn code(&self) -> u64 {
        match self {
            EventKind::TrafficGen { .. } => 1,
            EventKind::ServiceComplete { .. } => 2,
            EventKind::AckTimeout { .. } => 3,
            EventKind::PacketArrival { .. } => 4,
            EventKind::SeekChannelDeadline { .. } => 5,
            EventKind::SeekFinish { .. } => 6,
            EventKind::SeekStart { .. } => 7,
            EventKind::PeriodicSeekTimer { .. } => 8,
            EventKind::MobilityStep => 9,
            EventKind::NodeToggle { .. } => 10,
            EventKind::MetricsTick => 11,
            EventKind::SourceJoin { .. } => 12,
        }
    }

    /// Node the event concerns, `None` for global events.
    pub fn node(&self) -> Option<Node> {
        match *self {
            EventKind::TrafficGen { source, .. }
            | EventKind::PacketArrival { source, .. }
            | EventKind::SeekChannelDeadline { source, .. }
            | EventKind::SeekFinish { source, .. }
            | EventKind::SeekStart { source, .. }
            | EventKind::SourceJoin { source }
            | EventKind::PeriodicSeekTimer { source, .. } => Some(Node::Source(source)),
            EventKind::ServiceComplete { node } | EventKind::AckTimeout { node } => Some(node),
            EventKind::MobilityStep | EventKind::NodeToggle { .. } | EventKind::MetricsTick => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

impl SimEvent {
    /// Hash input for the run digest.
    pub(crate) fn digest_words(&self) -> [u64; 4] {
        let node = match self.kind.node() {
            Some(Node::Source(s)) => 1 << 16 | s.0 as u64,
            Some(Node::Relay(r)) => 2 << 16 | r.0 as u64,
            None => 0,
        };
        [self.time, self.seq, self.kind.code(), node]
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry(SimEvent);

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        (self.0.time, self.0.seq) == (other.0.time, other.0.seq)
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.time, other.0.seq).cmp(&(self.0.time, self.0.seq))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Entry>,
    next_seq: u64,
    last: Option<(SimTime, u64)>,
    out_of_order: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: SimTime, kind: EventKind) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry(SimEvent { time, seq, kind }));
        seq
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.0.time)
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        let ev = self.heap.pop()?.0;
        let key = (ev.time, ev.seq);
        if let Some(last) = self.last {
            if key <= last {
                self.out_of_order += 1;
                debug_assert!(false, "event {key:?} dispatched after {last:?}");
            }
        }
        self.last = Some(key);
        Some(ev)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn out_of_order(&self) -> u64 {
        self.out_of_order
    }
}
