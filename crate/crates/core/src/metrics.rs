//! Per-run measurements and the CSV tables derived from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::types::{us_to_ms, Channel, SimTime, SourceId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeliveryRecord {
    pub packet: u64,
    pub source: SourceId,
    pub channel: Channel,
    /// Backbone hops of the source's relay plus the source's own link.
    pub source_hop: u32,
    pub generated_at: SimTime,
    pub delivered_at: SimTime,
    pub latency_ms: f64,
}

impl DeliveryRecord {
    pub fn new(
        packet: u64,
        source: SourceId,
        channel: Channel,
        source_hop: u32,
        generated_at: SimTime,
        delivered_at: SimTime,
    ) -> Self {
        Self {
            packet,
            source,
            channel,
            source_hop,
            generated_at,
            delivered_at,
            latency_ms: us_to_ms(delivered_at.saturating_sub(generated_at)),
        }
    }

    pub fn backbone_hop(&self) -> u32 {
        self.source_hop.saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropCause {
    /// Queue full on arrival.
    Overflow,
    /// Every retransmission went unacknowledged.
    Retries,
    /// Discarded when its source was switched off.
    NodeOff,
}

impl DropCause {
    pub const ALL: [DropCause; 3] = [DropCause::Overflow, DropCause::Retries, DropCause::NodeOff];

    pub fn as_str(self) -> &'static str {
        match self {
            DropCause::Overflow => "overflow",
            DropCause::Retries => "retries",
            DropCause::NodeOff => "node_off",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeekResult {
    Associated,
    NoCandidates,
    Aborted,
}

impl SeekResult {
    pub fn as_str(self) -> &'static str {
        match self {
            SeekResult::Associated => "associated",
            SeekResult::NoCandidates => "no_candidates",
            SeekResult::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeekRecord {
    pub source: SourceId,
    pub start: SimTime,
    pub duration_us: SimTime,
    pub channels_probed: usize,
    pub result: SeekResult,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct OccupancyCell {
    sum: u64,
    samples: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsStore {
    channels: Vec<Channel>,
    payload_bits: u64,
    duration_us: SimTime,
    deliveries: Vec<DeliveryRecord>,
    occupancy: BTreeMap<(u64, Channel), OccupancyCell>,
    seeks: Vec<SeekRecord>,
    switches: BTreeMap<SourceId, u64>,
    drops: BTreeMap<DropCause, u64>,
    bits_by_channel: BTreeMap<Channel, u64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("delivery record for packet {packet} violates its invariants: {reason}")]
pub struct RecordError {
    pub packet: u64,
    pub reason: &'static str,
}

impl MetricsStore {
    pub fn new(channels: Vec<Channel>, payload_bytes: u32, duration_us: SimTime) -> Self {
        let bits_by_channel = channels.iter().map(|&c| (c, 0)).collect();
        Self {
            channels,
            payload_bits: payload_bytes as u64 * 8,
            duration_us,
            deliveries: Vec::new(),
            occupancy: BTreeMap::new(),
            seeks: Vec::new(),
            switches: BTreeMap::new(),
            drops: DropCause::ALL.iter().map(|&c| (c, 0)).collect(),
            bits_by_channel,
        }
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn duration_us(&self) -> SimTime {
        self.duration_us
    }

    pub fn try_record_delivery(&mut self, rec: DeliveryRecord) -> Result<(), RecordError> {
        if rec.delivered_at <= rec.generated_at {
            return Err(RecordError {
                packet: rec.packet,
                reason: "delivered_at must follow generated_at",
            });
        }
        if rec.latency_ms != us_to_ms(rec.delivered_at - rec.generated_at) {
            return Err(RecordError {
                packet: rec.packet,
                reason: "latency must equal delivered_at - generated_at",
            });
        }
        *self.bits_by_channel.entry(rec.channel).or_insert(0) += self.payload_bits;
        self.deliveries.push(rec);
        Ok(())
    }

    /// Appends a delivery. A record violating its invariants means the
    /// kernel is broken, so this panics.
    pub fn record_delivery(&mut self, rec: DeliveryRecord) {
        if let Err(e) = self.try_record_delivery(rec) {
            panic!("{e}");
        }
    }

    /// One occupancy sample: associated sources per channel at an instant.
    pub fn sample_occupancy(&mut self, minute: u64, counts: &BTreeMap<Channel, u64>) {
        for &ch in &self.channels {
            let cell = self.occupancy.entry((minute, ch)).or_default();
            cell.sum += counts.get(&ch).copied().unwrap_or(0);
            cell.samples += 1;
        }
    }

    pub fn record_seek(&mut self, rec: SeekRecord) {
        self.seeks.push(rec);
    }

    pub fn record_switch(&mut self, source: SourceId) {
        *self.switches.entry(source).or_insert(0) += 1;
    }

    pub fn ensure_switch_entry(&mut self, source: SourceId) {
        self.switches.entry(source).or_insert(0);
    }

    pub fn record_drop(&mut self, cause: DropCause) {
        *self.drops.entry(cause).or_insert(0) += 1;
    }

    pub fn deliveries(&self) -> &[DeliveryRecord] {
        &self.deliveries
    }

    pub fn seeks(&self) -> &[SeekRecord] {
        &self.seeks
    }

    pub fn drops(&self, cause: DropCause) -> u64 {
        self.drops.get(&cause).copied().unwrap_or(0)
    }

    pub fn total_drops(&self) -> u64 {
        self.drops.values().sum()
    }

    pub fn delivered_bits(&self, channel: Channel) -> u64 {
        self.bits_by_channel.get(&channel).copied().unwrap_or(0)
    }

    pub fn summarize(&self) -> SummaryTables {
        summarize(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupancyRow {
    pub minute: u64,
    pub channel: Channel,
    /// Mean number of associated sources over the minute's samples.
    pub node_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub channel: Channel,
    pub source_hop: u32,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputRow {
    pub channel: Option<Channel>,
    pub kbps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeekStats {
    pub count: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryTables {
    pub occupancy: Vec<OccupancyRow>,
    pub latency: Vec<LatencyRow>,
    pub throughput: Vec<ThroughputRow>,
    pub seek_stats: SeekStats,
    pub seeks: Vec<SeekRecord>,
    pub switches: Vec<(SourceId, u64)>,
    pub drops: Vec<(DropCause, u64)>,
}

pub const CSV_FILES: [&str; 6] = [
    "occupancy.csv",
    "latency.csv",
    "throughput.csv",
    "seeks.csv",
    "switches.csv",
    "drops.csv",
];

pub fn summarize(store: &MetricsStore) -> SummaryTables {
    let occupancy = store
        .occupancy
        .iter()
        .map(|(&(minute, channel), cell)| OccupancyRow {
            minute,
            channel,
            node_count: if cell.samples == 0 {
                0.0
            } else {
                cell.sum as f64 / cell.samples as f64
            },
        })
        .collect();

    // (sum, min, max, count) per (channel, hop)
    let mut groups: BTreeMap<(Channel, u32), (f64, f64, f64, u64)> = BTreeMap::new();
    for d in &store.deliveries {
        let g = groups
            .entry((d.channel, d.source_hop))
            .or_insert((0.0, f64::INFINITY, f64::NEG_INFINITY, 0));
        g.0 += d.latency_ms;
        g.1 = g.1.min(d.latency_ms);
        g.2 = g.2.max(d.latency_ms);
        g.3 += 1;
    }
    let latency = groups
        .into_iter()
        .map(|((channel, source_hop), (sum, min, max, count))| LatencyRow {
            channel,
            source_hop,
            mean_ms: sum / count as f64,
            min_ms: min,
            max_ms: max,
            count,
        })
        .collect();

    let secs = store.duration_us as f64 / 1e6;
    let kbps = |bits: u64| if secs > 0.0 { bits as f64 / secs / 1000.0 } else { 0.0 };
    let mut throughput: Vec<ThroughputRow> = store
        .channels
        .iter()
        .map(|&c| ThroughputRow {
            channel: Some(c),
            kbps: kbps(store.delivered_bits(c)),
        })
        .collect();
    throughput.push(ThroughputRow {
        channel: None,
        kbps: kbps(store.bits_by_channel.values().sum()),
    });

    let seek_ms: Vec<f64> = store
        .seeks
        .iter()
        .filter(|s| s.result != SeekResult::Aborted)
        .map(|s| us_to_ms(s.duration_us))
        .collect();
    let seek_stats = SeekStats {
        count: seek_ms.len(),
        mean_ms: if seek_ms.is_empty() {
            0.0
        } else {
            seek_ms.iter().sum::<f64>() / seek_ms.len() as f64
        },
        max_ms: seek_ms.iter().copied().fold(0.0, f64::max),
    };

    SummaryTables {
        occupancy,
        latency,
        throughput,
        seek_stats,
        seeks: store.seeks.clone(),
        switches: store.switches.iter().map(|(&s, &n)| (s, n)).collect(),
        drops: store.drops.iter().map(|(&c, &n)| (c, n)).collect(),
    }
}

impl SummaryTables {
    /// Mean occupancy per channel over minutes `[from, to)`.
    pub fn mean_occupancy(&self, from_minute: u64, to_minute: u64) -> BTreeMap<Channel, f64> {
        let mut acc: BTreeMap<Channel, (f64, u64)> = BTreeMap::new();
        for row in self
            .occupancy
            .iter()
            .filter(|r| r.minute >= from_minute && r.minute < to_minute)
        {
            let e = acc.entry(row.channel).or_default();
            e.0 += row.node_count;
            e.1 += 1;
        }
        acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
    }

    /// Delivery-weighted mean latency per channel.
    pub fn channel_mean_latency(&self) -> BTreeMap<Channel, f64> {
        let mut acc: BTreeMap<Channel, (f64, u64)> = BTreeMap::new();
        for row in &self.latency {
            let e = acc.entry(row.channel).or_default();
            e.0 += row.mean_ms * row.count as f64;
            e.1 += row.count;
        }
        acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
    }

    /// Delivery-weighted mean latency per source hop, across channels.
    pub fn hop_mean_latency(&self) -> BTreeMap<u32, f64> {
        let mut acc: BTreeMap<u32, (f64, u64)> = BTreeMap::new();
        for row in &self.latency {
            let e = acc.entry(row.source_hop).or_default();
            e.0 += row.mean_ms * row.count as f64;
            e.1 += row.count;
        }
        acc.into_iter().map(|(h, (s, n))| (h, s / n as f64)).collect()
    }

    pub fn channel_kbps(&self, channel: Channel) -> Option<f64> {
        self.throughput
            .iter()
            .find(|r| r.channel == Some(channel))
            .map(|r| r.kbps)
    }

    pub fn occupancy_csv(&self) -> String {
        let mut out = String::from("minute,channel,node_count\n");
        for r in &self.occupancy {
            let _ = writeln!(out, "{},{},{:.3}", r.minute, r.channel, r.node_count);
        }
        out
    }

    /// Latencies are reported in whole milliseconds.
    pub fn latency_csv(&self) -> String {
        let mut out = String::from("channel,source_hop,mean_ms,min_ms,max_ms,count\n");
        for r in &self.latency {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.channel,
                r.source_hop,
                r.mean_ms.round() as i64,
                r.min_ms.round() as i64,
                r.max_ms.round() as i64,
                r.count
            );
        }
        out
    }

    pub fn throughput_csv(&self) -> String {
        let mut out = String::from("channel,kbps\n");
        for r in &self.throughput {
            let label = r.channel.map_or_else(|| "all".to_string(), |c| c.to_string());
            let _ = writeln!(out, "{},{:.3}", label, r.kbps);
        }
        out
    }

    pub fn seeks_csv(&self) -> String {
        let mut out = String::from("node,start_us,duration_ms,channels_probed,result\n");
        for s in &self.seeks {
            let _ = writeln!(
                out,
                "{},{},{:.3},{},{}",
                s.source.0,
                s.start,
                us_to_ms(s.duration_us),
                s.channels_probed,
                s.result.as_str()
            );
        }
        out
    }

    pub fn switches_csv(&self) -> String {
        let mut out = String::from("node,count\n");
        for (s, n) in &self.switches {
            let _ = writeln!(out, "{},{}", s.0, n);
        }
        out
    }

    pub fn drops_csv(&self) -> String {
        let mut out = String::from("cause,count\n");
        for (c, n) in &self.drops {
            let _ = writeln!(out, "{},{}", c.as_str(), n);
        }
        out
    }

    /// `(file name, contents)` for every CSV, in [`CSV_FILES`] order.
    pub fn csv_files(&self) -> Vec<(&'static str, String)> {
        vec![
            (CSV_FILES[0], self.occupancy_csv()),
            (CSV_FILES[1], self.latency_csv()),
            (CSV_FILES[2], self.throughput_csv()),
            (CSV_FILES[3], self.seeks_csv()),
            (CSV_FILES[4], self.switches_csv()),
            (CSV_FILES[5], self.drops_csv()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ch(n: u8) -> Channel {
        Channel::new(n).unwrap()
    }

    fn store() -> MetricsStore {
        MetricsStore::new(vec![ch(25), ch(26)], 114, 60_000_000)
    }

    fn rec(id: u64, c: u8, hop: u32, gen: SimTime, lat_ms: u64) -> DeliveryRecord {
        DeliveryRecord::new(id, SourceId(0), ch(c), hop, gen, gen + lat_ms * 1000)
    }

    #[test]
    fn delivery_updates_bits() {
        let mut s = store();
        s.record_delivery(rec(1, 25, 2, 0, 40));
        assert_eq!(s.deliveries().len(), 1);
        assert_eq!(s.delivered_bits(ch(25)), 114 * 8);
        assert_eq!(s.delivered_bits(ch(26)), 0);
    }

    #[test]
    #[should_panic]
    fn delivery_before_generation_panics() {
        let mut s = store();
        s.record_delivery(DeliveryRecord::new(1, SourceId(0), ch(25), 2, 500, 500));
    }

    #[test]
    fn empty_store_summary() {
        let t = store().summarize();
        assert!(t.occupancy.is_empty());
        assert!(t.latency.is_empty());
        assert!(t.throughput.iter().all(|r| r.kbps == 0.0));
        assert_eq!(t.seek_stats.count, 0);
    }

    #[test]
    fn grouped_means_match_naive() {
        let mut s = store();
        let recs = [
            rec(1, 25, 2, 0, 40),
            rec(2, 25, 2, 10, 60),
            rec(3, 25, 3, 20, 90),
            rec(4, 26, 2, 30, 30),
        ];
        for r in recs {
            s.record_delivery(r);
        }
        let t = s.summarize();
        let row = |c: u8, h: u32| t.latency.iter().find(|r| r.channel == ch(c) && r.source_hop == h).unwrap();
        assert_eq!(row(25, 2).mean_ms, 50.0);
        assert_eq!((row(25, 2).min_ms, row(25, 2).max_ms, row(25, 2).count), (40.0, 60.0, 2));
        assert_eq!(row(25, 3).mean_ms, 90.0);
        assert_eq!(row(26, 2).mean_ms, 30.0);
        assert!(t.latency_csv().contains("25,2,50,40,60,2\n"));
    }

    #[test]
    fn throughput_times_duration_is_bits() {
        let mut s = store();
        for i in 0..100 {
            s.record_delivery(rec(i, 26, 2, i * 1000, 20));
        }
        let t = s.summarize();
        let kbps = t.channel_kbps(ch(26)).unwrap();
        assert!((kbps * 1000.0 * 60.0 - (100 * 912) as f64).abs() < 1e-6);
    }

    #[test]
    fn occupancy_means_sum_to_associated() {
        let mut s = store();
        for (a, b) in [(20, 25), (22, 23), (24, 21)] {
            let counts = BTreeMap::from([(ch(25), a), (ch(26), b)]);
            s.sample_occupancy(0, &counts);
        }
        let t = s.summarize();
        let total: f64 = t.occupancy.iter().map(|r| r.node_count).sum();
        assert!((total - 45.0).abs() < 1e-9);
        assert!(t.occupancy_csv().starts_with("minute,channel,node_count\n0,25,22.000\n"));
    }

    #[test]
    fn csv_headers() {
        let t = store().summarize();
        let files = t.csv_files();
        let headers: Vec<&str> = files.iter().map(|(_, c)| c.lines().next().unwrap()).collect();
        assert_eq!(
            headers,
            [
                "minute,channel,node_count",
                "channel,source_hop,mean_ms,min_ms,max_ms,count",
                "channel,kbps",
                "node,start_us,duration_ms,channels_probed,result",
                "node,count",
                "cause,count"
            ]
        );
        assert!(files.iter().all(|(_, c)| !c.contains('\r')));
    }

    proptest! {
        #[test]
        fn latency_groups_permutation_invariant(
            lats in prop::collection::vec((25u8..=26, 2u32..5, 1u64..2000), 1..60),
            rot in 0usize..60,
        ) {
            let recs: Vec<DeliveryRecord> = lats
                .iter()
                .enumerate()
                .map(|(i, &(c, h, l))| rec(i as u64, c, h, i as u64 * 10, l))
                .collect();
            let mut a = store();
            let mut b = store();
            for r in &recs {
                a.record_delivery(*r);
            }
            let mut rotated = recs.clone();
            rotated.rotate_left(rot % recs.len());
            rotated.reverse();
            for r in rotated {
                b.record_delivery(r);
            }
            let (ta, tb) = (a.summarize(), b.summarize());
            prop_assert_eq!(ta.latency.len(), tb.latency.len());
            for (x, y) in ta.latency.iter().zip(&tb.latency) {
                prop_assert_eq!((x.channel, x.source_hop, x.count), (y.channel, y.source_hop, y.count));
                prop_assert!((x.mean_ms - y.mean_ms).abs() < 1e-9);
            }
            prop_assert_eq!(ta.throughput, tb.throughput);
        }
    }
}
