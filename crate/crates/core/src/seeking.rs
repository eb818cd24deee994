//! Channel seeking: probe every candidate channel, collect relay replies,
//! then attach to the best (link class, advertised delay) candidate.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{classify_link, LinkClass, PathDelayEstimate};
use crate::types::{Channel, RelayId, SimTime, SourceId};

/// Default per-channel wait for probe replies, in microseconds.
pub const DEFAULT_ACK_TIMEOUT_US: SimTime = 22_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SeekError {
    #[error("seek requested with an empty channel list")]
    EmptyChannelList,
    #[error("no relay answered on any probed channel")]
    NoCandidates,
    #[error("channel {channel} cannot advance before its deadline ({deadline} us, now {now} us)")]
    DeadlineNotReached {
        channel: Channel,
        deadline: SimTime,
        now: SimTime,
    },
    #[error("seek already finished")]
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeekTiming {
    pub ack_timeout_us: SimTime,
    /// Leave a channel once it has produced a reply and half the timeout
    /// has elapsed, instead of always waiting the full timeout.
    pub early_advance: bool,
}

impl Default for SeekTiming {
    fn default() -> Self {
        Self {
            ack_timeout_us: DEFAULT_ACK_TIMEOUT_US,
            early_advance: false,
        }
    }
}

/// Reply to a probe as seen by the seeking source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReply {
    pub relay: RelayId,
    pub channel: Channel,
    pub advertised_delay: PathDelayEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub relay: RelayId,
    pub channel: Channel,
    pub link_class: LinkClass,
    /// The single LQI sample the class was derived from.
    pub lqi: f64,
    pub advertised_delay: PathDelayEstimate,
}

/// Candidates keyed by `(relay, channel)`; a later reply from the same
/// relay on the same channel replaces the earlier one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateTable {
    entries: BTreeMap<(RelayId, Channel), CandidateEntry>,
}

impl CandidateTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: CandidateEntry) {
        self.entries.insert((entry.relay, entry.channel), entry);
    }

    pub fn get(&self, relay: RelayId, channel: Channel) -> Option<&CandidateEntry> {
        self.entries.get(&(relay, channel))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CandidateEntry> {
        self.entries.values()
    }
}

impl FromIterator<CandidateEntry> for CandidateTable {
    fn from_iter<I: IntoIterator<Item = CandidateEntry>>(iter: I) -> Self {
        let mut table = CandidateTable::new();
        for e in iter {
            table.insert(e);
        }
        table
    }
}

/// The attachment chosen at the end of a seek, with the baselines the
/// monitoring phase compares against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub relay: RelayId,
    pub channel: Channel,
    pub baseline_delay: PathDelayEstimate,
    pub baseline_lqi: f64,
    pub baseline_class: LinkClass,
}

/// Best link class first, then smallest advertised delay, then lowest
/// relay id, then lowest channel.
pub fn select_candidate(table: &CandidateTable) -> Result<Selection, SeekError> {
    table
        .iter()
        .min_by(|a, b| {
            Reverse(a.link_class)
                .cmp(&Reverse(b.link_class))
                .then_with(|| a.advertised_delay.total.total_cmp(&b.advertised_delay.total))
                .then_with(|| a.relay.cmp(&b.relay))
                .then_with(|| a.channel.cmp(&b.channel))
        })
        .map(|e| Selection {
            relay: e.relay,
            channel: e.channel,
            baseline_delay: e.advertised_delay,
            baseline_lqi: e.lqi,
            baseline_class: e.link_class,
        })
        .ok_or(SeekError::NoCandidates)
}

/// What the radio should do after a channel's deadline passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeekStep {
    /// Retune and broadcast a probe; the new channel closes at `deadline`.
    Probe { channel: Channel, deadline: SimTime },
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyOutcome {
    Recorded,
    /// Arrived after the current channel's deadline.
    Late,
    /// Claims a channel other than the one being probed.
    WrongChannel,
    AfterDone,
}

/// Progress of one seek by one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SeekState {
    source: SourceId,
    channels: Vec<Channel>,
    cursor: usize,
    table: CandidateTable,
    timing: SeekTiming,
    phase_start: SimTime,
    channel_start: SimTime,
    deadline: SimTime,
    replies_on_channel: usize,
}

impl SeekState {
    /// Starts probing `channels[0]` at `now`.
    pub fn begin(
        source: SourceId,
        channels: Vec<Channel>,
        now: SimTime,
        timing: SeekTiming,
    ) -> Result<Self, SeekError> {
        if channels.is_empty() {
            return Err(SeekError::EmptyChannelList);
        }
        Ok(Self {
            source,
            channels,
            cursor: 0,
            table: CandidateTable::new(),
            timing,
            phase_start: now,
            channel_start: now,
            deadline: now + timing.ack_timeout_us,
            replies_on_channel: 0,
        })
    }

    pub fn source(&self) -> SourceId {
        self.source
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn is_done(&self) -> bool {
        self.cursor >= self.channels.len()
    }

    /// Channel currently under probe, `None` once every channel is done.
    pub fn current_channel(&self) -> Option<Channel> {
        self.channels.get(self.cursor).copied()
    }

    pub fn table(&self) -> &CandidateTable {
        &self.table
    }

    pub fn phase_start(&self) -> SimTime {
        self.phase_start
    }

    /// Full-timeout deadline of the current channel.
    pub fn deadline(&self) -> SimTime {
        self.deadline
    }

    /// Instant the current channel may be left. Equal to [`Self::deadline`]
    /// unless early advance is enabled and a reply has been heard.
    pub fn advance_at(&self) -> SimTime {
        if self.timing.early_advance && self.replies_on_channel > 0 {
            self.channel_start + self.timing.ack_timeout_us / 2
        } else {
            self.deadline
        }
    }

    /// Records a reply. The link class comes from this one LQI sample.
    pub fn handle_reply(&mut self, reply: ProbeReply, lqi: f64, now: SimTime) -> ReplyOutcome {
        let Some(channel) = self.current_channel() else {
            return ReplyOutcome::AfterDone;
        };
        if reply.channel != channel {
            return ReplyOutcome::WrongChannel;
        }
        if now > self.deadline {
            return ReplyOutcome::Late;
        }
        self.table.insert(CandidateEntry {
            relay: reply.relay,
            channel,
            link_class: classify_link(lqi),
            lqi,
            advertised_delay: reply.advertised_delay,
        });
        self.replies_on_channel += 1;
        ReplyOutcome::Recorded
    }

    /// Moves past the current channel. `switch_delay` is the radio retune
    /// time drawn for the next channel.
    pub fn advance(&mut self, now: SimTime, switch_delay: SimTime) -> Result<SeekStep, SeekError> {
        let Some(channel) = self.current_channel() else {
            return Err(SeekError::Finished);
        };
        let due = self.advance_at();
        if now < due {
            return Err(SeekError::DeadlineNotReached {
                channel,
                deadline: due,
                now,
            });
        }
        self.cursor += 1;
        self.replies_on_channel = 0;
        match self.current_channel() {
            Some(next) => {
                self.channel_start = now + switch_delay;
                self.deadline = self.channel_start + self.timing.ack_timeout_us;
                Ok(SeekStep::Probe {
                    channel: next,
                    deadline: self.deadline,
                })
            }
            None => Ok(SeekStep::Done),
        }
    }

    pub fn select(&self) -> Result<Selection, SeekError> {
        select_candidate(&self.table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ch(n: u8) -> Channel {
        Channel::new(n).unwrap()
    }

    fn entry(relay: u16, channel: u8, class: LinkClass, delay: f64) -> CandidateEntry {
        CandidateEntry {
            relay: RelayId(relay),
            channel: ch(channel),
            link_class: class,
            lqi: 90.0,
            advertised_delay: PathDelayEstimate::new(delay).unwrap(),
        }
    }

    fn reply(relay: u16, channel: u8, delay: f64) -> ProbeReply {
        ProbeReply {
            relay: RelayId(relay),
            channel: ch(channel),
            advertised_delay: PathDelayEstimate::new(delay).unwrap(),
        }
    }

    #[test]
    fn begin_sets_first_deadline() {
        let s = SeekState::begin(SourceId(7), vec![ch(25), ch(26)], 0, SeekTiming::default()).unwrap();
        assert_eq!(s.cursor(), 0);
        assert_eq!(s.deadline(), 22_000);
        assert_eq!(s.current_channel(), Some(ch(25)));
        assert!(s.table().is_empty());
    }

    #[test]
    fn begin_rejects_empty_list() {
        assert_eq!(
            SeekState::begin(SourceId(7), vec![], 0, SeekTiming::default()),
            Err(SeekError::EmptyChannelList)
        );
    }

    #[test]
    fn sixteen_channel_plan() {
        let s = SeekState::begin(SourceId(7), Channel::all(), 0, SeekTiming::default()).unwrap();
        assert_eq!(s.channels().len(), 16);
        assert_eq!(s.channels()[0], ch(11));
        assert_eq!(s.channels()[15], ch(26));
    }

    #[test]
    fn reply_classified_from_single_sample() {
        let mut s = SeekState::begin(SourceId(7), vec![ch(25), ch(26)], 0, SeekTiming::default()).unwrap();
        assert_eq!(s.handle_reply(reply(3, 25, 40.0), 92.0, 5_000), ReplyOutcome::Recorded);
        let e = s.table().get(RelayId(3), ch(25)).unwrap();
        assert_eq!(e.link_class, LinkClass::Good);
        assert_eq!(e.advertised_delay.total, 40.0);
    }

    #[test]
    fn duplicate_reply_overwrites() {
        let mut s = SeekState::begin(SourceId(7), vec![ch(25)], 0, SeekTiming::default()).unwrap();
        s.handle_reply(reply(3, 25, 40.0), 92.0, 1_000);
        s.handle_reply(reply(3, 25, 55.0), 70.0, 2_000);
        assert_eq!(s.table().len(), 1);
        let e = s.table().get(RelayId(3), ch(25)).unwrap();
        assert_eq!(e.link_class, LinkClass::Poor);
        assert_eq!(e.advertised_delay.total, 55.0);
    }

    #[test]
    fn late_and_foreign_replies_ignored() {
        let mut s = SeekState::begin(SourceId(7), vec![ch(25), ch(26)], 0, SeekTiming::default()).unwrap();
        assert_eq!(s.handle_reply(reply(3, 25, 40.0), 92.0, 52_000), ReplyOutcome::Late);
        assert_eq!(s.handle_reply(reply(4, 26, 40.0), 92.0, 1_000), ReplyOutcome::WrongChannel);
        assert!(s.table().is_empty());
    }

    #[test]
    fn advance_through_two_channels() {
        let mut s = SeekState::begin(SourceId(7), vec![ch(25), ch(26)], 0, SeekTiming::default()).unwrap();
        assert!(matches!(s.advance(10_000, 1_000), Err(SeekError::DeadlineNotReached { .. })));
        assert_eq!(
            s.advance(22_000, 1_000),
            Ok(SeekStep::Probe {
                channel: ch(26),
                deadline: 45_000
            })
        );
        assert_eq!(s.advance(45_000, 1_000), Ok(SeekStep::Done));
        assert!(s.is_done());
        assert_eq!(s.advance(50_000, 1_000), Err(SeekError::Finished));
    }

    #[test]
    fn sixteen_silent_channels_under_bound() {
        let timing = SeekTiming::default();
        let mut s = SeekState::begin(SourceId(1), Channel::all(), 0, timing).unwrap();
        let now = loop {
            let now = s.advance_at();
            if s.advance(now, 1_400).unwrap() == SeekStep::Done {
                break now;
            }
        };
        assert!(now < 400_000, "took {now} us");
        assert!(s.select().is_err());
    }

    #[test]
    fn early_advance_only_after_reply() {
        let timing = SeekTiming {
            early_advance: true,
            ..SeekTiming::default()
        };
        let mut s = SeekState::begin(SourceId(1), vec![ch(25), ch(26)], 0, timing).unwrap();
        assert_eq!(s.advance_at(), 22_000);
        s.handle_reply(reply(1, 25, 3.0), 95.0, 4_000);
        assert_eq!(s.advance_at(), 11_000);
        assert!(s.advance(11_000, 700).is_ok());
        assert_eq!(s.advance_at(), 11_700 + 22_000);
    }

    #[test]
    fn selection_examples() {
        let t: CandidateTable = [entry(1, 25, LinkClass::Good, 50.0), entry(2, 25, LinkClass::Fair, 10.0)]
            .into_iter()
            .collect();
        assert_eq!(select_candidate(&t).unwrap().relay, RelayId(1));

        let t: CandidateTable = [entry(1, 25, LinkClass::Good, 50.0), entry(2, 26, LinkClass::Good, 20.0)]
            .into_iter()
            .collect();
        let sel = select_candidate(&t).unwrap();
        assert_eq!((sel.relay, sel.channel), (RelayId(2), ch(26)));
        assert_eq!(sel.baseline_delay.total, 20.0);

        assert_eq!(select_candidate(&CandidateTable::new()), Err(SeekError::NoCandidates));

        let t: CandidateTable = [entry(2, 25, LinkClass::Good, 20.0), entry(1, 26, LinkClass::Good, 20.0)]
            .into_iter()
            .collect();
        assert_eq!(select_candidate(&t).unwrap().relay, RelayId(1));
    }

    #[test]
    fn selection_falls_back_to_poor() {
        let t: CandidateTable = [entry(5, 25, LinkClass::Poor, 9.0), entry(6, 26, LinkClass::Poor, 3.0)]
            .into_iter()
            .collect();
        assert_eq!(select_candidate(&t).unwrap().relay, RelayId(6));
    }

    fn arb_entry() -> impl Strategy<Value = CandidateEntry> {
        (0u16..20, 25u8..=26, 0usize..3, 0u32..50).prop_map(|(r, c, k, d)| {
            let class = [LinkClass::Poor, LinkClass::Fair, LinkClass::Good][k];
            entry(r, c, class, d as f64)
        })
    }

    proptest! {
        #[test]
        fn selection_invariant_under_insertion_order(
            mut entries in prop::collection::vec(arb_entry(), 1..40),
            seed in any::<u64>(),
        ) {
            // dedupe keys so both tables hold the same set
            let mut seen = std::collections::BTreeSet::new();
            entries.retain(|e| seen.insert((e.relay, e.channel)));
            let forward: CandidateTable = entries.iter().copied().collect();
            let mut shuffled = entries.clone();
            let n = shuffled.len();
            for i in 0..n {
                let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % n as u64) as usize;
                shuffled.swap(i, j);
            }
            let backward: CandidateTable = shuffled.into_iter().collect();
            prop_assert_eq!(select_candidate(&forward), select_candidate(&backward));
        }

        #[test]
        fn seek_visits_each_channel_once_within_bound(
            n in 1usize..=16,
            switches in prop::collection::vec(700u64..=1_400, 16),
        ) {
            let timing = SeekTiming::default();
            let channels: Vec<Channel> = Channel::all().into_iter().take(n).collect();
            let mut s = SeekState::begin(SourceId(0), channels.clone(), 0, timing).unwrap();
            let mut visited = vec![s.current_channel().unwrap()];
            let mut now;
            let mut k = 0;
            loop {
                now = s.advance_at();
                match s.advance(now, switches[k]).unwrap() {
                    SeekStep::Probe { channel, .. } => visited.push(channel),
                    SeekStep::Done => break,
                }
                k += 1;
            }
            prop_assert_eq!(visited, channels);
            prop_assert!(now <= n as u64 * (timing.ack_timeout_us + 1_400));
        }
    }
}
