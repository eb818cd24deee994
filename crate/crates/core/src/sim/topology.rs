//! Static per-channel backbone trees rooted at the gateway.

use thiserror::Error;

use crate::types::{Channel, RelayId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("relay {relay} on channel {channel} has no usable path to the gateway")]
    Disconnected { relay: RelayId, channel: Channel },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaySite {
    pub id: RelayId,
    pub channel: Channel,
    pub position_m: f64,
    /// `None` means the gateway.
    pub parent: Option<RelayId>,
    /// Backbone hops to the gateway, 1 for the gateway's children.
    pub hops: u32,
    pub children: Vec<RelayId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub gateway_m: f64,
    pub hallway_m: f64,
    pub relays: Vec<RelaySite>,
}

impl Topology {
    /// Builds a min-hop tree per channel over links whose delivery ratio
    /// (given by `prr`) is at least `min_prr`. Among equally short routes the
    /// parent with the best link wins, then the lowest id.
    pub fn build(
        channels: &[Channel],
        positions: &[f64],
        gateway_m: f64,
        hallway_m: f64,
        min_prr: f64,
        prr: impl Fn(f64, Channel) -> f64,
    ) -> Result<Self, TopologyError> {
        let n = positions.len();
        let mut relays = Vec::with_capacity(channels.len() * n);
        for (ci, &channel) in channels.iter().enumerate() {
            let base = ci * n;
            let mut hops: Vec<Option<u32>> = vec![None; n];
            let mut parent: Vec<Option<RelayId>> = vec![None; n];
            let mut frontier: Vec<usize> = (0..n)
                .filter(|&k| prr((positions[k] - gateway_m).abs(), channel) >= min_prr)
                .collect();
            for &k in &frontier {
                hops[k] = Some(1);
            }
            let mut level = 1;
            while !frontier.is_empty() {
                level += 1;
                let mut next = Vec::new();
                for k in 0..n {
                    if hops[k].is_some() {
                        continue;
                    }
                    let best = frontier
                        .iter()
                        .map(|&p| (p, prr((positions[k] - positions[p]).abs(), channel)))
                        .filter(|&(_, q)| q >= min_prr)
                        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                    if let Some((p, _)) = best {
                        hops[k] = Some(level);
                        parent[k] = Some(RelayId((base + p) as u16));
                        next.push(k);
                    }
                }
                frontier = next;
            }
            for k in 0..n {
                let id = RelayId((base + k) as u16);
                let Some(h) = hops[k] else {
                    return Err(TopologyError::Disconnected { relay: id, channel });
                };
                relays.push(RelaySite {
                    id,
                    channel,
                    position_m: positions[k],
                    parent: parent[k],
                    hops: h,
                    children: Vec::new(),
                });
            }
        }
        for i in 0..relays.len() {
            if let Some(p) = relays[i].parent {
                let child = relays[i].id;
                relays[p.0 as usize].children.push(child);
            }
        }
        Ok(Self {
            gateway_m,
            hallway_m,
            relays,
        })
    }

    pub fn relay(&self, id: RelayId) -> &RelaySite {
        &self.relays[id.0 as usize]
    }

    pub fn on_channel(&self, channel: Channel) -> impl Iterator<Item = &RelaySite> {
        self.relays.iter().filter(move |r| r.channel == channel)
    }

    /// Relay ids from `id` up to the gateway's child, inclusive.
    pub fn path_to_gateway(&self, id: RelayId) -> Vec<RelayId> {
        let mut path = vec![id];
        let mut cur = self.relay(id).parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.relay(p).parent;
        }
        path
    }

    /// `id` and every relay below it, parents before children.
    pub fn subtree(&self, id: RelayId) -> Vec<RelayId> {
        let mut out = vec![id];
        let mut i = 0;
        while i < out.len() {
            out.extend(self.relay(out[i]).children.iter().copied());
            i += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::radio::logistic_prr;
    use proptest::prelude::*;

    fn build(positions: &[f64]) -> Result<Topology, TopologyError> {
        let chans = [Channel::new(25).unwrap(), Channel::new(26).unwrap()];
        Topology::build(&chans, positions, 0.0, 40.0, 0.8, |d, _| logistic_prr(d, 18.0, 2.5))
    }

    #[test]
    fn default_layout_is_a_chain() {
        let t = build(&[5.0, 15.0, 25.0, 35.0]).unwrap();
        assert_eq!(t.relays.len(), 8);
        let hops: Vec<u32> = t.relays.iter().map(|r| r.hops).collect();
        assert_eq!(hops, [1, 2, 3, 4, 1, 2, 3, 4]);
        assert_eq!(t.relay(RelayId(7)).parent, Some(RelayId(6)));
        assert_eq!(t.relay(RelayId(4)).parent, None);
        assert_eq!(t.path_to_gateway(RelayId(3)), [RelayId(3), RelayId(2), RelayId(1), RelayId(0)]);
        assert_eq!(t.subtree(RelayId(1)), [RelayId(1), RelayId(2), RelayId(3)]);
    }

    #[test]
    fn unreachable_relay_is_an_error() {
        assert!(matches!(build(&[5.0, 39.0]), Err(TopologyError::Disconnected { .. })));
    }

    proptest! {
        #[test]
        fn trees_are_rooted_and_acyclic(mut pos in prop::collection::vec(0.0f64..40.0, 1..10)) {
            pos.sort_by(f64::total_cmp);
            if let Ok(t) = build(&pos) {
                for r in &t.relays {
                    let path = t.path_to_gateway(r.id);
                    prop_assert_eq!(path.len() as u32, r.hops);
                    prop_assert!(path.iter().all(|p| t.relay(*p).channel == r.channel));
                    prop_assert_eq!(t.relay(*path.last().unwrap()).parent, None);
                }
            }
        }
    }
}
