//! Delay and link-quality estimators shared by relays and sources.
//!
//! Everything here is a value type with pure update functions. The
//! simulator owns one [`DelayEwma`] per node and one [`LqiAggregate`] per
//! monitored link.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smoothing weight used by every node for its local queuing delay.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Raw 802.15.4 LQI range accepted by [`LqiAggregate::update`].
pub const LQI_RAW_MAX: f64 = 127.0;

/// Mean LQI at or above which a link is good.
pub const GOOD_LQI: f64 = 85.0;
/// Mean LQI at or above which a link is at least fair.
pub const FAIR_LQI: f64 = 75.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("queuing delay sample must be a non-negative number of milliseconds, got {0}")]
    NegativeDelay(f64),
    #[error("EWMA weight must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("LQI sample {0} outside the raw range [0, 127]")]
    LqiOutOfRange(f64),
    #[error("LQI window capacity must be at least 1")]
    EmptyWindow,
}

/// Exponentially weighted moving average of a node's local queuing delay,
/// in fractional milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayEwma {
    value: f64,
    alpha: f64,
    initialized: bool,
}

impl Default for DelayEwma {
    fn default() -> Self {
        Self::new()
    }
}

impl DelayEwma {
    pub fn new() -> Self {
        Self {
            value: 0.0,
            alpha: DEFAULT_ALPHA,
            initialized: false,
        }
    }

    pub fn with_alpha(alpha: f64) -> Result<Self, ProtocolError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(ProtocolError::InvalidAlpha(alpha));
        }
        Ok(Self {
            value: 0.0,
            alpha,
            initialized: false,
        })
    }

    /// Folds one queuing delay sample into the average.
    ///
    /// The first sample initializes the estimate; afterwards
    /// `value = alpha * value + (1 - alpha) * sample`.
    pub fn update(&mut self, sample_ms: f64) -> Result<(), ProtocolError> {
        if !(sample_ms >= 0.0) || !sample_ms.is_finite() {
            return Err(ProtocolError::NegativeDelay(sample_ms));
        }
        if self.initialized {
            self.value = self.alpha * self.value + (1.0 - self.alpha) * sample_ms;
        } else {
            self.value = sample_ms;
            self.initialized = true;
        }
        Ok(())
    }

    /// Current estimate. An uninitialized average contributes nothing.
    pub fn value(&self) -> f64 {
        if self.initialized {
            self.value
        } else {
            0.0
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }
}

/// Expected end-to-end queuing delay from a node to the gateway, in ms.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
pub struct PathDelayEstimate {
    pub total: f64,
}

impl PathDelayEstimate {
    pub const ZERO: PathDelayEstimate = PathDelayEstimate { total: 0.0 };

    pub fn new(total: f64) -> Result<Self, ProtocolError> {
        if !(total >= 0.0) || !total.is_finite() {
            return Err(ProtocolError::NegativeDelay(total));
        }
        Ok(Self { total })
    }
}

impl fmt::Display for PathDelayEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ms", self.total)
    }
}

/// A node's path delay: its own smoothed queuing delay plus whatever its
/// parent advertises. Relays adjacent to the gateway pass
/// [`PathDelayEstimate::ZERO`] as the parent value.
pub fn path_delay_aggregate(local: &DelayEwma, parent: PathDelayEstimate) -> PathDelayEstimate {
    PathDelayEstimate {
        total: local.value() + parent.total,
    }
}

/// Sliding window over the most recent LQI samples of one link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqiAggregate {
    window: VecDeque<f64>,
    capacity: usize,
    sum: f64,
}

impl LqiAggregate {
    pub fn new(capacity: usize) -> Result<Self, ProtocolError> {
        if capacity == 0 {
            return Err(ProtocolError::EmptyWindow);
        }
        Ok(Self {
            window: VecDeque::with_capacity(capacity),
            capacity,
            sum: 0.0,
        })
    }

    pub fn update(&mut self, sample: f64) -> Result<(), ProtocolError> {
        if !(0.0..=LQI_RAW_MAX).contains(&sample) {
            return Err(ProtocolError::LqiOutOfRange(sample));
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(sample);
        // recomputed from the window, never accumulated
        self.sum = self.window.iter().sum();
        Ok(())
    }

    /// Arithmetic mean of the retained samples, `None` while empty.
    pub fn mean(&self) -> Option<f64> {
        if self.window.is_empty() {
            None
        } else {
            Some(self.sum / self.window.len() as f64)
        }
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }
}

/// Coarse link quality derived from mean LQI. Ordered `Poor < Fair < Good`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkClass {
    Poor,
    Fair,
    Good,
}

impl LinkClass {
    pub fn as_str(self) -> &'static str {
        match self {
            LinkClass::Poor => "poor",
            LinkClass::Fair => "fair",
            LinkClass::Good => "good",
        }
    }
}

impl fmt::Display for LinkClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Good at 85 and above, fair from 75, poor below. Both boundaries
/// belong to the upper class.
pub fn classify_link(mean_lqi: f64) -> LinkClass {
    if mean_lqi >= GOOD_LQI {
        LinkClass::Good
    } else if mean_lqi >= FAIR_LQI {
        LinkClass::Fair
    } else {
        LinkClass::Poor
    }
}

/// Maps a link's packet reception ratio to the LQI the receiver reports.
///
/// The expected LQI is the line through (PRR 0.5, LQI 75) and
/// (PRR 0.8, LQI 85); each sample adds Gaussian noise and is clamped to
/// the observed radio range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqiModel {
    pub sigma: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl Default for LqiModel {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            clamp_min: 40.0,
            clamp_max: 110.0,
        }
    }
}

const ANCHOR_LOW: (f64, f64) = (0.5, FAIR_LQI);
const ANCHOR_HIGH: (f64, f64) = (0.8, GOOD_LQI);

impl LqiModel {
    pub fn noiseless() -> Self {
        Self {
            sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn mean_lqi(&self, prr: f64) -> f64 {
        let slope = (ANCHOR_HIGH.1 - ANCHOR_LOW.1) / (ANCHOR_HIGH.0 - ANCHOR_LOW.0);
        let raw = ANCHOR_LOW.1 + (prr - ANCHOR_LOW.0) * slope;
        raw.clamp(self.clamp_min, self.clamp_max)
    }

    pub fn sample<R: Rng + ?Sized>(&self, prr: f64, rng: &mut R) -> f64 {
        let prr = prr.clamp(0.0, 1.0);
        let mean = self.mean_lqi(prr);
        let noisy = if self.sigma > 0.0 {
            // sigma > 0 and finite, so construction cannot fail
            let normal = Normal::new(0.0, self.sigma).expect("valid sigma");
            mean + normal.sample(rng)
        } else {
            mean
        };
        noisy.clamp(self.clamp_min, self.clamp_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ewma_first_sample_initializes() {
        let mut e = DelayEwma::new();
        assert!(!e.is_initialized());
        assert_eq!(e.value(), 0.0);
        e.update(10.0).unwrap();
        assert_eq!(e.value(), 10.0);
    }

    #[test]
    fn ewma_half_weight() {
        let mut e = DelayEwma::new();
        e.update(10.0).unwrap();
        e.update(20.0).unwrap();
        assert_eq!(e.value(), 15.0);
    }

    #[test]
    fn ewma_constant_is_fixed_point() {
        let mut e = DelayEwma::new();
        for _ in 0..4 {
            e.update(7.0).unwrap();
        }
        assert_eq!(e.value(), 7.0);
    }

    #[test]
    fn ewma_rejects_negative() {
        let mut e = DelayEwma::new();
        assert_eq!(e.update(-1.0), Err(ProtocolError::NegativeDelay(-1.0)));
        assert!(e.update(f64::NAN).is_err());
        assert!(!e.is_initialized());
        assert!(DelayEwma::with_alpha(0.0).is_err());
        assert!(DelayEwma::with_alpha(1.0).is_ok());
    }

    #[test]
    fn ewma_general_alpha_weights_old_value() {
        let mut e = DelayEwma::with_alpha(0.25).unwrap();
        e.update(8.0).unwrap();
        e.update(16.0).unwrap();
        assert!((e.value() - (0.25 * 8.0 + 0.75 * 16.0)).abs() < 1e-12);
    }

    #[test]
    fn path_delay_sums() {
        let idle = DelayEwma::new();
        assert_eq!(path_delay_aggregate(&idle, PathDelayEstimate::ZERO).total, 0.0);
        let mut local = DelayEwma::new();
        local.update(5.0).unwrap();
        let parent = PathDelayEstimate::new(12.0).unwrap();
        assert_eq!(path_delay_aggregate(&local, parent).total, 17.0);
    }

    #[test]
    fn path_delay_chain_matches_path_walk() {
        // relay 0 is gateway-adjacent, 2 is the leaf
        let parents: [Option<usize>; 3] = [None, Some(0), Some(1)];
        let ewmas: Vec<DelayEwma> = [3.0, 4.0, 5.0]
            .iter()
            .map(|&v| {
                let mut e = DelayEwma::new();
                e.update(v).unwrap();
                e
            })
            .collect();
        let mut advertised = [PathDelayEstimate::ZERO; 3];
        for i in 0..3 {
            let parent = parents[i].map_or(PathDelayEstimate::ZERO, |p| advertised[p]);
            advertised[i] = path_delay_aggregate(&ewmas[i], parent);
        }
        let walk = |mut node: usize| {
            let mut sum = 0.0;
            loop {
                sum += ewmas[node].value();
                match parents[node] {
                    Some(p) => node = p,
                    None => return sum,
                }
            }
        };
        assert_eq!(advertised[2].total, 12.0);
        for (i, adv) in advertised.iter().enumerate() {
            assert!((adv.total - walk(i)).abs() < 1e-9);
        }
    }

    #[test]
    fn lqi_window_single_sample() {
        let mut agg = LqiAggregate::new(1).unwrap();
        agg.update(90.0).unwrap();
        assert_eq!(agg.mean(), Some(90.0));
        agg.update(70.0).unwrap();
        assert_eq!(agg.mean(), Some(70.0));
    }

    #[test]
    fn lqi_window_mean() {
        let mut agg = LqiAggregate::new(10).unwrap();
        agg.update(80.0).unwrap();
        agg.update(90.0).unwrap();
        agg.update(100.0).unwrap();
        assert_eq!(agg.mean(), Some(90.0));
    }

    #[test]
    fn lqi_window_eviction_matches_tail_mean() {
        let mut agg = LqiAggregate::new(10).unwrap();
        let mut history = Vec::new();
        for s in std::iter::repeat_n(70.0, 10).chain(std::iter::repeat_n(100.0, 10)) {
            agg.update(s).unwrap();
            history.push(s);
            let tail = &history[history.len().saturating_sub(10)..];
            let naive = tail.iter().sum::<f64>() / tail.len() as f64;
            assert!((agg.mean().unwrap() - naive).abs() < 1e-9);
        }
        assert_eq!(agg.mean(), Some(100.0));
    }

    #[test]
    fn lqi_window_rejects_out_of_range() {
        let mut agg = LqiAggregate::new(3).unwrap();
        assert!(agg.update(128.0).is_err());
        assert!(agg.update(-0.5).is_err());
        assert!(agg.is_empty());
        assert_eq!(LqiAggregate::new(0), Err(ProtocolError::EmptyWindow));
    }

    #[test]
    fn classification_regions() {
        assert_eq!(classify_link(90.0), LinkClass::Good);
        assert_eq!(classify_link(80.0), LinkClass::Fair);
        assert_eq!(classify_link(70.0), LinkClass::Poor);
        assert_eq!(classify_link(85.0), LinkClass::Good);
        assert_eq!(classify_link(75.0), LinkClass::Fair);
        assert!(LinkClass::Good > LinkClass::Fair && LinkClass::Fair > LinkClass::Poor);
    }

    #[test]
    fn lqi_map_anchor_points() {
        let m = LqiModel::noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((m.sample(0.8, &mut rng) - 85.0).abs() < 1e-12);
        assert!((m.sample(0.5, &mut rng) - 75.0).abs() < 1e-12);
    }

    #[test]
    fn lqi_map_monte_carlo_mean() {
        let m = LqiModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mean = (0..n).map(|_| m.sample(0.95, &mut rng)).sum::<f64>() / n as f64;
        // closed form: 75 + 0.45 * 100/3 = 90
        let expected: f64 = 75.0 + (0.95 - 0.5) * (10.0 / 0.3);
        assert!((expected - 90.0).abs() < 1e-9);
        assert!((mean - expected).abs() < 0.5, "mean {mean}");
        assert_eq!(classify_link(mean), LinkClass::Good);
    }

    proptest! {
        #[test]
        fn ewma_stays_within_sample_range(samples in prop::collection::vec(0.0f64..1e4, 1..200)) {
            let mut e = DelayEwma::new();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for s in samples {
                e.update(s).unwrap();
                lo = lo.min(s);
                hi = hi.max(s);
                prop_assert!(e.value() >= lo - 1e-9 && e.value() <= hi + 1e-9);
            }
        }

        #[test]
        fn ewma_converges_on_constant_input(start in 0.0f64..1e4, c in 0.0f64..1e4) {
            let mut e = DelayEwma::new();
            e.update(start).unwrap();
            for _ in 0..80 {
                e.update(c).unwrap();
            }
            prop_assert!((e.value() - c).abs() < 1e-6 * (1.0 + start.max(c)));
        }

        #[test]
        fn classification_is_monotone(a in 0.0f64..127.0, b in 0.0f64..127.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(classify_link(lo) <= classify_link(hi));
        }

        #[test]
        fn noiseless_map_strictly_increasing(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            prop_assume!(a < b);
            let m = LqiModel::noiseless();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            prop_assert!(m.sample(a, &mut rng) < m.sample(b, &mut rng));
        }

        #[test]
        fn window_mean_matches_naive(
            cap in 1usize..16,
            samples in prop::collection::vec(0.0f64..=127.0, 1..100),
        ) {
            let mut agg = LqiAggregate::new(cap).unwrap();
            for (i, &s) in samples.iter().enumerate() {
                agg.update(s).unwrap();
                let tail = &samples[(i + 1).saturating_sub(cap)..=i];
                let naive = tail.iter().sum::<f64>() / tail.len() as f64;
                prop_assert!((agg.mean().unwrap() - naive).abs() < 1e-9);
                prop_assert!(agg.len() <= cap);
            }
        }
    }
}
