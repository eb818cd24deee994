//! One-dimensional walkers along the hallway.

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mobility {
    Stationary,
    Walker { speed_mps: f64, heading: i8 },
}

/// Advances `pos` by `dt_s`, bouncing off both hallway ends.
pub fn mobility_step(pos: f64, mobility: Mobility, dt_s: f64, hallway_m: f64) -> (f64, Mobility) {
    let Mobility::Walker { speed_mps, heading } = mobility else {
        return (pos, mobility);
    };
    if hallway_m <= 0.0 {
        return (0.0, mobility);
    }
    let raw = pos + heading as f64 * speed_mps * dt_s;
    // number of hallway lengths crossed; odd counts leave the walker mirrored
    let k = (raw / hallway_m).floor();
    let r = raw - k * hallway_m;
    let (x, h) = if (k as i64).rem_euclid(2) == 0 {
        (r, heading)
    } else {
        (hallway_m - r, -heading)
    };
    (x.clamp(0.0, hallway_m), Mobility::Walker { speed_mps, heading: h })
}
