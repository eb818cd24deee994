use chanalloc::metrics::DropCause;
use chanalloc::scenario::{LayoutConfig, LinkShape, RadioConfig, SourcesConfig, ToggleConfig, Traffic};
use chanalloc::sim::{run, run_with, Engine, RadioModel, RunOptions, TxOutcome};
use chanalloc::types::{Channel, RelayId, SourceId};
use chanalloc::{builtin, ScenarioConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SERVICE_MS: f64 = 23.448;

fn radio() -> RadioModel {
    RadioModel::from_config(&RadioConfig::default(), 22_000)
}

/// Normal-approximation half width of a 99.9% binomial interval.
fn ci(p: f64, n: usize) -> f64 {
    3.29 * (p * (1.0 - p) / n as f64).sqrt()
}

fn delivery_rate(prr: f64, n: usize, seed: u64) -> f64 {
    let m = radio();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ok = (0..n)
        .filter(|_| matches!(m.attempt_transmission(prr, &mut rng), TxOutcome::Delivered { .. }))
        .count();
    ok as f64 / n as f64
}

#[test]
fn perfect_link_loses_only_acks() {
    let rate = delivery_rate(1.0, 10_000, 1);
    assert!((rate - 0.98).abs() <= ci(0.98, 10_000), "rate {rate}");
    assert!(1.0 - rate <= 0.02 + ci(0.02, 10_000));
}

#[test]
fn dead_link_never_delivers() {
    assert_eq!(delivery_rate(0.0, 10_000, 2), 0.0);
}

#[test]
fn half_link_delivers_product_of_probabilities() {
    let expected = 0.5 * 0.98;
    let rate = delivery_rate(0.5, 10_000, 3);
    assert!((rate - expected).abs() <= 0.02, "rate {rate}");
}

#[test]
fn delivered_frames_carry_lqi_in_range() {
    let m = radio();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        if let TxOutcome::Delivered { lqi } = m.attempt_transmission(0.9, &mut rng) {
            assert!((40.0..=110.0).contains(&lqi));
        }
    }
}

/// One relay, one source, a lossless radio and no backoff jitter.
fn single_hop(relay_gateway_m: f64) -> ScenarioConfig {
    let mut cfg = builtin("throughput-cal").unwrap();
    cfg.name = "single-hop".into();
    cfg.duration_s = 60.0;
    cfg.layout = LayoutConfig {
        relays_per_channel: 1,
        hallway_m: 40.0,
        gateway_m: 0.0,
        relay_positions_m: Some(vec![relay_gateway_m]),
        backbone_min_prr: 0.0,
    };
    cfg.sources = SourcesConfig {
        count: 1,
        positions_m: Some(vec![relay_gateway_m]),
        traffic: Traffic::Periodic { interval_ms: 1000.0 },
        walkers: Vec::new(),
        start_jitter_ms: 0.0,
    };
    cfg.radio.backoff_max_ms = 0.0;
    cfg.radio.ack_success = 1.0;
    cfg
}

#[test]
fn lone_packet_waits_exactly_one_service_time() {
    let mut cfg = single_hop(5.0);
    cfg.duration_s = 2.0;
    // far-reaching links make every attempt succeed
    cfg.radio.channel_links.insert(26, LinkShape { d50_m: 1000.0, width_m: 1.0 });
    let r = run(&cfg, 1).unwrap();
    assert!(r.delivered >= 1);
    let relay = &r.relays[0];
    assert!((relay.local_delay_ms - SERVICE_MS).abs() < 1e-9, "{}", relay.local_delay_ms);
    for d in r.metrics.deliveries() {
        assert!((d.latency_ms - 2.0 * SERVICE_MS).abs() < 1e-9);
    }
}

#[test]
fn coin_flip_link_doubles_local_delay() {
    // relay sits at the link midpoint: every attempt to the gateway succeeds
    // with probability one half, so attempts per packet are geometric(1/2)
    let mut cfg = single_hop(18.0);
    cfg.duration_s = 3000.0;
    cfg.radio.max_retries = 60;
    let mut engine = Engine::new(&cfg, 7).unwrap();
    let mut samples = Vec::new();
    let mut last = 0.0;
    while engine.step() {
        let v = engine.relay_local_delay(RelayId(0));
        if v != last {
            samples.push(v);
            last = v;
        }
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    // renewal argument: E[attempts] = 1 / p = 2
    let expected = 2.0 * SERVICE_MS;
    assert!(samples.len() > 1000);
    assert!((mean - expected).abs() < 0.05 * expected, "mean {mean} vs {expected}");
}

#[test]
fn empty_scenario_runs_cleanly() {
    let mut cfg = builtin("steady-low").unwrap();
    cfg.sources.count = 0;
    cfg.duration_s = 30.0;
    let r = run(&cfg, 1).unwrap();
    assert_eq!((r.generated, r.delivered, r.dropped(), r.residual), (0, 0, 0, 0));
    assert!(r.summary().latency.is_empty());
}

#[test]
fn same_seed_same_bytes() {
    let mut cfg = builtin("mobile-high").unwrap();
    cfg.scale_to_duration(120.0).unwrap();
    let opts = RunOptions {
        trace: true,
        record_checks: false,
    };
    let a = run_with(&cfg, 9, opts).unwrap();
    let b = run_with(&cfg, 9, opts).unwrap();
    assert_eq!(a.summary().csv_files(), b.summary().csv_files());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.trace_digest, b.trace_digest);
    let c = run(&cfg, 10).unwrap();
    assert_ne!(a.trace_digest, c.trace_digest);
}

#[test]
fn trace_lines_have_five_fields_in_order() {
    let mut cfg = builtin("steady-low").unwrap();
    cfg.duration_s = 20.0;
    let opts = RunOptions {
        trace: true,
        record_checks: false,
    };
    let r = run_with(&cfg, 1, opts).unwrap();
    let trace = r.trace.unwrap();
    let mut prev = (0u64, 0u64);
    let mut lines = 0;
    for (i, line) in trace.lines().enumerate() {
        let f: Vec<&str> = line.splitn(5, ' ').collect();
        assert_eq!(f.len(), 5, "{line}");
        let key = (f[0].parse().unwrap(), f[1].parse().unwrap());
        if i > 0 {
            assert!(key > prev, "{line}");
        }
        prev = key;
        lines += 1;
    }
    assert_eq!(lines as u64, r.events_dispatched);
    assert!(trace.contains(" PacketArrival s"));
    assert!(trace.contains(" reply=02"));
}

#[test]
fn conservation_and_latency_floor() {
    for name in ["steady-high", "dynamic-low", "mobile-low"] {
        let mut cfg = builtin(name).unwrap();
        cfg.scale_to_duration(240.0).unwrap();
        let r = run(&cfg, 3).unwrap();
        assert!(r.conserved(), "{name}");
        assert_eq!(r.out_of_order, 0);
        let airtime_ms = 3.648;
        for d in r.metrics.deliveries() {
            assert!(d.latency_ms >= d.source_hop as f64 * airtime_ms, "{name}: {d:?}");
            assert!((2..=5).contains(&d.source_hop));
        }
    }
}

#[test]
fn hour_long_low_rate_run_delivers_nearly_everything() {
    let cfg = builtin("steady-low").unwrap();
    let r = run(&cfg, 1).unwrap();
    assert!(r.conserved());
    let offered = 45.0 * 3600.0 * (1000.0 / 1024.0);
    let generated = r.generated as f64;
    // traffic starts within the first second and at a random phase
    assert!((generated - offered).abs() / offered < 0.01, "{generated} vs {offered}");
    assert!(r.delivered as f64 / generated > 0.95);
}

#[test]
fn seeks_respect_channel_bound() {
    let mut cfg = builtin("steady-low").unwrap();
    cfg.duration_s = 300.0;
    cfg.protocol.seek_channels = Some((11..=26).collect());
    let r = run(&cfg, 2).unwrap();
    for s in r.metrics.seeks() {
        let bound_ms = s.channels_probed as f64 * (22.0 + 1.4 + 9.0);
        assert!((s.duration_us as f64 / 1000.0) <= bound_ms, "{s:?}");
    }
}

#[test]
fn occupancy_counts_every_associated_source() {
    let mut cfg = builtin("steady-high").unwrap();
    cfg.duration_s = 300.0;
    let t = run(&cfg, 4).unwrap().summary();
    for minute in 1..5 {
        let total: f64 = t.mean_occupancy(minute, minute + 1).values().sum();
        // a few sources are mid-seek at any sample
        assert!((44.0..=45.0).contains(&total), "minute {minute}: {total}");
    }
}

#[test]
fn switching_everyone_off_stops_deliveries() {
    let mut cfg = builtin("steady-high").unwrap();
    cfg.duration_s = 120.0;
    cfg.toggles = vec![ToggleConfig {
        sources: (0..45).collect(),
        off_s: 60.0,
        on_s: None,
    }];
    let r = run(&cfg, 5).unwrap();
    assert!(r.conserved());
    assert!(r.metrics.drops(DropCause::NodeOff) > 0);
    // whatever was queued drains within a few seconds
    let last = r.metrics.deliveries().iter().map(|d| d.delivered_at).max().unwrap();
    assert!(last < 65_000_000, "last delivery at {last}");
    assert!(r.sources.iter().all(|s| !s.active && s.channel.is_none()));
    assert_eq!(r.residual, 0);
}

#[test]
fn empty_toggle_list_matches_steady_run() {
    let mut steady = builtin("steady-low").unwrap();
    steady.duration_s = 120.0;
    let mut toggled = steady.clone();
    toggled.toggles = vec![ToggleConfig {
        sources: Vec::new(),
        off_s: 30.0,
        on_s: Some(60.0),
    }];
    let a = run(&steady, 1).unwrap().summary().csv_files();
    let b = run(&toggled, 1).unwrap().summary().csv_files();
    assert_eq!(a, b);
}

#[test]
fn toggled_sources_come_back() {
    let mut cfg = builtin("dynamic-low").unwrap();
    cfg.scale_to_duration(600.0).unwrap();
    let r = run(&cfg, 6).unwrap();
    assert!(r.sources.iter().all(|s| s.active));
    let aborted = r
        .metrics
        .seeks()
        .iter()
        .filter(|s| s.result == chanalloc::SeekResult::Aborted)
        .count();
    assert!(aborted <= cfg.toggles[0].sources.len());
    assert!(r.sources.iter().filter(|s| s.channel.is_some()).count() >= 43);
}

#[test]
fn walkers_stay_in_hallway_and_keep_associating() {
    let mut cfg = builtin("mobile-high").unwrap();
    cfg.scale_to_duration(300.0).unwrap();
    let r = run(&cfg, 1).unwrap();
    for id in 40..45 {
        let s = &r.sources[id];
        assert!((0.0..=40.0).contains(&s.position_m));
    }
    let switches: u64 = r.summary().switches.iter().filter(|(s, _)| s.0 >= 40).map(|x| x.1).sum();
    assert!(switches > 0);
}

#[test]
fn no_candidates_leads_to_retry() {
    let mut cfg = single_hop(5.0);
    cfg.duration_s = 10.0;
    // probe a channel without any relay
    cfg.protocol.seek_channels = Some(vec![11]);
    let r = run(&cfg, 1).unwrap();
    let seeks = r.metrics.seeks();
    assert!(seeks.len() >= 5);
    assert!(seeks.iter().all(|s| s.result == chanalloc::SeekResult::NoCandidates));
    assert_eq!(r.delivered, 0);
    assert!(r.conserved());
    assert_eq!(r.sources[0].channel, None);
    let _ = (Channel::new(11).unwrap(), SourceId(0));
}

#[test]
fn invalid_scenario_is_rejected_before_running() {
    let mut cfg = builtin("steady-low").unwrap();
    cfg.channels = vec![27];
    let err = run(&cfg, 1).unwrap_err().to_string();
    assert!(err.contains("channels"), "{err}");
}
