use std::sync::Arc;

use safetsc::intersection::PhaseId;
use safetsc::microsim::{DemandProfile, SimConfig, TrafficSim};
use safetsc::preset;

fn sim(cfg: SimConfig) -> TrafficSim {
    TrafficSim::new(Arc::new(preset::owl322_model()), Arc::new(preset::owl322_graph()), None, Arc::new(cfg)).unwrap()
}

#[test]
fn rush_hour_fills_lanes_within_a_minute() {
    let cfg = SimConfig::rush_hour(3600);
    let per_second: f64 = cfg.lanes.iter().map(|l| l.demand.arrival_probability(0)).sum();
    let mut spawned = 0.0;
    for seed in 0..100 {
        let mut s = sim(cfg.clone());
        s.reset(seed).unwrap();
        let mut seen = false;
        for _ in 0..60 {
            let mask = s.action_mask();
            let r = s.step(if mask.get(PhaseId(1)) { PhaseId(1) } else { mask.lowest().unwrap() }).unwrap();
            seen |= r.info.metrics.lanes.iter().any(|l| l.wave > 0);
        }
        assert!(seen, "seed {seed}: no vehicle within 60 s");
        spawned += s.counts().spawned as f64;
    }
    // arrivals are Bernoulli per lane and second
    let mean = spawned / 100.0;
    let expected = 60.0 * per_second;
    let sd = (60.0 * cfg.lanes.iter().map(|l| l.demand.arrival_probability(0) * (1.0 - l.demand.arrival_probability(0))).sum::<f64>() / 100.0).sqrt();
    assert!((mean - expected).abs() < 4.0 * sd, "mean {mean}, expected {expected} +- {sd}");
}

#[test]
fn phase_three_one_hot_and_elapsed() {
    let mut s = sim(SimConfig::rush_hour(600));
    s.reset(5).unwrap();
    for _ in 0..6 {
        s.step(PhaseId(1)).unwrap();
    }
    let mut r = s.step(PhaseId(3)).unwrap();
    while r.info.phase_duration_s < 4 {
        r = s.step(PhaseId(3)).unwrap();
    }
    let v = r.observation.as_slice();
    let one_hot = &v[18..26];
    assert_eq!(one_hot.iter().position(|&x| x == 1.0), Some(2));
    assert_eq!(one_hot.iter().sum::<f64>(), 1.0);
    assert_eq!(v[26], 4.0 / 60.0);
}

#[test]
fn wave_feature_counts_vehicles() {
    let mut s = sim(SimConfig::rush_hour(600));
    s.reset(6).unwrap();
    for _ in 0..200 {
        let a = s.action_mask().lowest().unwrap();
        let r = s.step(a).unwrap();
        for (i, lane) in s.lanes().iter().enumerate() {
            assert_eq!(r.observation.as_slice()[4 * i + 3], lane.len() as f64 / 20.0);
        }
    }
}

/// Removing pedestrian demand at one crosswalk changes only that
/// crosswalk's wait feature: arrivals draw the generator every second
/// whatever the rate, so vehicle traffic is identical.
#[test]
fn pedestrian_wait_is_local() {
    let with = SimConfig::rush_hour(600);
    let mut without = with.clone();
    without.crosswalks[0].demand = DemandProfile::constant(0.0);
    let (mut a, mut b) = (sim(with), sim(without));
    a.reset(11).unwrap();
    b.reset(11).unwrap();
    let mut differed = false;
    for t in 0..600 {
        // hold phases that never serve crosswalk 0 so its wait builds up
        let want = if (t / 40) % 2 == 0 { PhaseId(3) } else { PhaseId(1) };
        let mask = a.action_mask();
        let action = if mask.get(want) { want } else { mask.lowest().unwrap() };
        let (ra, rb) = (a.step(action).unwrap(), b.step(action).unwrap());
        for (i, (x, y)) in ra.observation.as_slice().iter().zip(rb.observation.as_slice()).enumerate() {
            if i == 16 {
                differed |= x != y;
            } else {
                assert_eq!(x, y, "feature {i} differs at t={t}");
            }
        }
    }
    assert!(differed);
}
