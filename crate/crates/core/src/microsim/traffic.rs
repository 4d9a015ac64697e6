//! Point-queue lane and crosswalk dynamics.
//!
//! Vehicles approach at the lane's speed limit and stop instantly at the back
//! of the queue. On green the queue discharges one vehicle per saturation
//! headway. Queued vehicles stay at zero speed until they cross, so a
//! vehicle is counted as stopping at most once per queue.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::intersection::Seconds;

/// Piecewise-constant arrival rate over episode time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    /// Sorted by `start_s`; the first segment should start at 0.
    pub segments: Vec<DemandSegment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandSegment {
    pub start_s: Seconds,
    pub per_hour: f64,
}

impl DemandProfile {
    pub fn constant(per_hour: f64) -> Self {
        DemandProfile { segments: vec![DemandSegment { start_s: 0, per_hour }] }
    }

    /// Base rate with a surge of `factor` over the middle third of the episode.
    pub fn with_mid_surge(per_hour: f64, factor: f64, episode_s: Seconds) -> Self {
        DemandProfile {
            segments: vec![
                DemandSegment { start_s: 0, per_hour },
                DemandSegment { start_s: episode_s / 3, per_hour: per_hour * factor },
                DemandSegment { start_s: 2 * episode_s / 3, per_hour },
            ],
        }
    }

    pub fn rate_at(&self, t: Seconds) -> f64 {
        self.segments.iter().take_while(|s| s.start_s <= t).last().map_or(0.0, |s| s.per_hour)
    }

    /// Probability of one arrival during the second starting at `t`.
    pub fn arrival_probability(&self, t: Seconds) -> f64 {
        (self.rate_at(t) / 3600.0).clamp(0.0, 1.0)
    }

    pub fn is_valid(&self) -> bool {
        self.segments.windows(2).all(|w| w[0].start_s < w[1].start_s)
            && self.segments.iter().all(|s| s.per_hour.is_finite() && s.per_hour >= 0.0 && s.per_hour <= 3600.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub spawn_time_s: f64,
    /// Distance to the stop line.
    pub position_m: f64,
    pub speed_mps: f64,
    pub stop_count: u32,
    /// Seconds spent standing.
    pub waiting_s: f64,
    queued: bool,
}

impl Vehicle {
    fn stop_at(&mut self, position_m: f64, stop_speed: f64) {
        if self.speed_mps >= stop_speed {
            self.stop_count += 1;
        }
        self.speed_mps = 0.0;
        self.position_m = position_m;
        self.queued = true;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneParams {
    pub length_m: f64,
    pub v_max_mps: f64,
    pub jam_spacing_m: f64,
    pub saturation_headway_s: f64,
    pub stop_speed_mps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub stops: u32,
    pub travel_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct LaneState {
    pub params: LaneParams,
    /// Front (closest to the stop line) first.
    vehicles: VecDeque<Vehicle>,
    discharge_credit: f64,
}

impl LaneState {
    pub fn new(params: LaneParams) -> Self {
        LaneState { params, vehicles: VecDeque::new(), discharge_credit: 0.0 }
    }

    pub fn vehicles(&self) -> impl Iterator<Item = &Vehicle> {
        self.vehicles.iter()
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    /// Advances the second `[t, t + 1)` under the given signal state and
    /// returns the vehicles that crossed the stop line.
    pub fn advance(&mut self, t: Seconds, green: bool) -> Vec<Crossing> {
        let p = self.params;
        if green {
            self.discharge_credit = (self.discharge_credit + 1.0 / p.saturation_headway_s).min(1.0);
        } else {
            self.discharge_credit = 0.0;
        }
        let t = t as f64;
        let mut crossed = Vec::new();
        let mut tail = 0.0;
        let mut ahead: Option<bool> = None; // Some(queued) of the vehicle in front
        let mut i = 0;
        while i < self.vehicles.len() {
            let front = ahead.is_none();
            let v = &mut self.vehicles[i];
            if v.queued {
                if front && green && self.discharge_credit >= 1.0 {
                    self.discharge_credit -= 1.0;
                    crossed.push(Crossing { stops: v.stop_count, travel_time_s: t + 1.0 - v.spawn_time_s });
                    self.vehicles.remove(i);
                    continue;
                }
                v.position_m = tail;
                v.waiting_s += 1.0;
            } else {
                let next = v.position_m - p.v_max_mps;
                if front && next <= 0.0 {
                    if green && self.discharge_credit >= 1.0 {
                        self.discharge_credit -= 1.0;
                        let at = t + v.position_m / p.v_max_mps;
                        crossed.push(Crossing { stops: v.stop_count, travel_time_s: at - v.spawn_time_s });
                        self.vehicles.remove(i);
                        continue;
                    }
                    v.stop_at(0.0, p.stop_speed_mps);
                } else if next < tail {
                    if ahead == Some(true) {
                        v.stop_at(tail, p.stop_speed_mps);
                    } else {
                        v.position_m = tail;
                    }
                } else {
                    v.position_m = next;
                }
            }
            tail = v.position_m + p.jam_spacing_m;
            ahead = Some(v.queued);
            i += 1;
        }
        crossed
    }

    /// Adds a vehicle at the upstream end of the lane at time `t`. If the
    /// queue already reaches past the lane entry the vehicle joins its back.
    pub fn spawn(&mut self, t: Seconds) {
        let p = self.params;
        let mut v = Vehicle {
            spawn_time_s: t as f64,
            position_m: p.length_m,
            speed_mps: p.v_max_mps,
            stop_count: 0,
            waiting_s: 0.0,
            queued: false,
        };
        if let Some(back) = self.vehicles.back() {
            let tail = back.position_m + p.jam_spacing_m;
            if tail > p.length_m {
                if back.queued {
                    v.stop_at(tail, p.stop_speed_mps);
                } else {
                    v.position_m = tail;
                }
            }
        }
        self.vehicles.push_back(v);
    }

    pub fn spawn_random<R: Rng>(&mut self, t: Seconds, probability: f64, rng: &mut R) -> bool {
        let arrive = rng.random::<f64>() < probability;
        if arrive {
            self.spawn(t);
        }
        arrive
    }

    pub fn stopped_count(&self) -> usize {
        self.vehicles.iter().filter(|v| v.speed_mps < self.params.stop_speed_mps).count()
    }

    pub fn queue_m(&self) -> f64 {
        self.stopped_count() as f64 * self.params.jam_spacing_m
    }

    pub fn max_wait_s(&self) -> f64 {
        self.vehicles.iter().map(|v| v.waiting_s).fold(0.0, f64::max)
    }

    /// Mean speed of vehicles present, 0 for an empty lane.
    pub fn mean_speed(&self) -> f64 {
        if self.vehicles.is_empty() {
            0.0
        } else {
            self.vehicles.iter().map(|v| v.speed_mps).sum::<f64>() / self.vehicles.len() as f64
        }
    }

    pub fn stops_total(&self) -> u32 {
        self.vehicles.iter().map(|v| v.stop_count).sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct CrosswalkState {
    /// Arrival time of the earliest pedestrian still waiting.
    pub waiting_since_s: Option<Seconds>,
}

impl CrosswalkState {
    /// Pedestrians arriving during a green cross at once; otherwise the
    /// first arrival starts the wait clock.
    pub fn advance<R: Rng>(&mut self, t: Seconds, green: bool, probability: f64, rng: &mut R) {
        let arrive = rng.random::<f64>() < probability;
        if green {
            self.waiting_since_s = None;
        } else if arrive && self.waiting_since_s.is_none() {
            self.waiting_since_s = Some(t);
        }
    }

    pub fn wait_s(&self, now: Seconds) -> f64 {
        self.waiting_since_s.map_or(0.0, |since| (now - since) as f64)
    }
}
