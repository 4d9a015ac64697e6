//! Traffic metrics, the reward and per-run aggregation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneMetrics {
    /// Length of standing vehicles (speed below the stop threshold), meters.
    pub queue_m: f64,
    /// Longest standing time of a vehicle present, seconds.
    pub wait_veh_s: f64,
    /// Mean speed of vehicles present, 0 when empty.
    pub speed_mps: f64,
    /// Vehicles present.
    pub wave: usize,
    /// Sum of stop counts of vehicles present.
    pub stops_total: u32,
    /// Mean stops of vehicles that crossed so far, `None` before the first crossing.
    pub stops: Option<f64>,
    /// Mean entry-to-stop-line time of vehicles that crossed so far.
    pub travel_time_s: Option<f64>,
}

/// Snapshot of the intersection after a simulated second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficMetrics {
    pub lanes: Vec<LaneMetrics>,
    /// Waiting time of the earliest waiting pedestrian per crosswalk.
    pub wait_ped_s: Vec<f64>,
    pub avg: MetricSummary,
}

/// The six reported metrics; for snapshots these are averages over lanes
/// (respectively crosswalks).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub queue_m: f64,
    pub wait_veh_s: f64,
    pub speed_mps: f64,
    pub wait_ped_s: f64,
    pub stops: f64,
    pub travel_time_s: f64,
}

impl MetricSummary {
    pub const NAMES: [&'static str; 6] = ["queue_m", "wait_veh_s", "speed_mps", "stops", "travel_time_s", "wait_ped_s"];

    /// Values in [`Self::NAMES`] order.
    pub fn values(&self) -> [f64; 6] {
        [self.queue_m, self.wait_veh_s, self.speed_mps, self.stops, self.travel_time_s, self.wait_ped_s]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        MetricSummary {
            queue_m: v[0],
            wait_veh_s: v[1],
            speed_mps: v[2],
            stops: v[3],
            travel_time_s: v[4],
            wait_ped_s: v[5],
        }
    }

    pub fn mean_of(items: &[MetricSummary]) -> MetricSummary {
        let mut acc = [0.0; 6];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let n = items.len().max(1) as f64;
        MetricSummary::from_values(acc.map(|a| a / n))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl TrafficMetrics {
    pub fn new(lanes: Vec<LaneMetrics>, wait_ped_s: Vec<f64>) -> Self {
        let avg = MetricSummary {
            queue_m: mean(lanes.iter().map(|l| l.queue_m)),
            wait_veh_s: mean(lanes.iter().map(|l| l.wait_veh_s)),
            // empty lanes have no speed to average
            speed_mps: mean(lanes.iter().filter(|l| l.wave > 0).map(|l| l.speed_mps)),
            wait_ped_s: mean(wait_ped_s.iter().copied()),
            stops: mean(lanes.iter().filter_map(|l| l.stops)),
            travel_time_s: mean(lanes.iter().filter_map(|l| l.travel_time_s)),
        };
        TrafficMetrics { lanes, wait_ped_s, avg }
    }
}

/// Reward coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub queue: f64,
    pub wait_veh: f64,
    pub wait_ped: f64,
    pub stops: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { queue: 0.8, wait_veh: 0.8, wait_ped: 0.2, stops: 1.9 }
    }
}

/// Negative weighted sum of queue, vehicle wait and stops over lanes plus
/// pedestrian wait over crosswalks.
pub fn compute_reward(weights: &RewardWeights, metrics: &TrafficMetrics) -> f64 {
    let lanes: f64 = metrics
        .lanes
        .iter()
        .map(|l| weights.queue * l.queue_m + weights.wait_veh * l.wait_veh_s + weights.stops * l.stops_total as f64)
        .sum();
    let peds: f64 = metrics.wait_ped_s.iter().map(|w| weights.wait_ped * w).sum();
    -(lanes + peds)
}

/// Accumulates snapshots over a run into time-averaged metrics.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    steps: usize,
    queue: f64,
    wait_veh: f64,
    wait_ped: f64,
    speed_sum: f64,
    speed_n: usize,
    last: Option<MetricSummary>,
    cumulative_reward: f64,
}

impl MetricsAccumulator {
    pub fn push(&mut self, m: &TrafficMetrics, reward: f64) {
        self.steps += 1;
        self.queue += m.avg.queue_m;
        self.wait_veh += m.avg.wait_veh_s;
        self.wait_ped += m.avg.wait_ped_s;
        if m.lanes.iter().any(|l| l.wave > 0) {
            self.speed_sum += m.avg.speed_mps;
            self.speed_n += 1;
        }
        self.last = Some(m.avg);
        self.cumulative_reward += reward;
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.cumulative_reward
    }

    /// Time-averaged queue, waits and speed; stops and travel time of all
    /// vehicles that crossed during the run.
    pub fn summary(&self) -> MetricSummary {
        let n = self.steps.max(1) as f64;
        let last = self.last.unwrap_or_default();
        MetricSummary {
            queue_m: self.queue / n,
            wait_veh_s: self.wait_veh / n,
            speed_mps: if self.speed_n == 0 { 0.0 } else { self.speed_sum / self.speed_n as f64 },
            wait_ped_s: self.wait_ped / n,
            stops: last.stops,
            travel_time_s: last.travel_time_s,
        }
    }
}
