//! Discrete-time single-intersection simulator exposing the control MDP.
//!
//! Every [`TrafficSim::step`] advances one second. The action is the phase
//! the controller wants; choosing a phase other than the current one starts
//! a transition (yellow, red, intergreen clearance) during which the action
//! mask is latched to the target phase. Phase time accrues only while the
//! phase is fully active.

mod metrics;
mod traffic;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{compute_reward, LaneMetrics, MetricSummary, MetricsAccumulator, RewardWeights, TrafficMetrics};
pub use traffic::{CrosswalkState, Crossing, DemandProfile, DemandSegment, LaneParams, LaneState, Vehicle};

use crate::intersection::{GroupKind, IntersectionModel, ModelError, PhaseId, Seconds, SignalColor, TransitionSpec};
use crate::phase_graph::{GraphError, PhaseGraph, PhaseHistory, PhaseMask};
use crate::psych::{combine_masks, psych_mask, RuleSet};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("action {action} violates the safety mask {mask}")]
    IllegalAction { action: PhaseId, mask: PhaseMask },
    #[error("episode is over; call reset")]
    EpisodeDone,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneConfig {
    pub label: String,
    pub signal_group: usize,
    pub length_m: f64,
    pub v_max_mps: f64,
    pub demand: DemandProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosswalkConfig {
    pub label: String,
    pub signal_group: usize,
    pub demand: DemandProfile,
}

/// Observation scaling constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub queue_m: f64,
    pub wait_s: f64,
    pub wave: f64,
}

impl Default for Normalizers {
    fn default() -> Self {
        Normalizers { queue_m: 200.0, wait_s: 120.0, wave: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub episode_seconds: Seconds,
    pub lanes: Vec<LaneConfig>,
    pub crosswalks: Vec<CrosswalkConfig>,
    #[serde(default = "default_jam_spacing")]
    pub jam_spacing_m: f64,
    #[serde(default = "default_headway")]
    pub saturation_headway_s: f64,
    #[serde(default = "default_stop_speed")]
    pub stop_speed_mps: f64,
    #[serde(default)]
    pub reward: RewardWeights,
    #[serde(default)]
    pub normalizers: Normalizers,
}

fn default_jam_spacing() -> f64 {
    7.5
}
fn default_headway() -> f64 {
    2.0
}
fn default_stop_speed() -> f64 {
    0.1
}

pub const DEFAULT_EPISODE_SECONDS: Seconds = 3600;

impl SimConfig {
    /// Synthetic afternoon peak for the OWL322 preset: 400 veh/h from west
    /// and east, 150 veh/h from north and south, 60 ped/h per crosswalk,
    /// all 1.25x during the middle third of the episode.
    pub fn rush_hour(episode_seconds: Seconds) -> Self {
        let lane = |label: &str, group, rate| LaneConfig {
            label: label.into(),
            signal_group: group,
            length_m: 250.0,
            v_max_mps: 13.89,
            demand: DemandProfile::with_mid_surge(rate, 1.25, episode_seconds),
        };
        let crosswalk = |label: &str, group| CrosswalkConfig {
            label: label.into(),
            signal_group: group,
            demand: DemandProfile::with_mid_surge(60.0, 1.25, episode_seconds),
        };
        SimConfig {
            episode_seconds,
            lanes: vec![lane("west", 0, 400.0), lane("east", 1, 400.0), lane("north", 2, 150.0), lane("south", 3, 150.0)],
            crosswalks: vec![crosswalk("ped w&e", 4), crosswalk("ped n&s", 5)],
            jam_spacing_m: default_jam_spacing(),
            saturation_headway_s: default_headway(),
            stop_speed_mps: default_stop_speed(),
            reward: RewardWeights::default(),
            normalizers: Normalizers::default(),
        }
    }

    pub fn with_episode_seconds(mut self, episode_seconds: Seconds) -> Self {
        let old = self.episode_seconds;
        self.episode_seconds = episode_seconds;
        if old > 0 {
            let rescale = |d: &mut DemandProfile| {
                for s in &mut d.segments {
                    s.start_s = (s.start_s as u64 * episode_seconds as u64 / old as u64) as Seconds;
                }
            };
            self.lanes.iter_mut().for_each(|l| rescale(&mut l.demand));
            self.crosswalks.iter_mut().for_each(|c| rescale(&mut c.demand));
        }
        self
    }

    /// Same layout with every arrival rate set to zero.
    pub fn without_demand(mut self) -> Self {
        for l in &mut self.lanes {
            l.demand = DemandProfile::constant(0.0);
        }
        for c in &mut self.crosswalks {
            c.demand = DemandProfile::constant(0.0);
        }
        self
    }

    pub fn observation_len(&self, num_phases: usize) -> usize {
        4 * self.lanes.len() + self.crosswalks.len() + num_phases + 1
    }

    fn validate(&self, model: &IntersectionModel) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.episode_seconds == 0 {
            return bad("episode must last at least one second".into());
        }
        let groups = model.groups();
        for l in &self.lanes {
            match groups.get(l.signal_group) {
                Some(g) if g.kind == GroupKind::Vehicle => {}
                _ => return bad(format!("lane {:?} is not controlled by a vehicle signal group", l.label)),
            }
            if !(l.length_m > 0.0 && l.v_max_mps > 0.0) || !l.demand.is_valid() {
                return bad(format!("lane {:?} has invalid geometry or demand", l.label));
            }
        }
        for c in &self.crosswalks {
            match groups.get(c.signal_group) {
                Some(g) if g.kind == GroupKind::Pedestrian => {}
                _ => return bad(format!("crosswalk {:?} is not controlled by a pedestrian signal group", c.label)),
            }
            if !c.demand.is_valid() {
                return bad(format!("crosswalk {:?} has invalid demand", c.label));
            }
        }
        if !(self.jam_spacing_m > 0.0 && self.saturation_headway_s >= 1.0 && self.stop_speed_mps > 0.0) {
            return bad("jam spacing, headway (>= 1 s) and stop speed must be positive".into());
        }
        Ok(())
    }
}

/// Flat state vector: per lane (queue, wait, speed, wave), per crosswalk
/// wait, one-hot current phase, elapsed share of the phase's maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Simulation time after the step.
    pub time_s: Seconds,
    pub current_phase: PhaseId,
    pub phase_duration_s: Seconds,
    /// Graph mask for the next action (latched to the target mid-transition).
    pub safety_mask: PhaseMask,
    /// Safety mask combined with comfort rules, if enabled.
    pub combined_mask: PhaseMask,
    pub comfort_overridden: bool,
    pub in_transition: bool,
    /// Colors shown during the second just simulated.
    pub colors: Vec<SignalColor>,
    pub metrics: TrafficMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone)]
struct ActiveTransition {
    spec: TransitionSpec,
    start_colors: Vec<SignalColor>,
    elapsed: Seconds,
}

/// Violations of the signal-level safety properties seen while rendering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SafetyMonitor {
    pub conflicts: usize,
    pub intergreen: usize,
    pub dwell: usize,
    pub messages: Vec<String>,
}

impl SafetyMonitor {
    pub fn total(&self) -> usize {
        self.conflicts + self.intergreen + self.dwell
    }

    fn note(&mut self, msg: String) {
        if self.messages.len() < 32 {
            self.messages.push(msg);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VehicleCounts {
    pub spawned: u64,
    pub crossed: u64,
    pub present: u64,
}

#[derive(Debug, Clone)]
pub struct TrafficSim {
    model: Arc<IntersectionModel>,
    graph: Arc<PhaseGraph>,
    rules: Option<Arc<RuleSet>>,
    cfg: Arc<SimConfig>,
    rng: ChaCha8Rng,
    time_s: Seconds,
    history: PhaseHistory,
    colors: Vec<SignalColor>,
    /// Second at which each group last turned red; `None` if red since reset.
    red_since: Vec<Option<Seconds>>,
    transition: Option<ActiveTransition>,
    lanes: Vec<LaneState>,
    crosswalks: Vec<CrosswalkState>,
    crossed_stats: Vec<(u64, f64, f64)>,
    safety_mask: PhaseMask,
    combined_mask: PhaseMask,
    comfort_overridden: bool,
    spawned: u64,
    crossed: u64,
    done: bool,
    monitor: SafetyMonitor,
}

pub const INITIAL_PHASE: PhaseId = PhaseId(1);

impl TrafficSim {
    pub fn new(
        model: Arc<IntersectionModel>,
        graph: Arc<PhaseGraph>,
        rules: Option<Arc<RuleSet>>,
        cfg: Arc<SimConfig>,
    ) -> Result<Self, SimError> {
        cfg.validate(&model)?;
        if graph.num_phases() != model.num_phases() {
            return Err(SimError::Config("phase graph and intersection disagree on phase count".into()));
        }
        if !model.phase(INITIAL_PHASE)?.colors.iter().all(|c| c.is_red()) {
            return Err(SimError::Config("phase 1 must be all-red".into()));
        }
        let n = model.num_phases();
        let mut sim = TrafficSim {
            rng: ChaCha8Rng::seed_from_u64(0),
            time_s: 0,
            history: PhaseHistory::new(INITIAL_PHASE),
            colors: model.all_red(),
            red_since: vec![None; model.groups().len()],
            transition: None,
            lanes: Vec::new(),
            crosswalks: Vec::new(),
            crossed_stats: Vec::new(),
            safety_mask: PhaseMask::single(n, INITIAL_PHASE),
            combined_mask: PhaseMask::single(n, INITIAL_PHASE),
            comfort_overridden: false,
            spawned: 0,
            crossed: 0,
            done: true,
            monitor: SafetyMonitor::default(),
            model,
            graph,
            rules,
            cfg,
        };
        sim.reset(0)?;
        Ok(sim)
    }

    /// Empties the network, returns to all-red phase 1 and reseeds the RNG.
    pub fn reset(&mut self, seed: u64) -> Result<Observation, SimError> {
        let c = &self.cfg;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.time_s = 0;
        self.history = PhaseHistory::new(INITIAL_PHASE);
        self.colors = self.model.all_red();
        self.red_since = vec![None; self.colors.len()];
        self.transition = None;
        self.lanes = c
            .lanes
            .iter()
            .map(|l| {
                LaneState::new(LaneParams {
                    length_m: l.length_m,
                    v_max_mps: l.v_max_mps,
                    jam_spacing_m: c.jam_spacing_m,
                    saturation_headway_s: c.saturation_headway_s,
                    stop_speed_mps: c.stop_speed_mps,
                })
            })
            .collect();
        self.crosswalks = vec![CrosswalkState::default(); c.crosswalks.len()];
        self.crossed_stats = vec![(0, 0.0, 0.0); c.lanes.len()];
        self.spawned = 0;
        self.crossed = 0;
        self.done = false;
        self.monitor = SafetyMonitor::default();
        self.update_masks()?;
        Ok(self.observe())
    }

    pub fn model(&self) -> &IntersectionModel {
        &self.model
    }

    pub fn graph(&self) -> &PhaseGraph {
        &self.graph
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn history(&self) -> &PhaseHistory {
        &self.history
    }

    pub fn time_s(&self) -> Seconds {
        self.time_s
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn in_transition(&self) -> bool {
        self.transition.is_some()
    }

    pub fn colors(&self) -> &[SignalColor] {
        &self.colors
    }

    pub fn num_phases(&self) -> usize {
        self.model.num_phases()
    }

    pub fn observation_len(&self) -> usize {
        self.cfg.observation_len(self.num_phases())
    }

    pub fn safety_mask(&self) -> PhaseMask {
        self.safety_mask
    }

    /// Mask the agent should sample from.
    pub fn action_mask(&self) -> PhaseMask {
        self.combined_mask
    }

    pub fn monitor(&self) -> &SafetyMonitor {
        &self.monitor
    }

    pub fn lanes(&self) -> &[LaneState] {
        &self.lanes
    }

    pub fn counts(&self) -> VehicleCounts {
        VehicleCounts {
            spawned: self.spawned,
            crossed: self.crossed,
            present: self.lanes.iter().map(|l| l.len() as u64).sum(),
        }
    }

    pub fn step(&mut self, action: PhaseId) -> Result<StepResult, SimError> {
        if self.done {
            return Err(SimError::EpisodeDone);
        }
        if !self.safety_mask.get(action) {
            return Err(SimError::IllegalAction { action, mask: self.safety_mask });
        }
        let t = self.time_s;

        if self.transition.is_none() && action != self.history.current() {
            let red_for: Vec<Option<Seconds>> = self
                .colors
                .iter()
                .zip(&self.red_since)
                .map(|(c, since)| if c.is_red() { since.map(|s| t - s) } else { None })
                .collect();
            let from = self.history.current();
            let spec = self.model.build_transition_with_pending(from, action, self.model.yellow_s(), &red_for)?;
            let held = self.history.current_duration();
            if held < self.model.min_duration(from) || held > self.model.max_duration(from) {
                self.monitor.dwell += 1;
                self.monitor.note(format!("t={t}: phase {from} left after {held} s"));
            }
            self.graph.advance(&mut self.history, action, 0)?;
            self.transition = Some(ActiveTransition { spec, start_colors: self.colors.clone(), elapsed: 0 });
        }

        let (colors, active) = match self.transition.as_mut() {
            Some(tr) if tr.elapsed < tr.spec.total_duration_s => {
                let colors = tr.spec.colors_at(&tr.start_colors, tr.elapsed);
                tr.elapsed += 1;
                (colors, false)
            }
            _ => {
                self.transition = None;
                (self.model.phase(self.history.current())?.colors.clone(), true)
            }
        };
        self.render(t, colors);
        if active {
            let cur = self.history.current();
            self.graph.advance(&mut self.history, cur, 1)?;
            if self.history.current_duration() > self.model.max_duration(cur) {
                self.monitor.dwell += 1;
                self.monitor.note(format!("t={t}: phase {cur} exceeded its maximum"));
            }
        }

        for (i, lane) in self.lanes.iter_mut().enumerate() {
            let green = self.colors[self.cfg.lanes[i].signal_group].is_green();
            for c in lane.advance(t, green) {
                self.crossed += 1;
                let s = &mut self.crossed_stats[i];
                s.0 += 1;
                s.1 += c.stops as f64;
                s.2 += c.travel_time_s;
            }
        }
        for (i, cw) in self.crosswalks.iter_mut().enumerate() {
            let c = &self.cfg.crosswalks[i];
            cw.advance(t, self.colors[c.signal_group].is_green(), c.demand.arrival_probability(t), &mut self.rng);
        }

        self.time_s = t + 1;
        let now = self.time_s;
        for (i, lane) in self.lanes.iter_mut().enumerate() {
            let p = self.cfg.lanes[i].demand.arrival_probability(now);
            if lane.spawn_random(now, p, &mut self.rng) {
                self.spawned += 1;
            }
        }

        let metrics = self.compute_metrics();
        let reward = compute_reward(&self.cfg.reward, &metrics);
        self.done = now >= self.cfg.episode_seconds;
        self.update_masks()?;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.done,
            info: StepInfo {
                time_s: now,
                current_phase: self.history.current(),
                phase_duration_s: self.history.current_duration(),
                safety_mask: self.safety_mask,
                combined_mask: self.combined_mask,
                comfort_overridden: self.comfort_overridden,
                in_transition: self.transition.is_some(),
                colors: self.colors.clone(),
                metrics,
            },
        })
    }

    /// Shows `colors` during second `t`, checking conflicts and intergreens.
    fn render(&mut self, t: Seconds, colors: Vec<SignalColor>) {
        let conflicts = self.model.conflicts();
        let n = colors.len();
        for g in 0..n {
            let (before, after) = (self.colors[g], colors[g]);
            if before.is_red() && !after.is_red() {
                for c in (0..n).filter(|&c| conflicts.get(c, g)) {
                    let ig = self.model.intergreen().get(c, g).unwrap_or(0);
                    if let Some(since) = self.red_since[c] {
                        if colors[c].is_red() && t - since < ig {
                            self.monitor.intergreen += 1;
                            self.monitor.note(format!("t={t}: group {g} entered {} s after {c} cleared", t - since));
                        }
                    }
                }
            }
        }
        for g in 0..n {
            if !self.colors[g].is_red() && colors[g].is_red() {
                self.red_since[g] = Some(t);
            }
        }
        for (a, b) in conflicts.pairs() {
            if !colors[a].is_red() && !colors[b].is_red() {
                self.monitor.conflicts += 1;
                self.monitor.note(format!("t={t}: conflicting groups {a} and {b} both non-red"));
            }
        }
        self.colors = colors;
    }

    fn update_masks(&mut self) -> Result<(), SimError> {
        let n = self.num_phases();
        if let Some(tr) = &self.transition {
            self.safety_mask = PhaseMask::single(n, tr.spec.to);
            self.combined_mask = self.safety_mask;
            self.comfort_overridden = false;
            return Ok(());
        }
        self.safety_mask = self.graph.mask(&self.history)?;
        match &self.rules {
            Some(rules) => {
                let comfort = psych_mask(rules, &self.history, n);
                let c = combine_masks(&self.safety_mask, &comfort).expect("masks share the phase count");
                self.combined_mask = c.mask;
                self.comfort_overridden = c.comfort_overridden;
            }
            None => {
                self.combined_mask = self.safety_mask;
                self.comfort_overridden = false;
            }
        }
        Ok(())
    }

    pub fn compute_metrics(&self) -> TrafficMetrics {
        let lanes = self
            .lanes
            .iter()
            .zip(&self.crossed_stats)
            .map(|(l, &(n, stops, travel))| LaneMetrics {
                queue_m: l.queue_m(),
                wait_veh_s: l.max_wait_s(),
                speed_mps: l.mean_speed(),
                wave: l.len(),
                stops_total: l.stops_total(),
                stops: (n > 0).then(|| stops / n as f64),
                travel_time_s: (n > 0).then(|| travel / n as f64),
            })
            .collect();
        let peds = self.crosswalks.iter().map(|c| c.wait_s(self.time_s)).collect();
        TrafficMetrics::new(lanes, peds)
    }

    pub fn observe(&self) -> Observation {
        let norm = &self.cfg.normalizers;
        let mut v = Vec::with_capacity(self.observation_len());
        for (lane, cfg) in self.lanes.iter().zip(&self.cfg.lanes) {
            v.push(lane.queue_m() / norm.queue_m);
            v.push(lane.max_wait_s() / norm.wait_s);
            v.push(lane.mean_speed() / cfg.v_max_mps);
            v.push(lane.len() as f64 / norm.wave);
        }
        for cw in &self.crosswalks {
            v.push(cw.wait_s(self.time_s) / norm.wait_s);
        }
        let cur = self.history.current();
        v.extend((0..self.num_phases()).map(|i| if i == cur.index() { 1.0 } else { 0.0 }));
        v.push(self.history.current_duration() as f64 / self.model.max_duration(cur) as f64);
        Observation(v)
    }
}
