//! Experiment harness: controllers (a), (b), (c) and a fixed-time plan,
//! multi-seed training, evaluation runs, learning curves and metric tables.

mod controller;
mod report;

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use controller::{project, safety_layer, ControllerKind, CyclePlan, FixedTimeController, PlanStep};
pub use report::{best_three, EvalReport, MetricRow, RunResult, TrialResult};

use crate::intersection::{IntersectionConfig, IntersectionModel, ModelError, PhaseId, Seconds};
use crate::microsim::{MetricsAccumulator, SimConfig, SimError, StepResult, TrafficSim};
use crate::phase_graph::{GraphError, PhaseGraph, PhaseMask};
use crate::ppo::{self, Checkpoint, Env, EnvStep, PolicyParams, PpoError, TrainConfig, Trainer};
use crate::psych::{count_bounce_backs, PsychError, RuleSet};
use crate::{intersection, preset};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid cycle plan: {0}")]
    InvalidCyclePlan(String),
    #[error("safety violation: {0}")]
    SafetyViolation(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Psych(#[from] PsychError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Errors that mean a run broke a safety invariant.
    pub fn is_safety_violation(&self) -> bool {
        match self {
            HarnessError::SafetyViolation(_) | HarnessError::Sim(SimError::IllegalAction { .. }) => true,
            HarnessError::Ppo(PpoError::Env(e)) => {
                matches!(e.downcast_ref::<SimError>(), Some(SimError::IllegalAction { .. }))
            }
            _ => false,
        }
    }
}

/// Intersection, phase graph and comfort rules shared by every run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: Arc<IntersectionModel>,
    pub graph: Arc<PhaseGraph>,
    pub rules: Arc<RuleSet>,
}

impl Scenario {
    pub fn owl322() -> Self {
        Scenario {
            model: Arc::new(preset::owl322_model()),
            graph: Arc::new(preset::owl322_graph()),
            rules: Arc::new(preset::owl322_rules()),
        }
    }

    pub fn from_config(cfg: &IntersectionConfig) -> Result<Self, HarnessError> {
        let model = intersection::model_from_config(cfg)?;
        let graph = PhaseGraph::new(&model, &cfg.edges)?;
        let rules = RuleSet::new(cfg.psych_rules.clone())?;
        Ok(Scenario { model: Arc::new(model), graph: Arc::new(graph), rules: Arc::new(rules) })
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        Self::from_config(&IntersectionConfig::parse(text)?)
    }

    pub fn sim(&self, cfg: Arc<SimConfig>, psych_rules: bool) -> Result<TrafficSim, HarnessError> {
        let rules = psych_rules.then(|| self.rules.clone());
        Ok(TrafficSim::new(self.model.clone(), self.graph.clone(), rules, cfg)?)
    }
}

/// The simulator as seen by one controller kind. Under (a) every action is
/// offered and wishes are projected onto the graph mask; otherwise the
/// policy sees the simulator's action mask.
#[derive(Debug, Clone)]
pub struct SignalEnv {
    pub sim: TrafficSim,
    pub kind: ControllerKind,
    pub projections: usize,
    pub comfort_overrides: usize,
}

impl SignalEnv {
    pub fn new(sim: TrafficSim, kind: ControllerKind) -> Self {
        SignalEnv { sim, kind, projections: 0, comfort_overrides: 0 }
    }

    /// Phase actually sent to the simulator for a policy action.
    pub fn executed(&self, action: usize) -> PhaseId {
        let wish = PhaseId::from_index(action);
        match self.kind {
            ControllerKind::SafetyLayer => project(wish, self.sim.history().current(), &self.sim.safety_mask()),
            _ => wish,
        }
    }

    pub fn step_phase(&mut self, action: usize) -> Result<StepResult, SimError> {
        let phase = self.executed(action);
        if phase.index() != action {
            self.projections += 1;
        }
        let r = self.sim.step(phase)?;
        if r.info.comfort_overridden {
            self.comfort_overrides += 1;
        }
        Ok(r)
    }
}

impl Env for SignalEnv {
    type Error = SimError;

    fn observation_len(&self) -> usize {
        self.sim.observation_len()
    }

    fn num_actions(&self) -> usize {
        self.sim.num_phases()
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, SimError> {
        Ok(self.sim.reset(seed)?.0)
    }

    fn action_mask(&self) -> PhaseMask {
        match self.kind {
            ControllerKind::SafetyLayer => PhaseMask::full(self.sim.num_phases()),
            _ => self.sim.action_mask(),
        }
    }

    fn step(&mut self, action: usize) -> Result<EnvStep, SimError> {
        let r = self.step_phase(action)?;
        Ok(EnvStep { observation: r.observation.0, reward: r.reward, terminated: false, truncated: r.done })
    }
}

/// Everything fixed for one training or evaluation campaign.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub scenario: Scenario,
    pub sim: Arc<SimConfig>,
    pub kind: ControllerKind,
    pub psych_rules: bool,
}

impl Experiment {
    pub fn new(scenario: Scenario, sim: SimConfig, kind: ControllerKind) -> Self {
        Experiment { scenario, sim: Arc::new(sim), psych_rules: kind.default_psych_rules(), kind }
    }

    pub fn env(&self) -> Result<SignalEnv, HarnessError> {
        Ok(SignalEnv::new(self.scenario.sim(self.sim.clone(), self.psych_rules)?, self.kind))
    }
}

/// One row of a learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: usize,
    pub episodes: usize,
    pub mean_episodic_reward: f64,
    pub ema: f64,
}

pub const CURVE_EMA: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub seed: u64,
    pub curve: Vec<CurvePoint>,
    pub params: PolicyParams,
    pub env_steps: usize,
}

/// Trains one agent. `on_point` sees every curve row as it is produced.
pub fn train(
    exp: &Experiment,
    cfg: &TrainConfig,
    seed: u64,
    mut on_point: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome, HarnessError> {
    if !exp.kind.is_learning() {
        return Err(HarnessError::Config("the fixed-time controller is not trained".into()));
    }
    let envs = (0..cfg.num_workers).map(|_| exp.env()).collect::<Result<Vec<_>, _>>()?;
    let mut trainer = Trainer::new(cfg.clone(), envs, seed)?;
    let mut curve: Vec<CurvePoint> = Vec::new();
    trainer.train(|stats| {
        if let Some(mean) = stats.mean_episodic_reward() {
            let ema = curve.last().map_or(mean, |p| CURVE_EMA * p.ema + (1.0 - CURVE_EMA) * mean);
            let point = CurvePoint { env_steps: stats.env_steps, episodes: stats.episodes, mean_episodic_reward: mean, ema };
            on_point(&point);
            curve.push(point);
        }
    })?;
    let violations: usize = trainer.workers().iter().map(|w| w.env().sim.monitor().total()).sum();
    if violations > 0 {
        let msg = trainer.workers().iter().flat_map(|w| w.env().sim.monitor().messages.clone()).next();
        return Err(HarnessError::SafetyViolation(format!("{violations} during training, first: {}", msg.unwrap_or_default())));
    }
    Ok(TrainOutcome { seed, curve, env_steps: trainer.env_steps(), params: trainer.params })
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Metadata stored in agent checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMeta {
    pub controller: ControllerKind,
    pub psych_rules: bool,
    pub seed: u64,
    pub episode_seconds: Seconds,
}

pub fn agent_checkpoint(exp: &Experiment, outcome: &TrainOutcome) -> Checkpoint {
    let meta = AgentMeta {
        controller: exp.kind,
        psych_rules: exp.psych_rules,
        seed: outcome.seed,
        episode_seconds: exp.sim.episode_seconds,
    };
    Checkpoint::new(outcome.params.clone(), serde_json::to_value(meta).expect("metadata serializes"))
}

pub fn agent_meta(ck: &Checkpoint) -> Result<AgentMeta, HarnessError> {
    serde_json::from_value(ck.meta.clone())
        .map_err(|e| HarnessError::Ppo(PpoError::Checkpoint(format!("missing agent metadata: {e}"))))
}

/// Decision rule used during evaluation.
#[derive(Debug, Clone)]
pub enum Policy {
    /// Greedy (argmax) over the masked distribution.
    Greedy(PolicyParams),
    Fixed(CyclePlan),
}

/// Runs one episode per seed and collects metrics; writes a trace per run
/// into `trace_dir` when given, named `trace_<label>_r<run>.csv`.
pub fn evaluate(
    exp: &Experiment,
    policy: &Policy,
    trial: usize,
    seeds: &[u64],
    trace_dir: Option<&Path>,
) -> Result<TrialResult, HarnessError> {
    let mut env = exp.env()?;
    let mut fixed = match policy {
        Policy::Fixed(plan) => {
            Some(FixedTimeController::new(plan.clone(), &exp.scenario.graph, crate::microsim::INITIAL_PHASE)?)
        }
        Policy::Greedy(p) => {
            if p.input_len() != env.observation_len() || p.num_actions() != env.num_actions() {
                return Err(PpoError::Shape("checkpoint does not fit this intersection".into()).into());
            }
            None
        }
    };
    let mut runs = Vec::with_capacity(seeds.len());
    for (run, &seed) in seeds.iter().enumerate() {
        let mut obs = env.sim.reset(seed)?.0;
        env.projections = 0;
        env.comfort_overrides = 0;
        if let Some(f) = fixed.as_mut() {
            f.reset();
        }
        let mut acc = MetricsAccumulator::default();
        let mut trajectory: Vec<(PhaseId, Seconds)> = Vec::new();
        let mut trace = match trace_dir {
            Some(dir) => Some(TraceWriter::new(&dir.join(format!("trace_{}_t{trial}_r{run}.csv", exp.kind)), &env.sim)?),
            None => None,
        };
        while !env.sim.is_done() {
            let mask = env.action_mask();
            let action = match (policy, fixed.as_mut()) {
                (_, Some(f)) => {
                    let h = env.sim.history();
                    f.act(h.current(), h.current_duration(), &mask)?.index()
                }
                (Policy::Greedy(p), None) => ppo::forward(p, &obs, &mask)?.0.argmax(),
                (Policy::Fixed(_), None) => unreachable!("fixed policies carry a controller"),
            };
            let r = env.step_phase(action)?;
            acc.push(&r.info.metrics, r.reward);
            match trajectory.last_mut() {
                Some(last) if last.0 == r.info.current_phase => last.1 = r.info.phase_duration_s,
                _ => trajectory.push((r.info.current_phase, r.info.phase_duration_s)),
            }
            if let Some(t) = trace.as_mut() {
                t.write(&r)?;
            }
            obs = r.observation.0;
        }
        if let Some(t) = trace.as_mut() {
            t.flush()?;
        }
        let monitor = env.sim.monitor();
        if monitor.total() > 0 {
            return Err(HarnessError::SafetyViolation(format!(
                "{} in evaluation run {run}, first: {}",
                monitor.total(),
                monitor.messages.first().cloned().unwrap_or_default()
            )));
        }
        let (via, window) = bounce_rule(&exp.scenario.rules);
        runs.push(RunResult {
            seed,
            row: MetricRow { metrics: acc.summary(), cumulative_reward: acc.cumulative_reward() },
            bounce_backs: count_bounce_backs(&trajectory, via, window),
            comfort_overrides: env.comfort_overrides,
            projections: env.projections,
            safety_violations: monitor.total(),
        });
    }
    Ok(TrialResult { trial, runs })
}

/// Via phase and window of the first bounce-back rule, else phase 1 / 30 s.
pub fn bounce_rule(rules: &RuleSet) -> (PhaseId, Seconds) {
    rules
        .rules()
        .iter()
        .find_map(|r| match r.kind {
            crate::psych::RuleKind::ForbidBounceBack { via_phase, window_s } => Some((via_phase, window_s)),
            _ => None,
        })
        .unwrap_or((PhaseId(1), 30))
}

/// Per-step CSV trace: time, phase, colors per group, reward, lane metrics.
struct TraceWriter {
    w: csv::Writer<std::fs::File>,
}

impl TraceWriter {
    fn new(path: &Path, sim: &TrafficSim) -> Result<Self, HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string(), "phase".into(), "phase_s".into(), "in_transition".into()];
        header.extend(sim.model().groups().iter().map(|g| format!("sg{}", g.id)));
        header.push("reward".into());
        for l in &sim.config().lanes {
            for m in ["queue_m", "wait_veh_s", "speed_mps", "wave"] {
                header.push(format!("{}_{m}", l.label));
            }
        }
        for c in &sim.config().crosswalks {
            header.push(format!("{}_wait_ped_s", c.label.replace(' ', "_")));
        }
        w.write_record(&header)?;
        Ok(TraceWriter { w })
    }

    fn write(&mut self, r: &StepResult) -> Result<(), HarnessError> {
        let i = &r.info;
        let mut rec = vec![
            i.time_s.to_string(),
            i.current_phase.to_string(),
            i.phase_duration_s.to_string(),
            (i.in_transition as u8).to_string(),
        ];
        rec.extend(i.colors.iter().map(|c| c.short().to_string()));
        rec.push(r.reward.to_string());
        for l in &i.metrics.lanes {
            rec.extend([l.queue_m.to_string(), l.wait_veh_s.to_string(), l.speed_mps.to_string(), l.wave.to_string()]);
        }
        rec.extend(i.metrics.wait_ped_s.iter().map(|w| w.to_string()));
        self.w.write_record(&rec)?;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), HarnessError> {
        self.w.flush()?;
        Ok(())
    }
}

/// Default evaluation seeds: `count` values drawn from a fixed stream so
/// every controller sees the same traffic.
pub fn eval_seeds(count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE7A1);
    (0..count).map(|_| rng.random_range(0..1_000_000)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(kind: ControllerKind, seconds: Seconds) -> Experiment {
        Experiment::new(Scenario::owl322(), SimConfig::rush_hour(seconds), kind)
    }

    #[test]
    fn safety_layer_env_offers_everything_and_projects() {
        let mut env = exp(ControllerKind::SafetyLayer, 200).env().unwrap();
        env.reset(1).unwrap();
        assert_eq!(env.action_mask(), PhaseMask::full(8));
        // phase 7 from all-red at d=0 is not allowed yet: stay in 1
        assert_eq!(env.executed(6), PhaseId(1));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a = rng.random_range(0..8);
            let phase = env.executed(a);
            assert!(env.sim.safety_mask().get(phase));
            env.step(a).unwrap();
        }
        assert!(env.projections > 0);
        assert_eq!(env.sim.monitor().total(), 0);
    }

    #[test]
    fn masked_envs_use_sim_masks() {
        let mut b = exp(ControllerKind::MaskSafety, 100).env().unwrap();
        let mut c = exp(ControllerKind::MaskSafetyPsych, 100).env().unwrap();
        b.reset(0).unwrap();
        c.reset(0).unwrap();
        assert_eq!(b.action_mask(), b.sim.safety_mask());
        assert_eq!(c.action_mask(), c.sim.action_mask());
        assert!(c.sim.history().current() == PhaseId(1));
    }

    #[test]
    fn fixed_time_on_zero_demand() {
        let e = Experiment::new(Scenario::owl322(), SimConfig::rush_hour(600).without_demand(), ControllerKind::FixedTime);
        let t = evaluate(&e, &Policy::Fixed(CyclePlan::owl322_default()), 1, &[1, 2], None).unwrap();
        for r in &t.runs {
            assert_eq!(r.row.cumulative_reward, 0.0);
            assert_eq!(r.row.metrics.wait_veh_s, 0.0);
            assert_eq!(r.row.metrics.wait_ped_s, 0.0);
        }
    }

    #[test]
    fn fixed_time_runs_without_violations() {
        let e = Experiment::new(Scenario::owl322(), SimConfig::rush_hour(1800), ControllerKind::FixedTime);
        let t = evaluate(&e, &Policy::Fixed(CyclePlan::owl322_default()), 1, &[5], None).unwrap();
        assert_eq!(t.runs[0].safety_violations, 0);
        assert_eq!(t.runs[0].bounce_backs, 0);
        assert!(t.runs[0].row.cumulative_reward < 0.0);
    }

    #[test]
    fn evaluation_is_deterministic_and_traced() {
        let e = exp(ControllerKind::MaskSafetyPsych, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PolicyParams::new(e.env().unwrap().observation_len(), &[16], 8, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let a = evaluate(&e, &Policy::Greedy(p.clone()), 1, &[7, 8], Some(dir.path())).unwrap();
        let b = evaluate(&e, &Policy::Greedy(p), 1, &[7, 8], None).unwrap();
        assert_eq!(a, b);
        let trace = std::fs::read_to_string(dir.path().join("trace_c_t1_r0.csv")).unwrap();
        assert_eq!(trace.lines().count(), 301);
    }

    #[test]
    fn curve_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves_b_1.csv");
        let c = vec![
            CurvePoint { env_steps: 2048, episodes: 4, mean_episodic_reward: -10.5, ema: -10.5 },
            CurvePoint { env_steps: 4096, episodes: 8, mean_episodic_reward: -8.0, ema: -10.25 },
        ];
        write_curve(&path, &c).unwrap();
        assert_eq!(read_curve(&path).unwrap(), c);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("env_steps,episodes,mean_episodic_reward,ema"));
    }
}
