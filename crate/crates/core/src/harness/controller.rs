//! Controller kinds, the safety-layer projection and the fixed-time plan.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::intersection::{PhaseId, Seconds};
use crate::phase_graph::{GraphError, PhaseGraph, PhaseHistory, PhaseMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerKind {
    /// (a) unmasked agent, wishes projected by a safety layer.
    SafetyLayer,
    /// (b) agent masked by the phase graph.
    MaskSafety,
    /// (c) agent masked by the phase graph and the comfort rules.
    MaskSafetyPsych,
    FixedTime,
}

impl ControllerKind {
    pub fn tag(self) -> &'static str {
        match self {
            ControllerKind::SafetyLayer => "a",
            ControllerKind::MaskSafety => "b",
            ControllerKind::MaskSafetyPsych => "c",
            ControllerKind::FixedTime => "fixed",
        }
    }

    pub fn is_learning(self) -> bool {
        self != ControllerKind::FixedTime
    }

    /// Whether comfort rules are attached unless overridden.
    pub fn default_psych_rules(self) -> bool {
        self == ControllerKind::MaskSafetyPsych
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ControllerKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a" => Ok(ControllerKind::SafetyLayer),
            "b" => Ok(ControllerKind::MaskSafety),
            "c" => Ok(ControllerKind::MaskSafetyPsych),
            "fixed" => Ok(ControllerKind::FixedTime),
            other => Err(HarnessError::Config(format!("unknown controller {other:?}, expected a, b, c or fixed"))),
        }
    }
}

/// Maps a wish onto `mask`: the wish if allowed, else the current phase if
/// it may be held, else the lowest-numbered allowed phase.
pub fn project(wish: PhaseId, current: PhaseId, mask: &PhaseMask) -> PhaseId {
    if wish.0 >= 1 && wish.0 <= mask.len() && mask.get(wish) {
        wish
    } else if mask.get(current) {
        current
    } else {
        mask.lowest().expect("phase mask is never empty")
    }
}

/// Safety layer of controller (a) against the graph mask of `history`.
pub fn safety_layer(wish: PhaseId, history: &PhaseHistory, graph: &PhaseGraph) -> Result<PhaseId, GraphError> {
    Ok(project(wish, history.current(), &graph.mask(history)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub phase: PhaseId,
    /// Active time before moving on, transitions excluded.
    pub duration_s: Seconds,
}

/// Cyclic fixed-time phase plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CyclePlan {
    pub steps: Vec<PlanStep>,
}

impl CyclePlan {
    /// 3 (30 s), 1 (6 s), 7 (30 s), 1 (6 s).
    pub fn owl322_default() -> Self {
        let s = |p, d| PlanStep { phase: PhaseId(p), duration_s: d };
        CyclePlan { steps: vec![s(3, 30), s(1, 6), s(7, 30), s(1, 6)] }
    }

    /// Checks every hop of the cycle, and the entry from `initial`, against
    /// the graph's edges, dwell times and duration bounds.
    pub fn validate(&self, graph: &PhaseGraph, initial: PhaseId) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidCyclePlan(m));
        let n = self.steps.len();
        if n < 2 {
            return bad("a cycle needs at least two steps".into());
        }
        for s in &self.steps {
            if s.phase.0 == 0 || s.phase.0 > graph.num_phases() {
                return bad(format!("unknown phase {}", s.phase));
            }
        }
        for i in 0..n {
            let (cur, next) = (self.steps[i], self.steps[(i + 1) % n]);
            if cur.phase == next.phase {
                return bad(format!("step {i} repeats phase {}", cur.phase));
            }
            let Some(dwell) = graph.min_dwell(cur.phase, next.phase) else {
                return bad(format!("no edge {} -> {}", cur.phase, next.phase));
            };
            let need = dwell.max(graph.min_duration(cur.phase));
            if cur.duration_s < need || cur.duration_s > graph.max_duration(cur.phase) {
                return bad(format!(
                    "phase {} held {} s, needs {}..={} s before {}",
                    cur.phase,
                    cur.duration_s,
                    need,
                    graph.max_duration(cur.phase),
                    next.phase
                ));
            }
        }
        let first = self.steps[0].phase;
        if first != initial && !graph.contains(initial, first) {
            return bad(format!("cannot enter the cycle from phase {initial}"));
        }
        Ok(())
    }
}

/// Emits the plan's phase wishes one second at a time.
#[derive(Debug, Clone)]
pub struct FixedTimeController {
    plan: CyclePlan,
    index: usize,
}

impl FixedTimeController {
    pub fn new(plan: CyclePlan, graph: &PhaseGraph, initial: PhaseId) -> Result<Self, HarnessError> {
        plan.validate(graph, initial)?;
        Ok(FixedTimeController { plan, index: 0 })
    }

    pub fn reset(&mut self) {
        self.index = 0;
    }

    /// Next action given the current phase, its active time and the mask.
    pub fn act(&mut self, current: PhaseId, duration_s: Seconds, mask: &PhaseMask) -> Result<PhaseId, HarnessError> {
        if mask.count() == 1 {
            // transition in progress, or only one choice
            return Ok(mask.lowest().expect("non-empty"));
        }
        let step = self.plan.steps[self.index];
        let wish = if current != step.phase {
            // entering the cycle: wait until the first phase is reachable
            if mask.get(step.phase) {
                step.phase
            } else {
                current
            }
        } else if duration_s >= step.duration_s {
            self.index = (self.index + 1) % self.plan.steps.len();
            self.plan.steps[self.index].phase
        } else {
            current
        };
        if !mask.get(wish) {
            return Err(HarnessError::InvalidCyclePlan(format!("phase {wish} not permitted after {duration_s} s in {current}")));
        }
        Ok(wish)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preset;

    fn p(n: usize) -> PhaseId {
        PhaseId(n)
    }

    fn history(seq: &[(usize, Seconds)]) -> PhaseHistory {
        let mut h = PhaseHistory::new(p(seq[0].0));
        for &(ph, d) in seq {
            h.record(p(ph), d);
        }
        h
    }

    #[test]
    fn legal_wish_passes_through() {
        let g = preset::owl322_graph();
        let h = history(&[(1, 10)]);
        assert_eq!(safety_layer(p(3), &h, &g).unwrap(), p(3));
    }

    #[test]
    fn illegal_wish_stays_in_phase() {
        let g = preset::owl322_graph();
        let h = history(&[(1, 10), (3, 20)]);
        assert_eq!(safety_layer(p(7), &h, &g).unwrap(), p(3));
    }

    #[test]
    fn illegal_wish_at_max_duration_advances() {
        let g = preset::owl322_graph();
        let h = history(&[(1, 10), (3, 60)]);
        let m = g.mask(&h).unwrap();
        assert!(!m.get(p(3)));
        assert_eq!(safety_layer(p(7), &h, &g).unwrap(), m.lowest().unwrap());
        assert_eq!(safety_layer(p(7), &h, &g).unwrap(), p(1));
    }

    #[test]
    fn controller_tags_roundtrip() {
        for k in [ControllerKind::SafetyLayer, ControllerKind::MaskSafety, ControllerKind::MaskSafetyPsych, ControllerKind::FixedTime] {
            assert_eq!(k.tag().parse::<ControllerKind>().unwrap(), k);
        }
        assert!("d".parse::<ControllerKind>().is_err());
    }

    #[test]
    fn default_plan_is_valid() {
        CyclePlan::owl322_default().validate(&preset::owl322_graph(), p(1)).unwrap();
    }

    #[test]
    fn direct_opposing_hop_is_rejected() {
        let plan = CyclePlan {
            steps: vec![PlanStep { phase: p(3), duration_s: 30 }, PlanStep { phase: p(7), duration_s: 30 }],
        };
        assert!(matches!(plan.validate(&preset::owl322_graph(), p(1)), Err(HarnessError::InvalidCyclePlan(_))));
    }

    #[test]
    fn short_dwell_is_rejected() {
        let mut plan = CyclePlan::owl322_default();
        plan.steps[1].duration_s = 5;
        assert!(matches!(plan.validate(&preset::owl322_graph(), p(1)), Err(HarnessError::InvalidCyclePlan(_))));
        let mut plan = CyclePlan::owl322_default();
        plan.steps[0].duration_s = 61;
        assert!(plan.validate(&preset::owl322_graph(), p(1)).is_err());
    }
}
