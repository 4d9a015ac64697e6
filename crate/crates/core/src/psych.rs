//! Comfort rules that forbid phase trajectories road users find stressful.
//!
//! Rules only ever remove phases from the action mask. The comfort mask is
//! combined with the safety mask by conjunction; if that would leave nothing
//! selectable, the safety mask is used unchanged for that step.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::intersection::{PhaseId, Seconds};
use crate::phase_graph::{PhaseHistory, PhaseMask};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PsychError {
    #[error("duplicate comfort rule id {0:?}")]
    DuplicateId(String),
    #[error("comfort rule {id:?}: {reason}")]
    InvalidRule { id: String, reason: String },
    #[error("mask lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum RuleKind {
    /// While in `via_phase`, forbid returning to the phase held just before
    /// it (the pattern `x -> via -> x`) until `window_s` seconds have passed.
    ForbidBounceBack { via_phase: PhaseId, window_s: Seconds },
    /// Hold each listed phase (all phases when empty) for at least `min_s`.
    MinGreenComfort {
        #[serde(default)]
        phases: Vec<PhaseId>,
        min_s: Seconds,
    },
    /// Forbid completing `pattern` while its second-to-last phase has been
    /// active for less than `window_s`.
    Custom { pattern: Vec<PhaseId>, window_s: Seconds },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsychRule {
    pub id: String,
    #[serde(flatten)]
    pub kind: RuleKind,
}

impl PsychRule {
    pub fn forbid_bounce_back(id: impl Into<String>, via_phase: PhaseId, window_s: Seconds) -> Self {
        PsychRule { id: id.into(), kind: RuleKind::ForbidBounceBack { via_phase, window_s } }
    }

    /// Clears the bits of every phase this rule forbids.
    fn restrict(&self, history: &PhaseHistory, mask: &mut PhaseMask) {
        let cur = history.current();
        let d = history.current_duration();
        let n = mask.len();
        let mut clear = |p: PhaseId| {
            if p.0 >= 1 && p.0 <= n {
                mask.set(p, false);
            }
        };
        match &self.kind {
            RuleKind::ForbidBounceBack { via_phase, window_s } => {
                if cur == *via_phase && d < *window_s {
                    if let Some(prev) = history.previous() {
                        clear(prev);
                    }
                }
            }
            RuleKind::MinGreenComfort { phases, min_s } => {
                if d < *min_s && (phases.is_empty() || phases.contains(&cur)) {
                    for p in (0..n).map(PhaseId::from_index).filter(|&p| p != cur) {
                        clear(p);
                    }
                }
            }
            RuleKind::Custom { pattern, window_s } => {
                let Some((&target, prefix)) = pattern.split_last() else {
                    return;
                };
                if d >= *window_s || prefix.len() > history.len() {
                    return;
                }
                let tail = history.entries().rev().take(prefix.len()).map(|(p, _)| p);
                if tail.eq(prefix.iter().rev().copied()) {
                    clear(target);
                }
            }
        }
    }

    fn validate(&self) -> Result<(), PsychError> {
        let bad = |reason: &str| Err(PsychError::InvalidRule { id: self.id.clone(), reason: reason.into() });
        match &self.kind {
            RuleKind::Custom { pattern, .. } if pattern.len() < 2 => bad("pattern needs at least two phases"),
            RuleKind::Custom { pattern, .. } if pattern.windows(2).any(|w| w[0] == w[1]) => {
                bad("consecutive pattern phases must differ")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleSet {
    rules: Vec<PsychRule>,
}

impl RuleSet {
    pub fn new(rules: Vec<PsychRule>) -> Result<Self, PsychError> {
        let mut seen = HashSet::new();
        for r in &rules {
            if !seen.insert(r.id.clone()) {
                return Err(PsychError::DuplicateId(r.id.clone()));
            }
            r.validate()?;
        }
        Ok(RuleSet { rules })
    }

    pub fn rules(&self) -> &[PsychRule] {
        &self.rules
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Comfort mask over `num_phases` phases: a bit is 0 iff some rule forbids it.
pub fn psych_mask(rules: &RuleSet, history: &PhaseHistory, num_phases: usize) -> PhaseMask {
    let mut mask = PhaseMask::full(num_phases);
    for rule in &rules.rules {
        rule.restrict(history, &mut mask);
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CombinedMask {
    pub mask: PhaseMask,
    /// The conjunction was empty and the safety mask was used instead.
    pub comfort_overridden: bool,
}

pub fn combine_masks(safety: &PhaseMask, comfort: &PhaseMask) -> Result<CombinedMask, PsychError> {
    if safety.len() != comfort.len() {
        return Err(PsychError::LengthMismatch(safety.len(), comfort.len()));
    }
    let both = safety.and(comfort);
    Ok(if both.is_empty() {
        CombinedMask { mask: *safety, comfort_overridden: true }
    } else {
        CombinedMask { mask: both, comfort_overridden: false }
    })
}

/// Number of `x -> via -> x` hops in a phase trajectory where `via` was held
/// for less than `window_s`.
pub fn count_bounce_backs(trajectory: &[(PhaseId, Seconds)], via_phase: PhaseId, window_s: Seconds) -> usize {
    trajectory
        .windows(3)
        .filter(|w| w[1].0 == via_phase && w[0].0 == w[2].0 && w[1].1 < window_s)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

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

    fn bounce_rules() -> RuleSet {
        RuleSet::new(vec![PsychRule::forbid_bounce_back("no-bounce", p(1), 30)]).unwrap()
    }

    // Independent reading of the rule: scan the trajectory tail for x, via.
    fn bounce_oracle(h: &PhaseHistory, n: usize) -> PhaseMask {
        let seq: Vec<_> = h.entries().collect();
        let mut bits = vec![true; n];
        if seq.len() >= 2 {
            let (cur, d) = seq[seq.len() - 1];
            let (prev, _) = seq[seq.len() - 2];
            if cur == p(1) && d < 30 {
                bits[prev.index()] = false;
            }
        }
        PhaseMask::from_bools(&bits)
    }

    #[test]
    fn blocks_three_one_three() {
        let h = history(&[(2, 12), (3, 20), (1, 7)]);
        let m = psych_mask(&bounce_rules(), &h, 8);
        assert!(!m.get(p(3)));
        assert_eq!(m.count(), 7);
        assert_eq!(m, bounce_oracle(&h, 8));
    }

    #[test]
    fn only_previous_phase_blocked() {
        let h = history(&[(3, 20), (2, 12), (1, 7)]);
        let m = psych_mask(&bounce_rules(), &h, 8);
        assert!(m.get(p(3)));
        assert!(!m.get(p(2)));
        assert_eq!(m, bounce_oracle(&h, 8));
    }

    #[test]
    fn window_expires() {
        let h = history(&[(3, 20), (1, 30)]);
        assert_eq!(psych_mask(&bounce_rules(), &h, 8), PhaseMask::full(8));
    }

    #[test]
    fn empty_rules_give_full_mask() {
        let h = history(&[(3, 20), (1, 7)]);
        assert_eq!(psych_mask(&RuleSet::default(), &h, 8), PhaseMask::full(8));
    }

    #[test]
    fn combine_is_conjunction() {
        let g = PhaseMask::from_bools(&[false, true, true, false, false, false, false, false]);
        let ps = PhaseMask::from_bools(&[true, true, false, true, true, true, true, true]);
        let c = combine_masks(&g, &ps).unwrap();
        assert_eq!(c.mask.to_bools(), vec![false, true, false, false, false, false, false, false]);
        assert!(!c.comfort_overridden);
        assert_eq!(combine_masks(&g, &PhaseMask::full(8)).unwrap().mask, g);
    }

    #[test]
    fn empty_conjunction_falls_back_to_safety() {
        let g = PhaseMask::single(8, p(3));
        let mut ps = PhaseMask::full(8);
        ps.set(p(3), false);
        let c = combine_masks(&g, &ps).unwrap();
        assert_eq!(c.mask, g);
        assert!(c.comfort_overridden);
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            combine_masks(&PhaseMask::full(8), &PhaseMask::full(7)),
            Err(PsychError::LengthMismatch(8, 7))
        );
    }

    #[test]
    fn custom_pattern_and_min_green() {
        let rules = RuleSet::new(vec![
            PsychRule { id: "a".into(), kind: RuleKind::Custom { pattern: vec![p(6), p(1), p(2)], window_s: 20 } },
            PsychRule { id: "b".into(), kind: RuleKind::MinGreenComfort { phases: vec![p(7)], min_s: 15 } },
        ])
        .unwrap();
        let m = psych_mask(&rules, &history(&[(6, 10), (1, 8)]), 8);
        assert!(!m.get(p(2)) && m.get(p(3)));
        let m = psych_mask(&rules, &history(&[(1, 10), (7, 8)]), 8);
        assert_eq!(m, PhaseMask::single(8, p(7)));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = PsychRule::forbid_bounce_back("x", p(1), 30);
        assert_eq!(RuleSet::new(vec![r.clone(), r]), Err(PsychError::DuplicateId("x".into())));
    }

    #[test]
    fn rule_json_shape() {
        let r: PsychRule = serde_json::from_str(
            r#"{"id": "no-bounce-back", "kind": "forbid_bounce_back", "params": {"via_phase": 1, "window_s": 30}}"#,
        )
        .unwrap();
        assert_eq!(r, PsychRule::forbid_bounce_back("no-bounce-back", p(1), 30));
    }

    #[test]
    fn bounce_counter() {
        let traj = [(p(3), 20), (p(1), 7), (p(3), 12), (p(1), 40), (p(3), 9), (p(1), 6), (p(6), 9)];
        assert_eq!(count_bounce_backs(&traj, p(1), 30), 1);
    }
}
