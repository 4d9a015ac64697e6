//! Static description of a signalized intersection.
//!
//! An [`IntersectionModel`] holds the signal groups, the legal phases (one
//! color per group), which groups conflict, the intergreen times between
//! conflicting groups and the duration bounds of each phase. Models are
//! immutable once loaded.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Integer simulation seconds.
pub type Seconds = u32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed intersection config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid intersection model: {0}")]
    Validation(String),
    #[error("no such phase: {0}")]
    NoSuchPhase(PhaseId),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ModelError> {
    Err(ModelError::Validation(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalColor {
    Red,
    Yellow,
    Green,
    GreenWithLeftPriority,
}

impl SignalColor {
    pub fn is_red(self) -> bool {
        self == SignalColor::Red
    }

    /// Green or green with left-turn priority.
    pub fn is_green(self) -> bool {
        matches!(self, SignalColor::Green | SignalColor::GreenWithLeftPriority)
    }

    pub fn short(self) -> &'static str {
        match self {
            SignalColor::Red => "r",
            SignalColor::Yellow => "y",
            SignalColor::Green => "g",
            SignalColor::GreenWithLeftPriority => "g+l",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Vehicle,
    Pedestrian,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalGroup {
    pub id: usize,
    pub kind: GroupKind,
    pub label: String,
}

/// One-based phase number, as printed in signal timing plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseId(pub usize);

impl PhaseId {
    pub fn from_index(index: usize) -> Self {
        PhaseId(index + 1)
    }

    /// Zero-based position in phase-indexed vectors and masks.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseSpec {
    pub id: PhaseId,
    /// Indexed by signal group id.
    pub colors: Vec<SignalColor>,
    pub min_duration_s: Seconds,
    pub max_duration_s: Seconds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictMatrix {
    n: usize,
    cells: Vec<bool>,
}

impl ConflictMatrix {
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self, ModelError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return invalid("conflict matrix is not square");
        }
        let m = ConflictMatrix { n, cells: rows.concat() };
        for i in 0..n {
            if m.get(i, i) {
                return invalid(format!("signal group {i} conflicts with itself"));
            }
            for j in 0..i {
                if m.get(i, j) != m.get(j, i) {
                    return invalid(format!("asymmetric conflict between groups {i} and {j}"));
                }
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, a: usize, b: usize) -> bool {
        self.cells[a * self.n + b]
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        self.cells.chunks(self.n.max(1)).map(<[bool]>::to_vec).collect()
    }

    /// Unordered conflicting pairs `(a, b)` with `a < b`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |a| ((a + 1)..self.n).filter(move |&b| self.get(a, b)).map(move |b| (a, b)))
    }
}

/// Intergreen seconds indexed by (clearing group, entering group).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntergreenMatrix {
    n: usize,
    cells: Vec<Option<Seconds>>,
}

impl IntergreenMatrix {
    pub fn from_rows(rows: &[Vec<Option<Seconds>>]) -> Result<Self, ModelError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return invalid("intergreen matrix is not square");
        }
        Ok(IntergreenMatrix { n, cells: rows.concat() })
    }

    pub fn get(&self, clearing: usize, entering: usize) -> Option<Seconds> {
        self.cells[clearing * self.n + entering]
    }

    pub fn rows(&self) -> Vec<Vec<Option<Seconds>>> {
        self.cells.chunks(self.n.max(1)).map(<[Option<Seconds>]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafetyViolation {
    pub phase: PhaseId,
    pub groups: (usize, usize),
}

impl fmt::Display for SafetyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "phase {} shows non-red to conflicting groups {} and {}",
            self.phase, self.groups.0, self.groups.1
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionEvent {
    pub offset_s: Seconds,
    pub group: usize,
    pub color: SignalColor,
}

/// Timed color changes that take the intersection from one phase to another.
///
/// An event at offset `k` is in effect from the `k`-th second of the
/// transition on; at `total_duration_s` every group shows its target color.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionSpec {
    pub from: PhaseId,
    pub to: PhaseId,
    pub timeline: Vec<TransitionEvent>,
    pub total_duration_s: Seconds,
}

impl TransitionSpec {
    /// Colors shown `elapsed` seconds into the transition.
    pub fn colors_at(&self, start: &[SignalColor], elapsed: Seconds) -> Vec<SignalColor> {
        let mut colors = start.to_vec();
        for ev in self.timeline.iter().take_while(|ev| ev.offset_s <= elapsed) {
            colors[ev.group] = ev.color;
        }
        colors
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntersectionModel {
    groups: Vec<SignalGroup>,
    phases: Vec<PhaseSpec>,
    conflicts: ConflictMatrix,
    intergreen: IntergreenMatrix,
    yellow_s: Seconds,
}

impl IntersectionModel {
    /// Builds a model checking only structure (shapes, ids, bounds), not
    /// phase safety. Used to inspect broken configurations.
    pub fn from_config_unchecked(cfg: &IntersectionConfig) -> Result<Self, ModelError> {
        let groups = cfg.signal_groups.clone();
        let n = groups.len();
        if n == 0 {
            return invalid("no signal groups");
        }
        for (i, g) in groups.iter().enumerate() {
            if g.id != i {
                return invalid(format!("signal group ids must be contiguous from 0, found {} at position {i}", g.id));
            }
        }
        if cfg.phases.is_empty() {
            return invalid("empty phase list");
        }
        if cfg.phases.len() > crate::phase_graph::MAX_PHASES {
            return invalid(format!("at most {} phases are supported", crate::phase_graph::MAX_PHASES));
        }
        let mut phases = Vec::with_capacity(cfg.phases.len());
        for (i, p) in cfg.phases.iter().enumerate() {
            if p.id != PhaseId::from_index(i) {
                return invalid(format!("phase ids must be 1..N in order, found {} at position {}", p.id, i + 1));
            }
            if p.colors.len() != n {
                return invalid(format!("phase {} lists {} colors for {n} signal groups", p.id, p.colors.len()));
            }
            for (g, c) in p.colors.iter().enumerate() {
                match c {
                    SignalColor::Yellow => {
                        return invalid(format!("phase {} uses yellow, which only occurs during transitions", p.id))
                    }
                    SignalColor::GreenWithLeftPriority if groups[g].kind != GroupKind::Vehicle => {
                        return invalid(format!("phase {}: left-priority green on pedestrian group {g}", p.id))
                    }
                    _ => {}
                }
            }
            let bounds = cfg
                .duration_bounds_s
                .get(&p.id.0.to_string())
                .copied()
                .unwrap_or_else(|| default_bounds(&p.colors));
            if bounds.min < 1 {
                return invalid(format!("phase {}: minimum duration must be at least one control interval", p.id));
            }
            if bounds.min > bounds.max {
                return invalid(format!("phase {}: min duration {} exceeds max {}", p.id, bounds.min, bounds.max));
            }
            phases.push(PhaseSpec {
                id: p.id,
                colors: p.colors.clone(),
                min_duration_s: bounds.min,
                max_duration_s: bounds.max,
            });
        }
        for key in cfg.duration_bounds_s.keys() {
            let known = key.parse::<usize>().ok().filter(|&k| k >= 1 && k <= phases.len());
            if known.is_none() {
                return invalid(format!("duration bounds given for unknown phase {key:?}"));
            }
        }
        let conflicts = ConflictMatrix::from_rows(&cfg.conflicts)?;
        if conflicts.len() != n {
            return invalid("conflict matrix size does not match signal groups");
        }
        let intergreen = IntergreenMatrix::from_rows(&cfg.intergreen_s)?;
        if intergreen.n != n {
            return invalid("intergreen matrix size does not match signal groups");
        }
        for c in 0..n {
            for e in 0..n {
                match (conflicts.get(c, e), intergreen.get(c, e)) {
                    (true, None) => {
                        return invalid(format!("missing intergreen time for conflicting pair ({c}, {e})"))
                    }
                    (false, Some(_)) => {
                        return invalid(format!("intergreen time given for non-conflicting pair ({c}, {e})"))
                    }
                    _ => {}
                }
            }
        }
        Ok(IntersectionModel { groups, phases, conflicts, intergreen, yellow_s: cfg.yellow_s })
    }

    pub fn groups(&self) -> &[SignalGroup] {
        &self.groups
    }

    pub fn phases(&self) -> &[PhaseSpec] {
        &self.phases
    }

    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn phase_ids(&self) -> impl Iterator<Item = PhaseId> {
        (0..self.phases.len()).map(PhaseId::from_index)
    }

    pub fn phase(&self, id: PhaseId) -> Result<&PhaseSpec, ModelError> {
        id.0.checked_sub(1).and_then(|i| self.phases.get(i)).ok_or(ModelError::NoSuchPhase(id))
    }

    pub fn conflicts(&self) -> &ConflictMatrix {
        &self.conflicts
    }

    pub fn intergreen(&self) -> &IntergreenMatrix {
        &self.intergreen
    }

    pub fn yellow_s(&self) -> Seconds {
        self.yellow_s
    }

    pub fn min_duration(&self, id: PhaseId) -> Seconds {
        self.phases[id.index()].min_duration_s
    }

    pub fn max_duration(&self, id: PhaseId) -> Seconds {
        self.phases[id.index()].max_duration_s
    }

    pub fn all_red(&self) -> Vec<SignalColor> {
        vec![SignalColor::Red; self.groups.len()]
    }

    /// Transition with no pending clearance from earlier red signals.
    pub fn build_transition(&self, from: PhaseId, to: PhaseId, yellow_s: Seconds) -> Result<TransitionSpec, ModelError> {
        self.build_transition_with_pending(from, to, yellow_s, &vec![None; self.groups.len()])
    }

    /// Builds the shortest transition from `from` to `to`.
    ///
    /// `red_for[g]` is how long group `g` has already been red when the
    /// transition starts, or `None` if long enough that it owes nothing. Leaving
    /// vehicle groups show yellow for `yellow_s` then red; pedestrian groups
    /// go straight to red. A group entering green waits until every
    /// conflicting group has been red for its intergreen time. Groups that
    /// stay non-red but change color switch at the end.
    pub fn build_transition_with_pending(
        &self,
        from: PhaseId,
        to: PhaseId,
        yellow_s: Seconds,
        red_for: &[Option<Seconds>],
    ) -> Result<TransitionSpec, ModelError> {
        let src = self.phase(from)?;
        let dst = self.phase(to)?;
        let n = self.groups.len();
        assert_eq!(red_for.len(), n, "red durations must cover every signal group");

        let mut timeline = Vec::new();
        let mut red_at: Vec<Option<Seconds>> = vec![None; n];
        for g in 0..n {
            if !src.colors[g].is_red() && dst.colors[g].is_red() {
                match self.groups[g].kind {
                    GroupKind::Vehicle => {
                        timeline.push(TransitionEvent { offset_s: 0, group: g, color: SignalColor::Yellow });
                        timeline.push(TransitionEvent { offset_s: yellow_s, group: g, color: SignalColor::Red });
                        red_at[g] = Some(yellow_s);
                    }
                    GroupKind::Pedestrian => {
                        timeline.push(TransitionEvent { offset_s: 0, group: g, color: SignalColor::Red });
                        red_at[g] = Some(0);
                    }
                }
            }
        }

        let mut total = red_at.iter().flatten().copied().max().unwrap_or(0);
        let mut entering = Vec::new();
        for e in 0..n {
            if !(src.colors[e].is_red() && !dst.colors[e].is_red()) {
                continue;
            }
            let mut start = 0;
            for c in 0..n {
                if !self.conflicts.get(c, e) {
                    continue;
                }
                let ig = self.intergreen.get(c, e).unwrap_or(0);
                let needed = match red_at[c] {
                    Some(r) => r + ig,
                    None if src.colors[c].is_red() => red_for[c].map_or(0, |since| ig.saturating_sub(since)),
                    // c keeps a non-red color, which a valid target phase rules out.
                    None => 0,
                };
                start = start.max(needed);
            }
            total = total.max(start);
            entering.push(TransitionEvent { offset_s: start, group: e, color: dst.colors[e] });
        }
        timeline.extend(entering);
        for g in 0..n {
            if !src.colors[g].is_red() && !dst.colors[g].is_red() && src.colors[g] != dst.colors[g] {
                timeline.push(TransitionEvent { offset_s: total, group: g, color: dst.colors[g] });
            }
        }
        timeline.sort_by_key(|ev| ev.offset_s);
        Ok(TransitionSpec { from, to, timeline, total_duration_s: total })
    }

    pub fn to_config(&self) -> IntersectionConfig {
        IntersectionConfig {
            version: CONFIG_VERSION,
            signal_groups: self.groups.clone(),
            phases: self.phases.iter().map(|p| PhaseConfig { id: p.id, colors: p.colors.clone() }).collect(),
            conflicts: self.conflicts.rows(),
            intergreen_s: self.intergreen.rows(),
            duration_bounds_s: self
                .phases
                .iter()
                .map(|p| (p.id.0.to_string(), DurationBounds { min: p.min_duration_s, max: p.max_duration_s }))
                .collect(),
            yellow_s: self.yellow_s,
            edges: Vec::new(),
            psych_rules: Vec::new(),
        }
    }
}

/// Phases that show non-red to two conflicting groups.
pub fn validate_phase_safety(model: &IntersectionModel) -> Vec<SafetyViolation> {
    let mut out = Vec::new();
    for p in &model.phases {
        for (a, b) in model.conflicts.pairs() {
            if !p.colors[a].is_red() && !p.colors[b].is_red() {
                out.push(SafetyViolation { phase: p.id, groups: (a, b) });
            }
        }
    }
    out
}

/// Parses and validates an intersection config document.
pub fn load_model(config_text: &str) -> Result<IntersectionModel, ModelError> {
    let cfg: IntersectionConfig = serde_json::from_str(config_text)?;
    model_from_config(&cfg)
}

pub fn model_from_config(cfg: &IntersectionConfig) -> Result<IntersectionModel, ModelError> {
    if cfg.version != CONFIG_VERSION {
        return invalid(format!("unsupported config version {}", cfg.version));
    }
    let model = IntersectionModel::from_config_unchecked(cfg)?;
    let violations = validate_phase_safety(&model);
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return invalid(msgs.join("; "));
    }
    Ok(model)
}

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationBounds {
    pub min: Seconds,
    pub max: Seconds,
}

fn default_bounds(colors: &[SignalColor]) -> DurationBounds {
    if colors.iter().all(|c| c.is_red()) {
        DurationBounds { min: 1, max: 30 }
    } else {
        DurationBounds { min: 5, max: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub id: PhaseId,
    pub colors: Vec<SignalColor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub from: PhaseId,
    pub to: PhaseId,
    #[serde(default)]
    pub min_dwell_source_s: Seconds,
}

/// On-disk intersection document. The graph and comfort-rule sections are
/// consumed by [`crate::phase_graph`] and [`crate::psych`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionConfig {
    pub version: u32,
    pub signal_groups: Vec<SignalGroup>,
    pub phases: Vec<PhaseConfig>,
    pub conflicts: Vec<Vec<bool>>,
    pub intergreen_s: Vec<Vec<Option<Seconds>>>,
    #[serde(default)]
    pub duration_bounds_s: BTreeMap<String, DurationBounds>,
    pub yellow_s: Seconds,
    #[serde(default)]
    pub edges: Vec<EdgeConfig>,
    #[serde(default)]
    pub psych_rules: Vec<crate::psych::PsychRule>,
}

impl IntersectionConfig {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("intersection config serializes")
    }
}
