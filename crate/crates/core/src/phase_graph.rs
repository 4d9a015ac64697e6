//! Temporal phase graph: the safety kernel.
//!
//! Nodes are phases, edges are permitted phase changes (every phase also has
//! an implicit self-edge). Whether an edge may be taken right now depends on
//! the phase history: a phase may be held while it is below its maximum
//! duration, and left along an edge once it has been active for at least its
//! minimum duration and the edge's source dwell. The phase mask marks every
//! phase reachable in the next control step.

use std::collections::VecDeque;
use std::fmt;

use thiserror::Error;

use crate::intersection::{EdgeConfig, IntersectionModel, PhaseId, Seconds};

/// Phases are tracked in a 64-bit mask.
pub const MAX_PHASES: usize = 64;

/// Retained history length.
pub const HISTORY_CAPACITY: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("invalid phase graph: {0}")]
    Validation(String),
    #[error("no phase permitted from phase {phase} after {duration_s} s")]
    Deadlock { phase: PhaseId, duration_s: Seconds },
    #[error("transition {from} -> {to} not permitted after {duration_s} s in phase {from}")]
    IllegalTransition { from: PhaseId, to: PhaseId, duration_s: Seconds },
}

/// One bit per phase, bit `i` for phase `i + 1`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhaseMask {
    bits: u64,
    len: u8,
}

impl PhaseMask {
    pub fn empty(len: usize) -> Self {
        assert!(len <= MAX_PHASES);
        PhaseMask { bits: 0, len: len as u8 }
    }

    pub fn full(len: usize) -> Self {
        let mut m = Self::empty(len);
        m.bits = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
        m
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut m = Self::empty(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            m.set_index(i, b);
        }
        m
    }

    pub fn single(len: usize, phase: PhaseId) -> Self {
        let mut m = Self::empty(len);
        m.set(phase, true);
        m
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn get(&self, phase: PhaseId) -> bool {
        phase.0 >= 1 && phase.0 <= self.len() && self.get_index(phase.index())
    }

    pub fn get_index(&self, i: usize) -> bool {
        i < self.len() && self.bits >> i & 1 == 1
    }

    pub fn set(&mut self, phase: PhaseId, on: bool) {
        self.set_index(phase.index(), on)
    }

    pub fn set_index(&mut self, i: usize, on: bool) {
        assert!(i < self.len(), "phase index {i} outside mask of length {}", self.len);
        if on {
            self.bits |= 1 << i;
        } else {
            self.bits &= !(1 << i);
        }
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn and(&self, other: &PhaseMask) -> PhaseMask {
        debug_assert_eq!(self.len, other.len);
        PhaseMask { bits: self.bits & other.bits, len: self.len }
    }

    pub fn is_subset_of(&self, other: &PhaseMask) -> bool {
        self.bits & !other.bits == 0
    }

    /// Lowest-numbered phase whose bit is set.
    pub fn lowest(&self) -> Option<PhaseId> {
        (self.bits != 0).then(|| PhaseId::from_index(self.bits.trailing_zeros() as usize))
    }

    pub fn iter(&self) -> impl Iterator<Item = PhaseId> + '_ {
        (0..self.len()).filter(|&i| self.get_index(i)).map(PhaseId::from_index)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get_index(i)).collect()
    }
}

impl fmt::Debug for PhaseMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for i in 0..self.len() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", self.get_index(i) as u8)?;
        }
        write!(f, "]")
    }
}

impl fmt::Display for PhaseMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len() {
            write!(f, "{}", self.get_index(i) as u8)?;
        }
        Ok(())
    }
}

/// Phase trajectory `H` and durations `D`, most recent last.
///
/// Only the newest [`HISTORY_CAPACITY`] entries are retained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseHistory {
    entries: VecDeque<(PhaseId, Seconds)>,
    capacity: usize,
}

impl PhaseHistory {
    pub fn new(initial: PhaseId) -> Self {
        Self::with_capacity(initial, HISTORY_CAPACITY)
    }

    pub fn with_capacity(initial: PhaseId, capacity: usize) -> Self {
        assert!(capacity >= 2);
        let mut entries = VecDeque::with_capacity(capacity);
        entries.push_back((initial, 0));
        PhaseHistory { entries, capacity }
    }

    pub fn current(&self) -> PhaseId {
        self.entries.back().expect("history is never empty").0
    }

    pub fn current_duration(&self) -> Seconds {
        self.entries.back().expect("history is never empty").1
    }

    /// Phase active before the current one, if still retained.
    pub fn previous(&self) -> Option<PhaseId> {
        let n = self.entries.len();
        (n >= 2).then(|| self.entries[n - 2].0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Oldest first.
    pub fn entries(&self) -> impl DoubleEndedIterator<Item = (PhaseId, Seconds)> + '_ {
        self.entries.iter().copied()
    }

    /// Appends without consulting any graph. Staying in the current phase
    /// accrues `dt`; a different phase starts a new entry at zero then
    /// accrues `dt`.
    pub fn record(&mut self, phase: PhaseId, dt: Seconds) {
        if phase != self.current() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((phase, 0));
        }
        self.entries.back_mut().expect("history is never empty").1 += dt;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: PhaseId,
    pub to: PhaseId,
    pub min_dwell_source_s: Seconds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseGraph {
    n: usize,
    min_duration: Vec<Seconds>,
    max_duration: Vec<Seconds>,
    /// `dwell[from * n + to]`, `Some` iff the edge exists. Self-edges are `Some(0)`.
    dwell: Vec<Option<Seconds>>,
    /// Non-self edges leaving each phase as (target index, required duration).
    outgoing: Vec<Vec<(usize, Seconds)>>,
}

impl PhaseGraph {
    pub fn new(model: &IntersectionModel, edges: &[EdgeConfig]) -> Result<Self, GraphError> {
        let n = model.num_phases();
        let bad = |m: String| Err(GraphError::Validation(m));
        let mut dwell = vec![None; n * n];
        for i in 0..n {
            dwell[i * n + i] = Some(0);
        }
        for e in edges {
            for p in [e.from, e.to] {
                if p.0 < 1 || p.0 > n {
                    return bad(format!("edge {} -> {} references unknown phase {p}", e.from, e.to));
                }
            }
            if e.from == e.to {
                return bad(format!("self-edge on phase {} is implicit", e.from));
            }
            let cell = &mut dwell[e.from.index() * n + e.to.index()];
            if cell.is_some() {
                return bad(format!("duplicate edge {} -> {}", e.from, e.to));
            }
            *cell = Some(e.min_dwell_source_s);
        }
        let min_duration: Vec<Seconds> = model.phases().iter().map(|p| p.min_duration_s).collect();
        let max_duration: Vec<Seconds> = model.phases().iter().map(|p| p.max_duration_s).collect();
        let outgoing = (0..n)
            .map(|from| {
                (0..n)
                    .filter(|&to| to != from)
                    .filter_map(|to| dwell[from * n + to].map(|d| (to, d.max(min_duration[from]))))
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>();
        let graph = PhaseGraph { n, min_duration, max_duration, dwell, outgoing };

        if n > 1 && !graph.is_strongly_connected() {
            return bad("phase graph is not strongly connected".into());
        }
        for from in 0..n {
            let max = graph.max_duration[from];
            if n > 1 && !graph.outgoing[from].iter().any(|&(_, need)| need <= max) {
                return bad(format!(
                    "phase {} can never be left before reaching its maximum duration of {max} s",
                    PhaseId::from_index(from)
                ));
            }
        }
        Ok(graph)
    }

    pub fn num_phases(&self) -> usize {
        self.n
    }

    pub fn contains(&self, from: PhaseId, to: PhaseId) -> bool {
        self.min_dwell(from, to).is_some()
    }

    /// Edge dwell constraint, `None` if the edge does not exist.
    pub fn min_dwell(&self, from: PhaseId, to: PhaseId) -> Option<Seconds> {
        if from.0 < 1 || from.0 > self.n || to.0 < 1 || to.0 > self.n {
            return None;
        }
        self.dwell[from.index() * self.n + to.index()]
    }

    pub fn min_duration(&self, p: PhaseId) -> Seconds {
        self.min_duration[p.index()]
    }

    pub fn max_duration(&self, p: PhaseId) -> Seconds {
        self.max_duration[p.index()]
    }

    /// Non-self edges in (from, to) order.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for from in 0..self.n {
            for to in 0..self.n {
                if from != to {
                    if let Some(d) = self.dwell[from * self.n + to] {
                        out.push(Edge {
                            from: PhaseId::from_index(from),
                            to: PhaseId::from_index(to),
                            min_dwell_source_s: d,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn to_edge_configs(&self) -> Vec<EdgeConfig> {
        self.edges()
            .into_iter()
            .map(|e| EdgeConfig { from: e.from, to: e.to, min_dwell_source_s: e.min_dwell_source_s })
            .collect()
    }

    fn is_strongly_connected(&self) -> bool {
        let reach = |forward: bool| {
            let mut seen = vec![false; self.n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(u) = stack.pop() {
                for v in 0..self.n {
                    let (a, b) = if forward { (u, v) } else { (v, u) };
                    if !seen[v] && self.dwell[a * self.n + b].is_some() {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }

    /// Safety function for the edge `from -> to` given the history.
    ///
    /// Holding a phase is allowed while its duration is below the maximum.
    /// Leaving is allowed once the phase has been active for its minimum
    /// duration and the edge's source dwell.
    pub fn safety(&self, from: PhaseId, to: PhaseId, history: &PhaseHistory) -> bool {
        if history.current() != from {
            return false;
        }
        let Some(dwell) = self.min_dwell(from, to) else {
            return false;
        };
        let d = history.current_duration();
        if from == to {
            d < self.max_duration(from)
        } else {
            d >= self.min_duration(from).max(dwell)
        }
    }

    /// Phases reachable in the next step.
    pub fn mask(&self, history: &PhaseHistory) -> Result<PhaseMask, GraphError> {
        let cur = history.current();
        let d = history.current_duration();
        let mut mask = PhaseMask::empty(self.n);
        if d < self.max_duration[cur.index()] {
            mask.set(cur, true);
        }
        for &(to, need) in &self.outgoing[cur.index()] {
            if d >= need {
                mask.set_index(to, true);
            }
        }
        if mask.is_empty() {
            return Err(GraphError::Deadlock { phase: cur, duration_s: d });
        }
        Ok(mask)
    }

    /// Moves the history forward by `dt` in `chosen`, rejecting phases the
    /// current mask does not permit.
    pub fn advance(&self, history: &mut PhaseHistory, chosen: PhaseId, dt: Seconds) -> Result<(), GraphError> {
        let mask = self.mask(history)?;
        if !mask.get(chosen) {
            return Err(GraphError::IllegalTransition {
                from: history.current(),
                to: chosen,
                duration_s: history.current_duration(),
            });
        }
        history.record(chosen, dt);
        Ok(())
    }
}

/// Reference mask: ORs the safety function over every (source, target)
/// pair with no shortcuts. Intended for cross-checking [`PhaseGraph::mask`].
pub fn mask_oracle(graph: &PhaseGraph, history: &PhaseHistory) -> PhaseMask {
    let n = graph.num_phases();
    let mut mask = PhaseMask::empty(n);
    for target in 0..n {
        let mut any = false;
        for source in 0..n {
            any |= graph.safety(PhaseId::from_index(source), PhaseId::from_index(target), history);
        }
        mask.set_index(target, any);
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preset;

    fn p(n: usize) -> PhaseId {
        PhaseId(n)
    }

    fn in_phase(phase: usize, d: Seconds) -> PhaseHistory {
        let mut h = PhaseHistory::new(p(1));
        h.record(p(1), 7);
        if phase != 1 {
            h.record(p(phase), d);
        } else {
            h = PhaseHistory::new(p(1));
            h.record(p(1), d);
        }
        h
    }

    #[test]
    fn self_edge_closes_at_max_duration() {
        let g = preset::owl322_graph();
        assert!(g.safety(p(2), p(2), &in_phase(2, 59)));
        assert!(!g.safety(p(2), p(2), &in_phase(2, 60)));
    }

    #[test]
    fn pedestrian_clearance_dwell() {
        let g = preset::owl322_graph();
        assert_eq!(g.min_dwell(p(2), p(3)), Some(10));
        assert!(!g.safety(p(2), p(3), &in_phase(2, 5)));
        assert!(g.safety(p(2), p(3), &in_phase(2, 12)));
    }

    #[test]
    fn opposing_streams_need_all_red() {
        let g = preset::owl322_graph();
        assert!(!g.contains(p(3), p(7)));
        assert!(!g.safety(p(3), p(7), &in_phase(3, 40)));
    }

    #[test]
    fn safety_requires_current_source() {
        let g = preset::owl322_graph();
        assert!(!g.safety(p(4), p(1), &in_phase(3, 40)));
    }

    #[test]
    fn mask_in_phase_two_at_five_seconds() {
        let g = preset::owl322_graph();
        let m = g.mask(&in_phase(2, 5)).unwrap();
        // min duration of phase 2 is 5 s, so phase 1, 4 and 5 open; phase 3 waits for the 10 s dwell
        assert_eq!(m.to_bools(), vec![true, true, false, true, true, false, false, false]);
        assert_eq!(m, mask_oracle(&g, &in_phase(2, 5)));
    }

    #[test]
    fn before_min_duration_only_self() {
        let g = preset::owl322_graph();
        for phase in 2..=8 {
            let m = g.mask(&in_phase(phase, 3)).unwrap();
            assert_eq!(m, PhaseMask::single(8, p(phase)));
        }
    }

    #[test]
    fn at_max_duration_self_bit_clears() {
        let g = preset::owl322_graph();
        let m = g.mask(&in_phase(3, 60)).unwrap();
        assert!(!m.get(p(3)));
        assert_eq!(m.iter().collect::<Vec<_>>(), vec![p(1), p(2), p(4), p(5)]);
    }

    #[test]
    fn fresh_history_has_self_bit() {
        let g = preset::owl322_graph();
        let h = PhaseHistory::new(p(1));
        assert_eq!(g.mask(&h).unwrap(), PhaseMask::single(8, p(1)));
        assert_eq!(mask_oracle(&g, &h), PhaseMask::single(8, p(1)));
    }

    #[test]
    fn advance_accrues_and_appends() {
        let g = preset::owl322_graph();
        let mut h = in_phase(3, 10);
        g.advance(&mut h, p(3), 1).unwrap();
        assert_eq!((h.current(), h.current_duration()), (p(3), 11));
        g.advance(&mut h, p(1), 1).unwrap();
        assert_eq!((h.current(), h.current_duration()), (p(1), 1));
        assert_eq!(h.previous(), Some(p(3)));
        let replay: Vec<_> = h.entries().collect();
        assert_eq!(replay, vec![(p(1), 7), (p(3), 11), (p(1), 1)]);
    }

    #[test]
    fn advance_rejects_non_edge() {
        let g = preset::owl322_graph();
        let mut h = in_phase(3, 30);
        let err = g.advance(&mut h, p(7), 1).unwrap_err();
        assert_eq!(err, GraphError::IllegalTransition { from: p(3), to: p(7), duration_s: 30 });
        assert_eq!(h.current(), p(3));
    }

    #[test]
    fn history_ring_keeps_newest() {
        let mut h = PhaseHistory::with_capacity(p(1), 3);
        for (i, ph) in [2, 1, 3, 1].into_iter().enumerate() {
            h.record(p(ph), i as Seconds + 1);
        }
        assert_eq!(h.entries().collect::<Vec<_>>(), vec![(p(1), 2), (p(3), 3), (p(1), 4)]);
    }

    #[test]
    fn rejects_disconnected_graph() {
        let model = preset::owl322_model();
        let mut edges = preset::owl322_config().edges;
        edges.retain(|e| e.to != p(8));
        assert!(matches!(PhaseGraph::new(&model, &edges), Err(GraphError::Validation(_))));
    }

    #[test]
    fn rejects_unleavable_phase() {
        let model = preset::owl322_model();
        let mut edges = preset::owl322_config().edges;
        for e in edges.iter_mut().filter(|e| e.from == p(1)) {
            e.min_dwell_source_s = 31;
        }
        assert!(matches!(PhaseGraph::new(&model, &edges), Err(GraphError::Validation(_))));
    }

    #[test]
    fn mask_bit_helpers() {
        let mut m = PhaseMask::empty(8);
        m.set(p(3), true);
        m.set(p(6), true);
        assert_eq!(m.lowest(), Some(p(3)));
        assert_eq!(m.count(), 2);
        assert_eq!(format!("{m:?}"), "[0,0,1,0,0,1,0,0]");
        assert!(!m.get(p(9)));
        assert_eq!(PhaseMask::full(8).count(), 8);
        assert_eq!(PhaseMask::full(64).count(), 64);
    }
}
