//! Built-in OWL322-style intersection.
//!
//! Phases and colors follow the published phase table of the OWL322
//! intersection in Lemgo. Conflicts, intergreen times, duration bounds and
//! the phase graph are a reconstruction from the textual description, not
//! the authentic controller data:
//!
//! * west/east vehicles conflict with north/south vehicles and with the
//!   pedestrians crossing the west and east arms (`ped w&e`); north/south
//!   vehicles conflict with `ped n&s`;
//! * vehicle yellow is 3 s, vehicle intergreens 6 s, pedestrian clearance 10 s;
//! * all-red (phase 1) connects both ways to every phase and must be held
//!   6 s before leaving; phases 2-5 and 6-8 are each fully interconnected
//!   with no direct edge between the two blocks; 2 -> 3 needs 10 s in 2.

use crate::intersection::{model_from_config, IntersectionConfig, IntersectionModel};
use crate::phase_graph::PhaseGraph;
use crate::psych::RuleSet;

pub const OWL322_JSON: &str = include_str!("../presets/owl322.json");

pub fn owl322_config() -> IntersectionConfig {
    IntersectionConfig::parse(OWL322_JSON).expect("built-in preset parses")
}

pub fn owl322_model() -> IntersectionModel {
    model_from_config(&owl322_config()).expect("built-in preset is valid")
}

pub fn owl322_graph() -> PhaseGraph {
    let cfg = owl322_config();
    PhaseGraph::new(&owl322_model(), &cfg.edges).expect("built-in graph is valid")
}

pub fn owl322_rules() -> RuleSet {
    RuleSet::new(owl322_config().psych_rules).expect("built-in rules are valid")
}
