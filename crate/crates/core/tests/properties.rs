//! Property tests over the phase graph, comfort rules, masked distribution
//! and configuration round trips.

use std::sync::Arc;

use proptest::prelude::*;

use safetsc::intersection::{model_from_config, IntersectionConfig, PhaseId};
use safetsc::microsim::{SimConfig, TrafficSim};
use safetsc::phase_graph::{mask_oracle, PhaseGraph, PhaseHistory, PhaseMask};
use safetsc::ppo::{MaskedDistribution, TrainConfig};
use safetsc::preset;
use safetsc::psych::{combine_masks, psych_mask};

/// Walks the preset graph, picking the `choices[i] % count`-th allowed phase
/// at each step.
fn walk(graph: &PhaseGraph, start: usize, choices: &[usize]) -> Vec<PhaseHistory> {
    let mut h = PhaseHistory::new(PhaseId(start));
    let mut out = vec![h.clone()];
    for &c in choices {
        let mask = graph.mask(&h).unwrap();
        let allowed: Vec<PhaseId> = mask.iter().collect();
        graph.advance(&mut h, allowed[c % allowed.len()], 1).unwrap();
        out.push(h.clone());
    }
    out
}

fn mask_strategy(n: usize) -> impl Strategy<Value = PhaseMask> {
    proptest::collection::vec(any::<bool>(), n)
        .prop_filter("at least one allowed action", |b| b.iter().any(|&x| x))
        .prop_map(|b| PhaseMask::from_bools(&b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn graph_masks_never_deadlock_and_match_oracle(start in 1usize..=8, choices in proptest::collection::vec(0usize..64, 1..400)) {
        let graph = preset::owl322_graph();
        for h in walk(&graph, start, &choices) {
            let mask = graph.mask(&h).unwrap();
            prop_assert!(!mask.is_empty());
            prop_assert_eq!(mask.len(), 8);
            prop_assert_eq!(mask.bits(), mask_oracle(&graph, &h).bits());
        }
    }

    #[test]
    fn history_entries_are_well_formed(start in 1usize..=8, choices in proptest::collection::vec(0usize..64, 1..400)) {
        let graph = preset::owl322_graph();
        let h = walk(&graph, start, &choices).pop().unwrap();
        let entries: Vec<_> = h.entries().collect();
        prop_assert!(entries.windows(2).all(|w| w[0].0 != w[1].0));
        prop_assert!(entries[..entries.len() - 1].iter().all(|e| e.1 > 0));
    }

    #[test]
    fn comfort_rules_only_clear_bits(start in 1usize..=8, choices in proptest::collection::vec(0usize..64, 1..300)) {
        let graph = preset::owl322_graph();
        let rules = preset::owl322_rules();
        for h in walk(&graph, start, &choices) {
            let safety = graph.mask(&h).unwrap();
            let comfort = psych_mask(&rules, &h, 8);
            let combined = combine_masks(&safety, &comfort).unwrap();
            prop_assert!(combined.mask.is_subset_of(&safety));
            prop_assert!(!combined.mask.is_empty());
            prop_assert_eq!(combined.comfort_overridden, safety.and(&comfort).is_empty());
        }
    }

    #[test]
    fn masked_probabilities_are_exact(logits in proptest::collection::vec(-1e3f64..1e3, 8), mask in mask_strategy(8)) {
        let d = MaskedDistribution::new(&logits, &mask).unwrap();
        let total: f64 = d.probs().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for i in 0..8 {
            if !mask.get_index(i) {
                prop_assert_eq!(d.prob(i), 0.0);
                prop_assert_eq!(d.log_prob(i), f64::NEG_INFINITY);
            }
        }
        prop_assert!(mask.get_index(d.argmax()));
        let ent = d.entropy();
        prop_assert!(ent >= -1e-12 && ent <= (mask.count() as f64).ln() + 1e-12);
    }

    #[test]
    fn duration_bounds_roundtrip(min in 1u32..10, extra in 0u32..50, yellow in 1u32..5) {
        let mut cfg = preset::owl322_config();
        for b in cfg.duration_bounds_s.values_mut() {
            b.min = min;
            b.max = min + extra;
        }
        cfg.yellow_s = yellow;
        let back = IntersectionConfig::parse(&cfg.to_json()).unwrap();
        prop_assert_eq!(&back, &cfg);
        let model = model_from_config(&back).unwrap();
        prop_assert_eq!(model.to_config().to_json(), model_from_config(&model.to_config()).unwrap().to_config().to_json());
    }

    #[test]
    fn reward_is_never_positive(seed in any::<u64>(), choices in proptest::collection::vec(0usize..64, 300)) {
        let mut sim = TrafficSim::new(
            Arc::new(preset::owl322_model()),
            Arc::new(preset::owl322_graph()),
            None,
            Arc::new(SimConfig::rush_hour(300)),
        ).unwrap();
        let obs = sim.reset(seed).unwrap();
        prop_assert_eq!(obs.len(), sim.observation_len());
        for c in choices {
            let allowed: Vec<PhaseId> = sim.action_mask().iter().collect();
            let r = sim.step(allowed[c % allowed.len()]).unwrap();
            prop_assert!(r.reward <= 0.0);
            let v = r.observation.as_slice();
            prop_assert!(v.iter().all(|x| x.is_finite() && *x >= 0.0));
            let one_hot = &v[18..26];
            prop_assert_eq!(one_hot.iter().sum::<f64>(), 1.0);
            if r.done {
                break;
            }
        }
    }
}

#[test]
fn preset_config_roundtrips() {
    let cfg = preset::owl322_config();
    assert_eq!(IntersectionConfig::parse(&cfg.to_json()).unwrap(), cfg);
    let model = preset::owl322_model();
    assert_eq!(model_from_config(&model.to_config()).unwrap(), model);
    let graph = preset::owl322_graph();
    let again = PhaseGraph::new(&model, &graph.to_edge_configs()).unwrap();
    assert_eq!(again.edges(), graph.edges());
}

#[test]
fn sim_and_train_configs_roundtrip() {
    let sim = SimConfig::rush_hour(1800);
    let back: SimConfig = serde_json::from_str(&serde_json::to_string(&sim).unwrap()).unwrap();
    assert_eq!(back, sim);
    let train = TrainConfig { lr: 1e-4, gae_lambda: 0.9, ..TrainConfig::default() };
    let text = serde_json::to_string(&train).unwrap();
    assert!(text.contains("\"lambda\":0.9"));
    let back: TrainConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, train);
}
