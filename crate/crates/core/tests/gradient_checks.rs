mod common;

use std::collections::BTreeMap;

use common::grad::{cross_attention_errors, full_model_errors, mcln_errors, memory_update_errors, TOL};

fn assert_all_below(errors: &BTreeMap<String, f64>) {
    assert!(!errors.is_empty());
    for (name, e) in errors {
        assert!(*e < TOL, "{name}: relative error {e:e}");
    }
}

#[test]
fn mcln_gradients() {
    let errors = mcln_errors();
    assert!(errors.contains_key("n.delta_gamma.weight"));
    assert_all_below(&errors);
}

#[test]
fn cross_attention_gradients() {
    let errors = cross_attention_errors();
    assert_eq!(errors.len(), 12);
    assert_all_below(&errors);
}

#[test]
fn memory_update_gradients() {
    let errors = memory_update_errors();
    assert!(errors.contains_key("memory.gate_token.weight") && errors.contains_key("memory.gate_memory.weight"));
    assert_all_below(&errors);
}

#[test]
fn full_model_gradients() {
    let errors = full_model_errors();
    for group in ["memory.gate_token.weight", "fusion.image_to_text.q.weight", "visual.projection.weight"] {
        // an exact 0 would mean both probed gradients vanished
        assert!(errors.get(group).is_some_and(|e| *e > 0.0), "{group} received no gradient");
    }
    assert!(errors.keys().any(|k| k.contains("delta_gamma")));
    assert_all_below(&errors);
}
