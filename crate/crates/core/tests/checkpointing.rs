mod common;

use axtrain::graph::{Graph, Pointwise};
use axtrain::model::KernelMode;
use axtrain::proxy::ScAct;
use common::ckpt::*;
use std::sync::Arc;

#[test]
fn checkpointed_chain_gradients_are_bit_identical_and_cheaper() {
    let e = chain_equivalence(100);
    assert!(e.identical);
    assert!(e.always_smaller, "with {} vs without {}", e.bytes_with, e.bytes_without);
}

#[test]
fn checkpointed_injection_step_matches_plain_step() {
    for method in [KernelMode::Sc, KernelMode::ApproxMult, KernelMode::Analog] {
        let (with, without, same) = injection_step_equivalence(method);
        assert!(same, "{method:?}");
        if method == KernelMode::Sc {
            assert!(with < without, "{with} vs {without}");
        } else {
            assert!(with <= without, "{method:?}: {with} vs {without}");
        }
    }
}

#[test]
fn recompute_overhead_is_small() {
    let r = recompute_overhead(KernelMode::Sc, 3, 2);
    assert!(r <= 1.10, "checkpointed / plain = {r}");
}

#[test]
fn chain_validation() {
    let mut g = Graph::new();
    let a = g.param(axtrain::Tensor::full(&[3], 1.0));
    assert!(g.checkpointed_apply(vec![], &[a]).is_err());
    let sc: Pointwise = Arc::new(ScAct { scale: 1.0 });
    assert!(g.checkpointed_apply(vec![sc.clone()], &[a]).is_err(), "arity 2 with one input");
    assert!(g.checkpointed_apply(vec![sc.clone(), sc], &[a, a]).is_err(), "binary after the first");
}
