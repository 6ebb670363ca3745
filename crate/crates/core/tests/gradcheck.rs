mod support;

use irag_core::Stage;
use support::gradcheck::{worst_error, MAX_REL};

fn check(stage: Stage) {
    let (rel, at) = worst_error(stage);
    println!("{stage:?}: worst relative error {rel:.3e} at {at}");
    assert!(rel < MAX_REL, "{stage:?}: {at}");
}

#[test]
fn warmup_joint_loss_gradients() {
    check(Stage::Warmup);
}

#[test]
fn distill_joint_loss_gradients() {
    check(Stage::SelfDistill);
}
