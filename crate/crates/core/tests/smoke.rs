mod common;

use padmix::model::Variant;

#[test]
fn no_prior_network_overfits_one_object() {
    let r = common::overfit(Variant::NoPrior, 300, 0.8);
    assert!(r.reached_at.is_some(), "best IoU {:.3} after 300 steps", r.best_iou);
}

#[test]
fn prior_network_overfits_one_object() {
    let r = common::overfit(Variant::Prior, 300, 0.9);
    println!("reached 0.9 at {:?} steps in {:.1}s", r.reached_at, r.seconds);
    assert!(r.reached_at.is_some(), "best IoU {:.3} after 300 steps", r.best_iou);
}
