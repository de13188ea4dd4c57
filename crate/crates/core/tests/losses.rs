mod common;

use common::*;

#[test]
fn examples_and_bounds() {
    let detail = loss_criterion().unwrap();
    assert!(detail.contains("examples"));
}

#[test]
fn parameter_counts_are_exact() {
    parameter_criterion().unwrap();
}

#[test]
fn multiadds_within_one_percent() {
    multiadds_criterion().unwrap();
}
