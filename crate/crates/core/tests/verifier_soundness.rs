//! Randomized soundness check of the R-DTCBF verifier against a dense grid.

mod common;
#[path = "suites/soundness.rs"]
mod soundness;

#[test]
fn no_unsound_verified_result_on_random_instances() {
    soundness::no_unsound_verified_result_on_random_instances();
}
