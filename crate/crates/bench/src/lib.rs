//! Inputs shared by the benchmarks in `benches/`.

use mvg_core::{parse_dataset, HybridDocument};

const OVERFIT: &str = include_str!("../../core/tests/fixtures/overfit.json");

/// The 32-question fixture the overfit tests train on.
pub fn overfit_fixture() -> Vec<HybridDocument> {
    parse_dataset(OVERFIT.as_bytes()).expect("bundled fixture parses")
}
