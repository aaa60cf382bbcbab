use std::path::Path;

use cas_core::curricula::{load_gm_file, synthetic_class_fixture};

#[test]
fn checked_in_fixture_matches_generator() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic_class_seed7.json");
    let stored = load_gm_file(&path).unwrap();
    assert_eq!(stored, synthetic_class_fixture(7));
}
