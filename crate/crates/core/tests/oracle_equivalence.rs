mod support;

use support::equivalence::compare_with_oracle;

#[test]
fn metrics_equal_brute_force_over_a_thousand_sessions() {
    let (sessions, checked) = compare_with_oracle(1_000);
    assert!(sessions >= 1_000 && checked > 1_000);
}
