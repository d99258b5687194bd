//! Acceptance suite. Each test prints one PASS/FAIL line for its criterion.
//!
//! The desk-scale training criteria share one trained artifact set, built
//! lazily on first use; run with `--nocapture` to watch progress.

use iresnet_core::verify;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "[{}] {} -- {}",
        if pass { "PASS" } else { "FAIL" },
        criterion,
        detail
    );
}

#[test]
fn c1_gradient_suite() {
    let outcomes = verify::gradient_suite(10, 0xA11CE);
    let mut all = true;
    for o in &outcomes {
        report(&format!("criterion 1: {}", o.name), o.pass, &o.detail);
        all &= o.pass;
    }
    assert!(all, "gradient suite had failures");
}

#[test]
fn c2_oracle_equivalence() {
    let outcomes = verify::oracle_suite(40, 0xB0B);
    let mut all = true;
    for o in &outcomes {
        report(&format!("criterion 2: {}", o.name), o.pass, &o.detail);
        all &= o.pass;
    }
    assert!(all, "oracle equivalence had failures");
}

#[test]
fn conv_deconv_adjointness() {
    let outcomes = verify::adjointness_suite(25, 0xADA);
    for o in &outcomes {
        report(&o.name, o.pass, &o.detail);
        assert!(o.pass, "{}: {}", o.name, o.detail);
    }
}
