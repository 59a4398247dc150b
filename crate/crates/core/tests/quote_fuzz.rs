use atlas_core::scenario::attacks::{flip_quote_bit, fuzz_client_quote, QuoteField};
use atlas_core::scenario::Deployment;

#[test]
fn ten_thousand_single_bit_flips_are_all_rejected() {
    let dep = Deployment::new(2024).unwrap();
    let out = fuzz_client_quote(&dep, 10_000, 7);
    assert!(out.baseline_accepted);
    assert_eq!(out.trials, 10_000);
    assert_eq!(out.accepted, 0);
}

#[test]
fn every_bit_of_every_field_matters() {
    let dep = Deployment::new(5).unwrap();
    let q = dep.client.enclave().quote(&[9; 32]);
    for (field, bits) in [
        (QuoteField::Register, 512),
        (QuoteField::ReportData, 512),
        (QuoteField::PlatformKeyId, 256),
        (QuoteField::PlatformSignature, 512),
        (QuoteField::IssuedAt, 63),
    ] {
        for bit in 0..bits {
            assert_ne!(flip_quote_bit(&q, field, bit), q, "{field:?} {bit}");
        }
    }
}
