use proptest::prelude::*;
use syscall_novelty::encode::{encode_numeric, NumericEncoder};

// Reference values from a 50-digit evaluation of
// sin/cos(x * 10^(-6 i / d)) for d = 8.
const X: f64 = 123_456.789;
const EXPECTED: [f64; 8] = [
    -0.998_664_082_343_447_1,
    0.051_672_532_714_399_77,
    0.815_278_457_897_552_9,
    -0.579_069_111_668_191_2,
    -0.804_406_347_613_395_3,
    -0.594_079_479_463_209_1,
    -0.690_697_975_442_283_9,
    -0.723_143_351_431_740_9,
];

#[test]
fn frozen_values_at_eight_dimensions() {
    let v = encode_numeric(X, &NumericEncoder::new(8).unwrap()).unwrap();
    for (got, want) in v.iter().zip(EXPECTED) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn terabyte_scale_argument_is_reduced_correctly() {
    // The first pair has unit frequency, so the angle is exactly 1e12.
    let v = encode_numeric(1e12, &NumericEncoder::new(2).unwrap()).unwrap();
    assert!((v[0] - -0.611_238_702_376_889_5).abs() < 1e-12);
    assert!((v[1] - 0.791_446_301_852_890_3).abs() < 1e-12);
}

proptest! {
    #[test]
    fn components_are_bounded(x in 0.0f64..1e12, half in 1usize..40) {
        let v = encode_numeric(x, &NumericEncoder::new(2 * half).unwrap()).unwrap();
        prop_assert_eq!(v.len(), 2 * half);
        for pair in v.chunks(2) {
            prop_assert!(pair.iter().all(|c| c.is_finite() && c.abs() <= 1.0));
            prop_assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distinct_small_values_are_distinguishable(a in 0u64..100_000, b in 0u64..100_000) {
        prop_assume!(a != b);
        let enc = NumericEncoder::new(32).unwrap();
        prop_assert_ne!(enc.encode(a as f64).unwrap(), enc.encode(b as f64).unwrap());
    }
}
