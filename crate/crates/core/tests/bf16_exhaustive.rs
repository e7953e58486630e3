use depthflow_core::bf16::{
    measured_roundtrip_error, quantize, round_to_bf16, ulp_at, Bf16, StepModel,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every finite, non-subnormal positive encoding in increasing order.
fn positive_table() -> Vec<(f64, u16)> {
    let mut t: Vec<(f64, u16)> = (0u16..0x7f80)
        .filter(|b| *b == 0 || b >> 7 != 0)
        .map(|b| (Bf16::from_bits(b).to_f64(), b))
        .collect();
    t.sort_by(|a, b| a.0.total_cmp(&b.0));
    t
}

/// Brute-force nearest encoding with ties going to the even pattern.
fn oracle(table: &[(f64, u16)], x: f64) -> u16 {
    let sign = if x.is_sign_negative() { 0x8000 } else { 0 };
    let a = x.abs();
    let i = table.partition_point(|(v, _)| *v <= a);
    let lo = table[i - 1];
    let Some(&hi) = table.get(i) else {
        return sign | lo.1;
    };
    let (dl, dh) = (a - lo.0, hi.0 - a);
    let pick = if dl < dh {
        lo.1
    } else if dh < dl {
        hi.1
    } else if lo.1.is_multiple_of(2) {
        lo.1
    } else {
        hi.1
    };
    sign | pick
}

#[test]
fn every_encoding_round_trips() {
    let mut checked = 0;
    for bits in 0..=u16::MAX {
        let b = Bf16::from_bits(bits);
        let subnormal = b.exponent() == 0 && b.fraction() != 0;
        let v = b.to_f64();
        let r = round_to_bf16(v);
        if !b.is_finite() || subnormal {
            assert!(r.is_err(), "{b:?} should be rejected");
        } else {
            assert_eq!(r.unwrap(), b, "{b:?}");
            checked += 1;
        }
    }
    // 2 zeros + 2 * 254 exponents * 128 fractions.
    assert_eq!(checked, 2 + 2 * 254 * 128);
}

#[test]
fn midpoints_tie_to_even_and_neighbours_round_correctly() {
    let table = positive_table();
    for w in table.windows(2).skip(1) {
        let ((a, ab), (b, bb)) = (w[0], w[1]);
        let mid = a + (b - a) / 2.0;
        let even = if ab % 2 == 0 { ab } else { bb };
        assert_eq!(
            round_to_bf16(mid).unwrap().to_bits(),
            even,
            "tie between {a} and {b}"
        );
        assert_eq!(round_to_bf16(-mid).unwrap().to_bits(), even | 0x8000);
        let below = f64::from_bits(mid.to_bits() - 1);
        let above = f64::from_bits(mid.to_bits() + 1);
        assert_eq!(round_to_bf16(below).unwrap().to_bits(), ab);
        if bb < 0x7f80 {
            assert_eq!(round_to_bf16(above).unwrap().to_bits(), bb);
        }
    }
}

#[test]
fn million_values_in_upper_binade() {
    let table = positive_table();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1_000_000 {
        let x: f64 = rng.random_range(0.5..=1.0);
        let b = round_to_bf16(x).unwrap();
        assert_eq!(b.to_bits(), oracle(&table, x), "{x}");
        worst = worst.max(measured_roundtrip_error(x).unwrap());
    }
    assert!(worst <= StepModel::ROUND_TO_NEAREST.delta_v());
    assert!(worst <= StepModel::WORST_CASE.delta_v());
    // The bound is nearly attained.
    assert!(worst > 0.99 * StepModel::ROUND_TO_NEAREST.delta_v());
}

#[test]
fn spacing_in_upper_binade_is_one_256th() {
    assert_eq!(ulp_at(0.5).unwrap(), 1.0 / 256.0);
    assert_eq!(ulp_at(0.999).unwrap(), 1.0 / 256.0);
    assert_eq!(ulp_at(1.0).unwrap(), 1.0 / 128.0);
    assert_eq!(quantize(1.0 + 1.0 / 256.0).unwrap(), 1.0);
}

proptest! {
    #[test]
    fn matches_oracle_across_magnitudes(m in 1.0f64..2.0, e in -120i32..120, neg in any::<bool>()) {
        let table = positive_table();
        let x = if neg { -m } else { m } * 2f64.powi(e);
        prop_assert_eq!(round_to_bf16(x).unwrap().to_bits(), oracle(&table, x));
    }

    #[test]
    fn relative_error_is_at_most_half_ulp(m in -2.0f64..2.0, e in -100i32..100) {
        prop_assume!(m.abs() >= 1.0);
        let x = m * 2f64.powi(e);
        let q = quantize(x).unwrap();
        prop_assert!((x - q).abs() <= ulp_at(x).unwrap() / 2.0 * (1.0 + 1e-12));
    }

    #[test]
    fn rounding_is_monotone(a in -1e10f64..1e10, b in -1e10f64..1e10) {
        prop_assume!(a.abs() > 1e-30 && b.abs() > 1e-30);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize(lo).unwrap() <= quantize(hi).unwrap());
    }
}
