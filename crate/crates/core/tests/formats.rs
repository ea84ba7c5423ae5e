mod common;

use common::{e4m3_oracle, e4m3_value, fp4_half_gap, fp4_oracle, fp4_value};
use mixquant::formats::{e2m1_decode, e4m3_decode, pi_e4m3, pi_fp4, Fp4Code, Fp8E4M3Code};
use proptest::prelude::*;

fn finite_f32() -> impl Strategy<Value = f32> {
    prop_oneof![
        -8.0f32..8.0,
        -1e3f32..1e3,
        any::<f32>().prop_filter("finite", |x| x.is_finite()),
    ]
}

#[test]
fn decoders_agree_with_field_oracles() {
    for bits in 0..16u8 {
        assert_eq!(f64::from(e2m1_decode(Fp4Code::from_bits(bits))), fp4_value(bits));
    }
    for bits in 0..=255u8 {
        let ours = e4m3_decode(Fp8E4M3Code::from_bits(bits)).ok().map(f64::from);
        assert_eq!(ours, e4m3_value(bits), "code {bits:#04x}");
    }
}

#[test]
fn every_midpoint_and_grid_point() {
    let grid = common::FP4_GRID;
    for w in grid.windows(2) {
        for x in [w[0], (w[0] + w[1]) / 2.0, w[1]] {
            for s in [1.0, -1.0] {
                let x = (s * x) as f32;
                assert_eq!(pi_fp4(x).unwrap().bits(), fp4_oracle(x), "x = {x}");
            }
        }
    }
}

#[test]
fn e4m3_midpoints_follow_oracle() {
    let finite: Vec<f64> = (0u8..0x7f).filter_map(e4m3_value).collect();
    for w in finite.windows(2) {
        let mid = ((w[0] + w[1]) / 2.0) as f32;
        for x in [mid, -mid, mid.next_up(), mid.next_down()] {
            assert_eq!(pi_e4m3(x).unwrap().bits(), e4m3_oracle(x), "x = {x}");
        }
    }
}

#[test]
fn non_finite_inputs_are_rejected() {
    for x in [f32::NAN, f32::INFINITY, f32::NEG_INFINITY] {
        assert!(pi_fp4(x).is_err());
        assert!(pi_e4m3(x).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4096))]

    #[test]
    fn fp4_matches_exhaustive_oracle(x in finite_f32()) {
        prop_assert_eq!(pi_fp4(x).unwrap().bits(), fp4_oracle(x));
    }

    #[test]
    fn e4m3_matches_exhaustive_oracle(x in finite_f32()) {
        prop_assert_eq!(pi_e4m3(x).unwrap().bits(), e4m3_oracle(x));
    }

    #[test]
    fn fp4_monotone(a in finite_f32(), b in finite_f32()) {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(pi_fp4(x).unwrap().decode() <= pi_fp4(y).unwrap().decode());
    }

    #[test]
    fn e4m3_monotone(a in finite_f32(), b in finite_f32()) {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(pi_e4m3(x).unwrap().decode().unwrap() <= pi_e4m3(y).unwrap().decode().unwrap());
    }

    #[test]
    fn sign_symmetry(x in finite_f32()) {
        prop_assert_eq!(pi_fp4(-x).unwrap().decode(), -pi_fp4(x).unwrap().decode());
        prop_assert_eq!(pi_e4m3(-x).unwrap().decode().unwrap(), -pi_e4m3(x).unwrap().decode().unwrap());
    }

    #[test]
    fn nearest_point(x in finite_f32()) {
        let xc = f64::from(x).clamp(-6.0, 6.0);
        let got = (xc - f64::from(pi_fp4(x).unwrap().decode())).abs();
        for bits in 0..16u8 {
            prop_assert!(got <= (xc - fp4_value(bits)).abs());
        }
    }

    #[test]
    fn half_gap_bound(x in -6.0f32..=6.0) {
        let err = (f64::from(x) - f64::from(pi_fp4(x).unwrap().decode())).abs();
        prop_assert!(err <= fp4_half_gap(f64::from(x)));
        prop_assert!(err <= 1.0);
    }
}
