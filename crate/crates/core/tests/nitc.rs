mod common;

use common::{nitc_oracle, rng};
use nevlab::objectives::nitc_loss;
use nevlab::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn loss(s: &[Vec<f64>], omega: &[f64], strict: bool) -> f64 {
    let b = s.len();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::matrix(b, b, s.concat()).unwrap());
    let l = nitc_loss(&mut tape, v, omega, strict).unwrap();
    tape.value(l).item()
}

fn similarity(b: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-4.0..4.0f64, b), b)
}

#[test]
fn zero_rates_give_exactly_zero() {
    let mut r = rng(1);
    for _ in 0..50 {
        let b = r.random_range(2..8);
        let s: Vec<Vec<f64>> = (0..b).map(|_| (0..b).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        assert_eq!(loss(&s, &vec![0.0; b], false), 0.0);
    }
}

#[test]
fn half_rate_on_equal_pair_is_ln2() {
    for v in [-3.0, 0.0, 0.7, 12.0] {
        let got = loss(&[vec![v, v], vec![v, v]], &[0.5, 0.5], false);
        assert!((got - std::f64::consts::LN_2).abs() <= 1e-12, "{got}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_closed_form(
        s in (2usize..6).prop_flat_map(similarity),
        strict in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let omega: Vec<f64> = (0..s.len()).map(|_| r.random_range(0.0..0.95)).collect();
        let want = nitc_oracle(&s, &omega, strict);
        let got = loss(&s, &omega, strict);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn non_decreasing_in_each_rate(
        s in (2usize..6).prop_flat_map(similarity),
        strict in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let b = s.len();
        let omega: Vec<f64> = (0..b).map(|_| r.random_range(0.0..0.9)).collect();
        let k = r.random_range(0..b);
        let mut raised = omega.clone();
        raised[k] = r.random_range(omega[k]..0.95);
        prop_assert!(loss(&s, &raised, strict) >= loss(&s, &omega, strict) - 1e-12);
    }
}
