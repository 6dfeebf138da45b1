mod common;

use common::{loss_case, mlp_case, operator_chain_case, FdReport, LossKind};
use mcg_core::numkit::{
    bernoulli_entropy, gumbel_bernoulli, sample_gumbel_bernoulli, softmax_rows, Adam, RandomSource, Tape,
    Tensor, PROB_EPS,
};
use proptest::prelude::*;

fn assert_fd(rep: &FdReport, what: &str) {
    assert!(rep.checked > 0, "{what}: nothing checked");
    assert!(rep.max_rel < 1e-4, "{what}: max relative error {:e}", rep.max_rel);
}

#[test]
fn operator_chain_matches_finite_differences() {
    let mut rng = RandomSource::new(11, "fd-ops");
    for _ in 0..20 {
        assert_fd(&operator_chain_case(&mut rng), "operators");
        assert_fd(&mlp_case(&mut rng), "mlp");
    }
}

#[test]
fn losses_match_finite_differences() {
    let mut rng = RandomSource::new(12, "fd-losses");
    for kind in [LossKind::Mle, LossKind::Sparse, LossKind::Mask, LossKind::Quant] {
        for _ in 0..5 {
            assert_fd(&loss_case(kind, &mut rng), &format!("{kind:?}"));
        }
    }
}

#[test]
fn hard_gumbel_frequencies() {
    let mut rng = RandomSource::new(0, "gumbel");
    for (p, temp) in [(0.5, 0.5), (0.25, 0.01)] {
        let n = 100_000;
        let hits: f64 = (0..n)
            .map(|_| sample_gumbel_bernoulli(p, temp, &mut rng, true).unwrap())
            .sum();
        let mean = hits / n as f64;
        assert!((mean - p).abs() < 0.01, "p={p} t={temp} mean={mean}");
    }
    let ones = (0..10_000)
        .filter(|_| sample_gumbel_bernoulli(1.0, 1.0, &mut rng, true).unwrap() == 1.0)
        .count();
    assert!(ones as f64 >= 0.999 * 10_000.0);
}

#[test]
fn taped_hard_samples_match_the_scalar_sampler() {
    let probs = vec![0.1, 0.5, 0.9];
    let mut a = RandomSource::new(3, "same");
    let mut b = RandomSource::new(3, "same");
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::vector(probs.clone()));
    let h = gumbel_bernoulli(&mut tape, p, 0.7, &mut a, true).unwrap();
    let scalar: Vec<f64> = probs
        .iter()
        .map(|&q| sample_gumbel_bernoulli(q, 0.7, &mut b, true).unwrap())
        .collect();
    assert_eq!(tape.value(h).data(), &scalar[..]);
}

#[test]
fn adam_is_bit_reproducible() {
    let run = || {
        let mut rng = RandomSource::new(5, "adam");
        let mut w = Tensor::vector((0..6).map(|_| rng.normal()).collect());
        let mut adam = Adam::new(1e-2, &[&w]);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let v = tape.leaf(w.clone());
            let t = tape.tanh(v);
            let sq = tape.mul(t, v);
            let l = tape.sum(sq);
            let g = tape.backward(l).unwrap().get(&tape, v);
            adam.step(&mut [&mut w], &[g]);
        }
        w
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn entropy_is_bounded(ps in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
        let t = Tensor::vector(ps.clone());
        let h = bernoulli_entropy(&t);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= ps.len() as f64 * 2f64.ln() + 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(xs in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let s = softmax_rows(&Tensor::matrix(3, 4, xs));
        for r in 0..3 {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn soft_gumbel_stays_inside_the_unit_interval(p in 0.0f64..=1.0, temp in 0.05f64..5.0, seed in 0u64..1000) {
        let mut rng = RandomSource::new(seed, "soft");
        let y = sample_gumbel_bernoulli(p, temp, &mut rng, false).unwrap();
        prop_assert!((0.0..=1.0).contains(&y));
        let h = sample_gumbel_bernoulli(p, temp, &mut rng, true).unwrap();
        prop_assert!(h == 0.0 || h == 1.0);
    }

    #[test]
    fn entropy_clamps_before_the_logarithm(p in prop_oneof![Just(0.0f64), Just(1.0f64)]) {
        let h = bernoulli_entropy(&Tensor::vector(vec![p]));
        prop_assert!(h.is_finite() && h < 20.0 * PROB_EPS);
    }
}
