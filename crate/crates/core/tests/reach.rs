mod common;

use common::{bfs_reach, random_operators};
use mcg_core::agent::{TrainConfig, Trainer};
use mcg_core::envsim::{make_lockbox, state_from_index, Action, EnvState};
use mcg_core::numkit::RandomSource;
use mcg_core::reach::{
    build_from_dynamics, build_operators, decode, encode, feasible_interventions, reachable_set, OneHotState,
    DEFAULT_STATE_CAP,
};
use mcg_core::worldmodel::{ModelConfig, WorldModel};
use proptest::prelude::*;

fn swap_case() -> mcg_core::reach::ReachOperators {
    build_from_dynamics(
        &[2, 2],
        &[0],
        |s| vec![EnvState(vec![s.0[1], s.0[0]])],
        DEFAULT_STATE_CAP,
    )
    .unwrap()
}

#[test]
fn two_variable_case_cycles() {
    let ops = swap_case();
    let z0 = encode(&EnvState(vec![0, 0]), &[2, 2]).unwrap();
    assert_eq!(z0.to_vector(), vec![1, 0, 0, 0]);
    let r = reachable_set(&ops, z0, 1);
    assert_eq!(r.into_iter().collect::<Vec<_>>(), vec![(0, 0), (2, 1)]);
    let r = reachable_set(&ops, z0, 4);
    assert_eq!(r.into_iter().collect::<Vec<_>>(), vec![(0, 0), (1, 2), (2, 1), (3, 2)]);
    let f = feasible_interventions(&ops, z0, 4);
    assert_eq!(f.into_iter().collect::<Vec<_>>(), vec![(0, 0), (1, 0), (2, 1), (3, 1)]);
}

#[test]
fn encode_decode_round_trip() {
    let cards = [3, 2, 2];
    for idx in 0..12 {
        let s = state_from_index(idx, &cards);
        let z = encode(&s, &cards).unwrap();
        assert_eq!(z.index, idx);
        assert_eq!(z.to_vector().iter().filter(|&&b| b == 1).count(), 1);
        assert_eq!(decode(z, &cards), s);
    }
}

#[test]
fn reachable_set_matches_bfs() {
    let mut rng = RandomSource::new(1, "reach-oracle");
    for _ in 0..20 {
        let ops = random_operators(200, &mut rng);
        let start = rng.below(ops.size());
        let got = reachable_set(&ops, OneHotState { index: start, size: ops.size() }, ops.size());
        assert_eq!(got, bfs_reach(&ops, start));
    }
}

#[test]
fn full_intervention_reaches_everything_in_one_step() {
    let ops = build_from_dynamics(&[2, 3, 2], &[0, 1, 2], |s| vec![s.clone()], DEFAULT_STATE_CAP).unwrap();
    for row in ops.f_dense() {
        assert!(row.iter().all(|&b| b == 1));
    }
    // Only x1 intervenable: blocks of equal (x2, x3).
    let ops = build_from_dynamics(&[2, 3, 2], &[0], |s| vec![s.clone()], DEFAULT_STATE_CAP).unwrap();
    let f = ops.f_dense();
    for k in 0..12 {
        for i in 0..12 {
            assert_eq!(f[k][i] == 1, k / 2 == i / 2);
        }
    }
}

#[test]
fn environment_operators_hold_intervention_outcomes() {
    let env = make_lockbox(0).unwrap();
    let ops = build_operators(&env, &[1], DEFAULT_STATE_CAP).unwrap();
    // Unlocked, push=0, door=0: do(push=1) opens the door in the same step.
    let from = encode(&EnvState(vec![1, 0, 0]), env.cards()).unwrap().index;
    let opened = encode(&EnvState(vec![1, 1, 1]), env.cards()).unwrap().index;
    let pushed_only = encode(&EnvState(vec![1, 1, 0]), env.cards()).unwrap().index;
    let f = ops.f_dense();
    assert_eq!(f[from][from], 1);
    assert_eq!(f[opened][from], 1);
    assert_eq!(f[pushed_only][from], 0);
    for i in 0..ops.size() {
        assert!(ops.t_dense().iter().any(|row| row[i] == 1), "T column {i} empty");
    }
}

#[test]
fn empty_intervenable_set_makes_feasible_equal_reachable() {
    let env = make_lockbox(0).unwrap();
    let ops = build_operators(&env, &[], DEFAULT_STATE_CAP).unwrap();
    for i in 0..ops.size() {
        let z0 = OneHotState { index: i, size: ops.size() };
        let r: Vec<usize> = reachable_set(&ops, z0, 10).into_keys().collect();
        let f: Vec<usize> = feasible_interventions(&ops, z0, 10).into_keys().collect();
        assert_eq!(r, f);
    }
}

#[test]
fn agent_candidates_are_feasible_at_step_zero() {
    let env = make_lockbox(0).unwrap();
    let intervenable = vec![1, 2];
    let natural = |s: &EnvState| {
        env.next_distribution(s, &Action::Noop, DEFAULT_STATE_CAP)
            .unwrap()
            .into_iter()
            .filter(|(_, pr)| *pr > 0.0)
            .map(|(x, _)| x)
            .collect::<Vec<_>>()
    };
    let ops = build_from_dynamics(env.cards(), &intervenable, natural, DEFAULT_STATE_CAP).unwrap();
    let mut rng = RandomSource::new(0, "cands");
    let model = WorldModel::for_env(&env, ModelConfig::default(), &mut rng).unwrap();
    let config = TrainConfig {
        intervenable: Some(intervenable),
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(&env, &model, config, &rng).unwrap();
    for idx in 0..env.state_count() {
        let s = state_from_index(idx, env.cards());
        let z0 = encode(&s, env.cards()).unwrap();
        let feasible = feasible_interventions(&ops, z0, 0);
        for a in trainer.candidates() {
            if let Action::Do(spec) = a {
                let mut t = s.clone();
                t.0[spec.target] = spec.value;
                let k = encode(&t, env.cards()).unwrap().index;
                assert!(feasible.contains_key(&k), "{a:?} from {s:?}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reach_sets_grow_with_k(seed in 0u64..10_000) {
        let mut rng = RandomSource::new(seed, "mono");
        let ops = random_operators(64, &mut rng);
        let z0 = OneHotState { index: rng.below(ops.size()), size: ops.size() };
        let mut prev = 0;
        for k in 0..6 {
            let r = reachable_set(&ops, z0, k);
            prop_assert!(r.len() >= prev);
            prev = r.len();
        }
        // Fixpoint within N cycles.
        prop_assert_eq!(reachable_set(&ops, z0, ops.size()), reachable_set(&ops, z0, ops.size() + 5));
    }

    #[test]
    fn every_encoding_is_one_hot(cards in proptest::collection::vec(1usize..5, 1..5), seed in 0u64..1000) {
        let mut rng = RandomSource::new(seed, "onehot");
        let s = EnvState(cards.iter().map(|&c| rng.below(c)).collect());
        let z = encode(&s, &cards).unwrap();
        prop_assert_eq!(z.to_vector().iter().map(|&b| b as usize).sum::<usize>(), 1);
        prop_assert_eq!(decode(z, &cards), s);
    }
}
