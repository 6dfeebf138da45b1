use std::collections::BTreeMap;

use mcg_core::envsim::{goal_reward, make_chemical_with, ChemicalVariant, EnvState, Environment, GoalTask};
use mcg_core::harness::{
    eval_downstream, eval_prediction_accuracy, eval_random_policy, misclassification_estimate, run, run_episode,
    summarize_log, ExperimentConfig,
};
use mcg_core::numkit::RandomSource;
use mcg_core::planner::CemConfig;
use mcg_core::worldmodel::{OraclePredictor, UniformPredictor};

fn deterministic(variant: ChemicalVariant, p: usize, c: usize) -> Environment {
    make_chemical_with(variant, p, c, 0, 1.0).unwrap()
}

#[test]
fn chance_level_on_uniform_targets() {
    // Sharpness 1/c makes every table uniform, so every realized value is.
    let env = make_chemical_with(ChemicalVariant::FullFork, 5, 5, 0, 0.2).unwrap();
    let pred = UniformPredictor { cards: env.cards().to_vec() };
    let samples = 2000;
    let mut rng = RandomSource::new(0, "chance");
    let acc = eval_prediction_accuracy(&pred, &env, 1, samples, &mut rng).unwrap();
    let n = (samples * env.p()) as f64;
    let sd = 100.0 * (0.2 * 0.8 / n).sqrt();
    assert!((acc - 20.0).abs() <= 3.0 * sd, "{acc} (3 sd = {})", 3.0 * sd);
}

#[test]
fn oracle_is_perfect_on_a_deterministic_env() {
    let env = deterministic(ChemicalVariant::FullChain, 5, 3);
    let oracle = OraclePredictor { env: env.clone() };
    let mut rng = RandomSource::new(1, "oracle-acc");
    assert_eq!(eval_prediction_accuracy(&oracle, &env, 0, 500, &mut rng).unwrap(), 100.0);
    assert!(eval_prediction_accuracy(&oracle, &env, 0, 0, &mut rng).is_err());
}

/// Best achievable cumulative reward by backward induction over every state.
fn optimum(env: &Environment, start: &EnvState, task: &GoalTask) -> f64 {
    let next = |s: &EnvState, k: usize| -> EnvState {
        let d = env.next_distribution(s, &env.actions()[k], 1 << 16).unwrap();
        assert_eq!(d.len(), 1);
        d[0].0.clone()
    };
    let states: Vec<EnvState> = (0..env.state_count())
        .map(|i| mcg_core::envsim::state_from_index(i, env.cards()))
        .collect();
    let mut value: BTreeMap<Vec<usize>, f64> = states.iter().map(|s| (s.0.clone(), 0.0)).collect();
    for _ in 0..task.horizon {
        let mut v2 = BTreeMap::new();
        for s in &states {
            let best = (0..env.action_count())
                .map(|k| {
                    let x = next(s, k);
                    goal_reward(&x, task) + value[&x.0]
                })
                .fold(f64::NEG_INFINITY, f64::max);
            v2.insert(s.0.clone(), best);
        }
        value = v2;
    }
    value[&start.0]
}

#[test]
fn oracle_planning_matches_exhaustive_search() {
    let env = deterministic(ChemicalVariant::FullChain, 3, 3);
    let oracle = OraclePredictor { env: env.clone() };
    let mut rng = RandomSource::new(2, "exhaustive");
    let (mut got, mut best) = (0.0, 0.0);
    for _ in 0..40 {
        let start = env.corrupt(&env.reset(&mut rng), 1, &mut rng).unwrap();
        let task = GoalTask { target: env.reset(&mut rng), horizon: 8 };
        got += run_episode(&oracle, &env, &start, &task, &CemConfig::default(), &mut rng).unwrap();
        best += optimum(&env, &start, &task);
    }
    assert!(got <= best + 1e-9, "planned {got} above optimum {best}");
    assert!((got - best).abs() <= 0.05 * best.abs(), "planned {got} vs optimum {best}");
}

#[test]
fn planning_beats_random_on_the_chain() {
    let env = deterministic(ChemicalVariant::FullChain, 5, 3);
    let oracle = OraclePredictor { env: env.clone() };
    for seed in 0..5 {
        let planned = eval_downstream(&oracle, &env, &CemConfig::default(), 5, 1, 25, &mut RandomSource::new(seed, "pl")).unwrap();
        let random = eval_random_policy(&env, 5, 1, 25, &mut RandomSource::new(seed, "pl")).unwrap();
        assert!(planned.mean > random.mean, "seed {seed}: {} vs {}", planned.mean, random.mean);
    }
}

#[test]
fn misclassification_examples() {
    let mut rng = RandomSource::new(0, "mis");
    let perfect = misclassification_estimate(&[0.5, 0.5], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1, 1000, &mut rng).unwrap();
    assert_eq!(perfect.approximation, 0.0);
    assert_eq!(perfect.monte_carlo, 0.0);
    let confused = misclassification_estimate(&[0.5, 0.5], &[vec![0.5, 0.5], vec![0.5, 0.5]], 1, 1000, &mut rng).unwrap();
    assert!((confused.approximation - 0.25).abs() < 1e-12);
    // n = 1: the first-order expansion is exact.
    assert!((confused.exact - 0.25).abs() < 1e-12);
    let trials = 200_000;
    let m = misclassification_estimate(&[0.7, 0.3], &[vec![0.9, 0.1], vec![0.2, 0.8]], 3, trials, &mut rng).unwrap();
    assert!((m.monte_carlo - m.exact).abs() <= 3.0 * m.monte_carlo_stderr, "{m:?}");
    assert!(misclassification_estimate(&[0.5], &[vec![1.0]], 1, 1, &mut rng).is_err());
}

#[test]
fn config_errors_name_the_nearest_key() {
    let err = ExperimentConfig::parse("model.codebok_size = 3\nenv.nods = 4\n").unwrap_err();
    let text = err.to_string();
    assert!(text.contains("model.codebok_size") && text.contains("model.codebook_size"), "{text}");
    assert!(text.contains("env.nods") && text.contains("env.nodes"), "{text}");
    assert_eq!(err.0.len(), 2);
    let err = ExperimentConfig::parse("train.steps = many\nmodel.beta = -1\n").unwrap_err();
    assert!(err.0.len() >= 2, "{err}");
    assert!(ExperimentConfig::parse("no equals sign\n").is_err());
}

fn tiny() -> ExperimentConfig {
    ExperimentConfig::parse(
        "run.name = tiny\nseeds = 0,1\nenv.name = lockbox\nmodel.codebook_size = 2\nmodel.hidden = 16\n\
         train.steps = 300\ntrain.lr = 0.001\ntrain.batch = 32\ntrain.report_every = 100\n\
         agent.initial_steps = 100\neval.samples = 50\neval.episodes = 1\neval.horizon = 5\neval.pairs = 50\n\
         baseline.hidden = 16\n",
    )
    .unwrap()
}

#[test]
fn run_artifacts_and_two_pass_summary() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run(&cfg, a.path()).unwrap();
    let second = run(&cfg, b.path()).unwrap();
    let csv_a = std::fs::read(a.path().join("metrics.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.path().join("metrics.csv")).unwrap());
    assert_eq!(first.summary, second.summary);

    let text = String::from_utf8(csv_a).unwrap();
    let again = summarize_log(&text, cfg.train.steps).unwrap();
    assert_eq!(again, first.summary);
    // Independent recomputation of one metric straight from the rows.
    let vals: Vec<f64> = first
        .rows
        .iter()
        .filter(|r| r.metric == "eval.swap_accuracy" && r.step == cfg.train.steps)
        .map(|r| r.value)
        .collect();
    assert_eq!(vals.len(), 2);
    let mean = vals.iter().sum::<f64>() / 2.0;
    assert!((first.summary.get("eval.swap_accuracy").unwrap() - mean).abs() < 1e-12);

    assert!(a.path().join("summary.txt").exists());
    assert!(a.path().join("checkpoints").read_dir().unwrap().count() >= 2);
    assert!(a.path().join("skeletons").read_dir().unwrap().count() >= 1);
}
