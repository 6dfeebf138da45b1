//! Evaluation metrics: OOD prediction accuracy, downstream planning reward,
//! meta-state identifiability and the misclassification estimate.

use std::collections::BTreeSet;

use crate::agent::evaluation_pairs;
use crate::envsim::{goal_reward, Action, EnvError, EnvState, Environment, GoalTask, TransitionRecord};
use crate::metagraph::{match_meta_states, shd, SkeletonMatrix};
use crate::numkit::{Adam, RandomSource};
use crate::planner::{plan, CemConfig, PlanError};
use crate::worldmodel::{DenseModel, ModelError, Predictor, WorldModel};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("at least one evaluation sample is required")]
    NoSamples,
    #[error("invalid simplex input: {0}")]
    Simplex(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Percentage of nodes whose modal prediction matches the realized next
/// value, over transitions from states with `n_noise` corrupted nodes.
pub fn eval_prediction_accuracy<P: Predictor + ?Sized>(
    model: &P,
    env: &Environment,
    n_noise: usize,
    samples: usize,
    rng: &mut RandomSource,
) -> Result<f64, EvalError> {
    if samples == 0 {
        return Err(EvalError::NoSamples);
    }
    let mut hits = 0usize;
    for _ in 0..samples {
        let s = env.reset(rng);
        let s = env.corrupt(&s, n_noise, rng)?;
        let a = env.actions()[rng.below(env.action_count())];
        let next = env.step(&s, &a, rng)?.next_state;
        let pred = model.modal_next(&s, &a);
        hits += pred.0.iter().zip(&next.0).filter(|(x, y)| x == y).count();
    }
    Ok(100.0 * hits as f64 / (samples * env.p()) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamResult {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

/// One receding-horizon episode toward `task`; returns the summed goal
/// reward over the horizon.
pub fn run_episode<P: Predictor + ?Sized>(
    model: &P,
    env: &Environment,
    start: &EnvState,
    task: &GoalTask,
    cem: &CemConfig,
    rng: &mut RandomSource,
) -> Result<f64, EvalError> {
    let mut s = start.clone();
    let mut total = 0.0;
    for _ in 0..task.horizon {
        let a = plan(model, &s, task, env.actions(), cem, rng)?.first();
        s = env.step(&s, &a, rng)?.next_state;
        total += goal_reward(&s, task);
    }
    Ok(total)
}

/// Goal-matching episodes from corrupted start states toward goals drawn
/// from the environment's own state distribution.
pub fn eval_downstream<P: Predictor + ?Sized>(
    model: &P,
    env: &Environment,
    cem: &CemConfig,
    episodes: usize,
    n_noise: usize,
    horizon: usize,
    rng: &mut RandomSource,
) -> Result<DownstreamResult, EvalError> {
    let mut rewards = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let start = env.corrupt(&env.reset(rng), n_noise, rng)?;
        let goal = env.reset(rng);
        let task = GoalTask { target: goal, horizon };
        rewards.push(run_episode(model, env, &start, &task, cem, rng)?);
    }
    let (mean, std) = mean_std(&rewards);
    Ok(DownstreamResult { rewards, mean, std })
}

/// Uniformly random interventions for the same episodes.
pub fn eval_random_policy(
    env: &Environment,
    episodes: usize,
    n_noise: usize,
    horizon: usize,
    rng: &mut RandomSource,
) -> Result<DownstreamResult, EvalError> {
    let mut rewards = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = env.corrupt(&env.reset(rng), n_noise, rng)?;
        let task = GoalTask { target: env.reset(rng), horizon };
        let mut total = 0.0;
        for _ in 0..horizon {
            let a = env.actions()[rng.below(env.action_count())];
            s = env.step(&s, &a, rng)?.next_state;
            total += goal_reward(&s, &task);
        }
        rewards.push(total);
    }
    let (mean, std) = mean_std(&rewards);
    Ok(DownstreamResult { rewards, mean, std })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identifiability {
    /// Best one-to-one relabeling accuracy.
    pub swap_accuracy: f64,
    /// Majority many-to-one relabeling accuracy.
    pub observational_accuracy: f64,
    pub codes_in_use: Vec<usize>,
    pub distinct_skeletons: usize,
    /// SHD of each code in use against the subgraph of its majority meta state.
    pub shd_per_code: Vec<usize>,
}

/// Codes holding under this share of held-out assignments are ignored.
pub const MIN_CODE_SHARE: f64 = 0.01;

pub fn eval_identifiability(
    model: &WorldModel,
    env: &Environment,
    samples: usize,
    rng: &mut RandomSource,
) -> Result<Identifiability, EvalError> {
    if samples == 0 {
        return Err(EvalError::NoSamples);
    }
    let pairs = evaluation_pairs(env, samples, rng);
    let codes: Vec<usize> = pairs.iter().map(|(s, a, _)| model.code_of(s, a)).collect();
    let truth: Vec<usize> = pairs.iter().map(|(_, _, m)| *m).collect();
    let distinct = |v: &[usize]| v.iter().collect::<BTreeSet<_>>().len();
    // One-to-one in both directions: inject the smaller label set.
    let swap = if distinct(&codes) <= distinct(&truth) {
        match_meta_states(&codes, &truth)
    } else {
        match_meta_states(&truth, &codes)
    }
    .map_err(|e| EvalError::Simplex(e.to_string()))?;
    let observational = {
        let mut conf = vec![vec![0usize; env.truth().meta_count()]; model.k()];
        for (&c, &m) in codes.iter().zip(&truth) {
            conf[c][m] += 1;
        }
        conf.iter().map(|r| *r.iter().max().unwrap()).sum::<usize>() as f64 / samples as f64
    };
    let plain: Vec<(EnvState, Action)> = pairs.iter().map(|(s, a, _)| (s.clone(), *a)).collect();
    let in_use = model.codes_in_use(&plain, MIN_CODE_SHARE);
    let skeletons: BTreeSet<String> = in_use.iter().map(|&u| model.skeleton(u).to_text()).collect();
    let mut shd_per_code = Vec::new();
    for &u in &in_use {
        let mut votes = vec![0usize; env.truth().meta_count()];
        for (&c, &m) in codes.iter().zip(&truth) {
            if c == u {
                votes[m] += 1;
            }
        }
        let m = (0..votes.len()).max_by_key(|&m| (votes[m], std::cmp::Reverse(m))).unwrap();
        shd_per_code.push(shd(&model.skeleton(u), &env.truth().subgraphs[m]).map(|r| r.shd).unwrap_or(usize::MAX));
    }
    Ok(Identifiability {
        swap_accuracy: swap.accuracy,
        observational_accuracy: observational,
        distinct_skeletons: skeletons.len(),
        codes_in_use: in_use,
        shd_per_code,
    })
}

/// Per true meta state, SHD of the skeleton decoded for its majority code.
pub fn shd_per_context(model: &WorldModel, env: &Environment, samples: usize, rng: &mut RandomSource) -> Vec<usize> {
    let pairs = evaluation_pairs(env, samples, rng);
    let metas = env.truth().meta_count();
    let mut votes = vec![vec![0usize; model.k()]; metas];
    for (s, a, m) in &pairs {
        votes[*m][model.code_of(s, a)] += 1;
    }
    (0..metas)
        .map(|m| {
            let u = (0..model.k()).max_by_key(|&u| (votes[m][u], std::cmp::Reverse(u))).unwrap();
            skeleton_shd(&model.skeleton(u), &env.truth().subgraphs[m])
        })
        .collect()
}

fn skeleton_shd(a: &SkeletonMatrix, b: &SkeletonMatrix) -> usize {
    shd(a, b).map(|r| r.shd).unwrap_or(usize::MAX)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Misclassification {
    pub approximation: f64,
    pub exact: f64,
    pub monte_carlo: f64,
    pub monte_carlo_stderr: f64,
}

/// Misclassification probability of a code assignment with prior `mu` over
/// true states and per-state code probabilities `p_table[u][k]`, for `n`
/// further samples.
///
/// The Monte Carlo draw takes one reference sample and `n` further samples;
/// it counts a misclassification when any further sample shares the
/// reference code but not its true state.
pub fn misclassification_estimate(
    mu: &[f64],
    p_table: &[Vec<f64>],
    n: u32,
    trials: usize,
    rng: &mut RandomSource,
) -> Result<Misclassification, EvalError> {
    let tol = 1e-9;
    if mu.is_empty() || mu.len() != p_table.len() {
        return Err(EvalError::Simplex(format!("{} priors for {} table rows", mu.len(), p_table.len())));
    }
    if mu.iter().any(|&x| !(x >= 0.0)) || (mu.iter().sum::<f64>() - 1.0).abs() > tol {
        return Err(EvalError::Simplex(format!("prior {mu:?} is not a distribution")));
    }
    let k = p_table[0].len();
    for (u, row) in p_table.iter().enumerate() {
        if row.len() != k || row.iter().any(|&x| !(x >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > tol {
            return Err(EvalError::Simplex(format!("row {u} {row:?} is not a distribution over {k} codes")));
        }
    }
    let pk: Vec<f64> = (0..k).map(|c| (0..mu.len()).map(|u| mu[u] * p_table[u][c]).sum()).collect();
    let mut exact = 1.0;
    let mut approx = 0.0;
    for c in 0..k {
        approx += pk[c] * pk[c];
        for (u, &m) in mu.iter().enumerate() {
            let joint = m * p_table[u][c];
            exact -= joint * (1.0 - pk[c] + joint).powi(n as i32);
            approx -= joint * joint;
        }
    }
    approx *= n as f64;
    let mut hits = 0usize;
    let joint_weights: Vec<f64> = (0..mu.len())
        .flat_map(|u| (0..k).map(move |c| (u, c)))
        .map(|(u, c)| mu[u] * p_table[u][c])
        .collect();
    for _ in 0..trials {
        let r = rng.categorical(&joint_weights);
        let (u0, c0) = (r / k, r % k);
        let mut mixed = false;
        for _ in 0..n {
            let s = rng.categorical(&joint_weights);
            if s % k == c0 && s / k != u0 {
                mixed = true;
            }
        }
        hits += mixed as usize;
    }
    let f = hits as f64 / trials.max(1) as f64;
    Ok(Misclassification {
        approximation: approx,
        exact,
        monte_carlo: f,
        monte_carlo_stderr: (f * (1.0 - f) / trials.max(1) as f64).sqrt(),
    })
}

/// Dense baseline trained on uniformly random interventions with the same
/// episode and replay protocol as the agent.
pub fn train_dense(
    env: &Environment,
    hidden: usize,
    steps: u64,
    initial_steps: u64,
    episode_length: u64,
    batch: usize,
    lr: f64,
    rng: &RandomSource,
) -> Result<DenseModel, EvalError> {
    let mut init = rng.derive("dense-init");
    let mut model = DenseModel::new(env.cards(), hidden, &mut init);
    let mut adam: Adam = model.optimizer(lr);
    let mut r_env = rng.derive("dense-env");
    let mut r_batch = rng.derive("dense-batch");
    let mut replay: Vec<TransitionRecord> = Vec::new();
    let mut s = env.reset(&mut r_env);
    for t in 0..steps {
        if t % episode_length.max(1) == 0 {
            s = env.reset(&mut r_env);
        }
        let a = env.actions()[r_env.below(env.action_count())];
        let rec = env.step(&s, &a, &mut r_env)?;
        s = rec.next_state.clone();
        replay.push(rec);
        if t >= initial_steps {
            let idx: Vec<usize> = (0..batch).map(|_| r_batch.below(replay.len())).collect();
            let recs: Vec<&TransitionRecord> = idx.iter().map(|&i| &replay[i]).collect();
            model.train_batch(&recs, &mut adam)?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn approximation_examples() {
        let mut rng = RandomSource::new(0, "mis");
        let perfect = misclassification_estimate(&[0.5, 0.5], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1, 10, &mut rng).unwrap();
        assert_eq!(perfect.approximation, 0.0);
        assert_eq!(perfect.exact, 0.0);
        let confused = misclassification_estimate(&[0.5, 0.5], &[vec![0.5, 0.5], vec![0.5, 0.5]], 1, 10, &mut rng).unwrap();
        assert!((confused.approximation - 0.25).abs() < 1e-12);
    }

    #[test]
    fn invalid_simplex_is_rejected() {
        let mut rng = RandomSource::new(0, "mis");
        assert!(misclassification_estimate(&[0.6, 0.6], &[vec![1.0], vec![1.0]], 1, 1, &mut rng).is_err());
        assert!(misclassification_estimate(&[1.0], &[vec![0.3, 0.3]], 1, 1, &mut rng).is_err());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
