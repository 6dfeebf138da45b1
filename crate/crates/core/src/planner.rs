//! Discrete cross-entropy-method planner over any [`Predictor`].

use crate::envsim::{goal_reward, Action, EnvState, GoalTask};
use crate::numkit::RandomSource;
use crate::worldmodel::Predictor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PlanError {
    #[error("planning length must be at least 1")]
    ZeroHorizon,
    #[error("elite count {elites} must lie in 1..={candidates}")]
    Elites { elites: usize, candidates: usize },
    #[error("no actions to plan over")]
    NoActions,
    #[error("exploration probability must lie in [0, 1], got {0}")]
    Exploration(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CemConfig {
    pub length: usize,
    pub candidates: usize,
    pub elites: usize,
    pub iterations: usize,
    pub exploration: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            length: 3,
            candidates: 64,
            elites: 32,
            iterations: 5,
            exploration: 0.05,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.length == 0 {
            return Err(PlanError::ZeroHorizon);
        }
        if self.elites == 0 || self.elites > self.candidates {
            return Err(PlanError::Elites {
                elites: self.elites,
                candidates: self.candidates,
            });
        }
        if !(0.0..=1.0).contains(&self.exploration) {
            return Err(PlanError::Exploration(self.exploration));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub sequence: Vec<Action>,
    /// Predicted cumulative goal reward of `sequence`.
    pub expected_reward: f64,
    /// Per-iteration mean elite score.
    pub elite_means: Vec<f64>,
    /// Final per-step sampling distributions over `actions`.
    pub distribution: Vec<Vec<f64>>,
}

impl Plan {
    pub fn first(&self) -> Action {
        self.sequence[0]
    }
}

/// Cumulative goal reward of the modal rollout of `sequence`.
pub fn rollout_score<P: Predictor + ?Sized>(
    model: &P,
    state: &EnvState,
    sequence: &[Action],
    task: &GoalTask,
) -> f64 {
    let mut s = state.clone();
    let mut total = 0.0;
    for a in sequence {
        s = model.modal_next(&s, a);
        total += goal_reward(&s, task);
    }
    total
}

/// Modal sequence of the refit distributions, or the best evaluated
/// candidate when that scores strictly higher.
pub fn plan<P: Predictor + ?Sized>(
    model: &P,
    state: &EnvState,
    task: &GoalTask,
    actions: &[Action],
    config: &CemConfig,
    rng: &mut RandomSource,
) -> Result<Plan, PlanError> {
    config.validate()?;
    if actions.is_empty() {
        return Err(PlanError::NoActions);
    }
    let n = actions.len();
    let uniform = 1.0 / n as f64;
    let mut dist = vec![vec![uniform; n]; config.length];
    let mut elite_means = Vec::with_capacity(config.iterations);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..config.iterations {
        let mut pool: Vec<(f64, Vec<usize>)> = (0..config.candidates)
            .map(|_| {
                let seq: Vec<usize> = dist
                    .iter()
                    .map(|d| {
                        if rng.uniform() < config.exploration {
                            rng.below(n)
                        } else {
                            rng.categorical(d)
                        }
                    })
                    .collect();
                let acts: Vec<Action> = seq.iter().map(|&k| actions[k]).collect();
                (rollout_score(model, state, &acts, task), seq)
            })
            .collect();
        pool.sort_by(|a, b| b.0.total_cmp(&a.0));
        if best.as_ref().map_or(true, |b| pool[0].0 > b.0) {
            best = Some(pool[0].clone());
        }
        let elites = &pool[..config.elites];
        elite_means.push(elites.iter().map(|e| e.0).sum::<f64>() / elites.len() as f64);
        for (t, d) in dist.iter_mut().enumerate() {
            let mut counts = vec![uniform; n];
            for (_, seq) in elites {
                counts[seq[t]] += 1.0;
            }
            let total: f64 = counts.iter().sum();
            for (p, c) in d.iter_mut().zip(counts) {
                *p = c / total;
            }
        }
    }
    let modal: Vec<Action> = dist
        .iter()
        .map(|d| {
            let mut best = 0;
            for k in 1..n {
                if d[k] > d[best] {
                    best = k;
                }
            }
            actions[best]
        })
        .collect();
    let mut sequence = modal;
    let mut expected_reward = rollout_score(model, state, &sequence, task);
    // The refit can average away a lone better sequence among many ties.
    if let Some((score, seq)) = best {
        if score > expected_reward {
            sequence = seq.iter().map(|&k| actions[k]).collect();
            expected_reward = score;
        }
    }
    Ok(Plan {
        expected_reward,
        sequence,
        elite_means,
        distribution: dist,
    })
}
