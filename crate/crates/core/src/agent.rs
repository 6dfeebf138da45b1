//! Curiosity-driven intervention agent: intrinsic rewards, intervention
//! selection, interventional verification and the training loop.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::envsim::{Action, EnvError, EnvState, Environment, TransitionRecord};
use crate::metagraph::{match_meta_states, shd};
use crate::numkit::{
    binary_entropy, gumbel_bernoulli, Adam, NumkitError, RandomSource, Tape, Tensor, Var, PROB_EPS,
};
use crate::worldmodel::{
    loss_quantization_tape, loss_sparse_tape, save, CheckpointError, ModelError, WorldModel,
};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("no candidate interventions")]
    EmptyCandidates,
    #[error("unknown reward kind {0:?} (expected edge_entropy, pred_uncertainty, feature_discrepancy or predictive_nll)")]
    UnknownRewardKind(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Numeric(#[from] NumkitError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    EdgeEntropy,
    PredUncertainty,
    FeatureDiscrepancy,
    PredictiveNll,
}

impl RewardKind {
    pub fn name(&self) -> &'static str {
        match self {
            RewardKind::EdgeEntropy => "edge_entropy",
            RewardKind::PredUncertainty => "pred_uncertainty",
            RewardKind::FeatureDiscrepancy => "feature_discrepancy",
            RewardKind::PredictiveNll => "predictive_nll",
        }
    }
}

impl FromStr for RewardKind {
    type Err = AgentError;
    fn from_str(s: &str) -> Result<Self, AgentError> {
        match s {
            "edge_entropy" => Ok(RewardKind::EdgeEntropy),
            "pred_uncertainty" => Ok(RewardKind::PredUncertainty),
            "feature_discrepancy" => Ok(RewardKind::FeatureDiscrepancy),
            "predictive_nll" => Ok(RewardKind::PredictiveNll),
            other => Err(AgentError::UnknownRewardKind(other.into())),
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CuriosityConfig {
    pub kind: RewardKind,
    pub exploration: f64,
    pub tau: f64,
    /// Interventional samples per target before an entry is estimated.
    pub min_samples: usize,
    /// Probes per forced value (and for the uncontrolled arm).
    pub probes_per_value: usize,
}

impl Default for CuriosityConfig {
    fn default() -> Self {
        CuriosityConfig {
            kind: RewardKind::EdgeEntropy,
            exploration: 0.05,
            tau: 0.3,
            min_samples: 50,
            probes_per_value: 25,
        }
    }
}

impl CuriosityConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(0.0..=1.0).contains(&self.exploration) {
            return Err(AgentError::InvalidConfig(format!(
                "exploration must lie in [0, 1], got {}",
                self.exploration
            )));
        }
        if !(self.tau >= 0.0) {
            return Err(AgentError::InvalidConfig(format!("tau must be >= 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Intrinsic reward of an observed transition.
pub fn curiosity_reward(model: &WorldModel, rec: &TransitionRecord, kind: RewardKind) -> f64 {
    let (s, a, x) = (&rec.state, &rec.action, &rec.next_state);
    match kind {
        RewardKind::EdgeEntropy => model.edge_probs(model.code_of(s, a)).entropy(),
        RewardKind::PredUncertainty => predictive_entropy(&model.predict(s, a)),
        RewardKind::FeatureDiscrepancy => {
            let mask = model.skeleton(model.code_of(s, a));
            let modal = EnvState(model.predict_next(s, a, &mask).iter().map(|d| argmax(d)).collect());
            sq_dist(&model.embed(x, a), &model.embed(&modal, a))
        }
        RewardKind::PredictiveNll => {
            let mask = model.skeleton(model.code_of(s, a));
            model
                .teacher_logits(s, a, x, &mask)
                .iter()
                .zip(&x.0)
                .map(|(l, &v)| -softmax(l)[v].max(PROB_EPS).ln())
                .sum()
        }
    }
}

fn predictive_entropy(dists: &[Vec<f64>]) -> f64 {
    dists
        .iter()
        .flat_map(|d| d.iter())
        .map(|&q| if q > 0.0 { -q * q.ln() } else { 0.0 })
        .sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut b = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[b] {
            b = i;
        }
    }
    b
}

/// One-step simulated reward of taking `action` in `state`.
pub fn candidate_score(
    model: &WorldModel,
    state: &EnvState,
    action: &Action,
    kind: RewardKind,
    rng: &mut RandomSource,
) -> f64 {
    match kind {
        RewardKind::EdgeEntropy => match action.target() {
            None => 0.0,
            Some(i) => {
                let probs = model.edge_probs(model.code_of(state, action));
                (0..model.p())
                    .filter(|&j| j != i)
                    .map(|j| binary_entropy(probs.get(i, j)) + binary_entropy(probs.get(j, i)))
                    .sum()
            }
        },
        RewardKind::PredUncertainty => predictive_entropy(&model.predict(state, action)),
        RewardKind::FeatureDiscrepancy | RewardKind::PredictiveNll => {
            let mask = model.skeleton(model.code_of(state, action));
            let imagined = model.sample_next(state, action, &mask, rng);
            let rec = TransitionRecord {
                state: state.clone(),
                action: *action,
                next_state: imagined,
                true_meta: 0,
            };
            curiosity_reward(model, &rec, kind)
        }
    }
}

/// Greedy one-step choice with uniform exploration.
pub fn select_intervention(
    model: &WorldModel,
    state: &EnvState,
    candidates: &[Action],
    config: &CuriosityConfig,
    rng: &mut RandomSource,
) -> Result<Action, AgentError> {
    if candidates.is_empty() {
        return Err(AgentError::EmptyCandidates);
    }
    let explore = rng.uniform() < config.exploration;
    if explore || candidates.len() == 1 {
        return Ok(candidates[rng.below(candidates.len())]);
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, a) in candidates.iter().enumerate() {
        let s = candidate_score(model, state, a, config.kind, rng);
        if s > best_score {
            best_score = s;
            best = k;
        }
    }
    Ok(candidates[best])
}

/// Joint next-state outcomes of verification probes, one arm for the
/// uncontrolled step and one per (target, forced value), indexed like
/// actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTable {
    cards: Vec<usize>,
    offsets: Vec<usize>,
    arms: Vec<Vec<Vec<usize>>>,
    version: u64,
}

impl ProbeTable {
    pub fn new(cards: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(cards.len());
        let mut acc = 0;
        for &c in cards {
            offsets.push(acc);
            acc += c;
        }
        ProbeTable {
            cards: cards.to_vec(),
            offsets,
            arms: vec![Vec::new(); 1 + acc],
            version: 0,
        }
    }

    fn arm_of(&self, action: &Action) -> usize {
        match action {
            Action::Noop => 0,
            Action::Do(s) => 1 + self.offsets[s.target] + s.value,
        }
    }

    pub fn record(&mut self, action: &Action, next: &EnvState) {
        let a = self.arm_of(action);
        self.arms[a].push(next.0.clone());
        self.version += 1;
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn forced_samples(&self, i: usize) -> usize {
        (0..self.cards[i]).map(|v| self.arms[1 + self.offsets[i] + v].len()).sum()
    }

    fn arms_for(&self, i: usize) -> Vec<usize> {
        std::iter::once(0)
            .chain((0..self.cards[i]).map(|v| 1 + self.offsets[i] + v))
            .filter(|&a| !self.arms[a].is_empty())
            .collect()
    }

    /// Largest smoothed KL divergence of the next-value distribution of `X_j`
    /// between any two non-empty arms on target `i`.
    fn contrast(&self, i: usize, j: usize) -> f64 {
        let c = self.cards[j];
        let dists: Vec<Vec<f64>> = self
            .arms_for(i)
            .into_iter()
            .map(|a| {
                let mut h = vec![0.5; c];
                for x in &self.arms[a] {
                    h[x[j]] += 1.0;
                }
                let n: f64 = h.iter().sum();
                h.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let mut best: f64 = 0.0;
        for p in &dists {
            for q in &dists {
                let kl: f64 = p.iter().zip(q).map(|(x, y)| x * (x / y).ln()).sum();
                best = best.max(kl);
            }
        }
        best
    }

    pub fn estimate(&self, tau: f64, min_samples: usize) -> EffectEstimate {
        let p = self.cards.len();
        let mut est = EffectEstimate::unestimated(p);
        for i in 0..p {
            let n = self.forced_samples(i);
            for j in 0..p {
                est.counts[i * p + j] = n;
                if i != j && n >= min_samples {
                    est.delta[i * p + j] = self.contrast(i, j);
                    est.status[i * p + j] = EntryStatus::Measured;
                }
            }
        }
        est.mark_transitive(tau);
        for i in 0..p {
            for j in 0..p {
                if est.status[i * p + j] != EntryStatus::Transitive {
                    continue;
                }
                let mediators: Vec<usize> = (0..p)
                    .filter(|&k| k != i && k != j && est.delta[i * p + k] > tau && est.delta[k * p + j] > tau)
                    .collect();
                if self.arm_information(i, &[j]) > self.arm_information(i, &mediators) + DIRECT_MARGIN {
                    est.status[i * p + j] = EntryStatus::Measured;
                }
            }
        }
        est
    }

    /// Plug-in mutual information between the forced arm on `i` (uniform
    /// over arms) and the joint next values of `nodes`.
    fn arm_information(&self, i: usize, nodes: &[usize]) -> f64 {
        let arms: Vec<&Vec<Vec<usize>>> = (0..self.cards[i])
            .map(|v| &self.arms[1 + self.offsets[i] + v])
            .filter(|a| !a.is_empty())
            .collect();
        if arms.len() < 2 {
            return 0.0;
        }
        let w = 1.0 / arms.len() as f64;
        let mut joint: BTreeMap<(usize, Vec<usize>), f64> = BTreeMap::new();
        let mut marginal: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for (a, samples) in arms.iter().enumerate() {
            let share = w / samples.len() as f64;
            for x in samples.iter() {
                let key: Vec<usize> = nodes.iter().map(|&k| x[k]).collect();
                *marginal.entry(key.clone()).or_default() += share;
                *joint.entry((a, key)).or_default() += share;
            }
        }
        joint
            .iter()
            .map(|((_, key), &pj)| pj * (pj / (w * marginal[key])).ln())
            .sum()
    }
}

/// Margin in nats by which a target must inform `X_j` beyond its mediators
/// before a mediated pair is treated as a direct effect.
const DIRECT_MARGIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryStatus {
    Measured,
    /// Effect fully explained by a measured two-step path; left to the
    /// likelihood and sparsity terms.
    Transitive,
    Unestimated,
}

/// Verification statistic `|Δ[i,j]|` with per-entry sample counts.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectEstimate {
    pub p: usize,
    pub delta: Vec<f64>,
    pub counts: Vec<usize>,
    pub status: Vec<EntryStatus>,
}

impl EffectEstimate {
    pub fn unestimated(p: usize) -> Self {
        EffectEstimate {
            p,
            delta: vec![0.0; p * p],
            counts: vec![0; p * p],
            status: vec![EntryStatus::Unestimated; p * p],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.delta[i * self.p + j]
    }

    pub fn status(&self, i: usize, j: usize) -> EntryStatus {
        self.status[i * self.p + j]
    }

    fn mark_transitive(&mut self, tau: f64) {
        let p = self.p;
        let strong = |e: &Self, a: usize, b: usize| {
            e.status[a * p + b] == EntryStatus::Measured && e.delta[a * p + b] > tau
        };
        let mut flagged = Vec::new();
        for i in 0..p {
            for j in 0..p {
                if i != j
                    && strong(self, i, j)
                    && (0..p).any(|k| k != i && k != j && strong(self, i, k) && strong(self, k, j))
                {
                    flagged.push(i * p + j);
                }
            }
        }
        for k in flagged {
            self.status[k] = EntryStatus::Transitive;
        }
    }

    /// `-λ1` where the effect exceeds `tau`, `+λ2` below it, 0 elsewhere.
    pub fn mask_weights(&self, tau: f64, lambda1: f64, lambda2: f64) -> Vec<f64> {
        (0..self.p * self.p)
            .map(|k| {
                if self.status[k] != EntryStatus::Measured || k / self.p == k % self.p {
                    0.0
                } else if self.delta[k] > tau {
                    -lambda1
                } else if self.delta[k] < tau {
                    lambda2
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Probe every target from every pre-state and pool the outcomes.
pub fn verify_interventions(
    env: &Environment,
    pre_states: &[EnvState],
    targets: &[usize],
    config: &CuriosityConfig,
    rng: &mut RandomSource,
) -> Result<EffectEstimate, AgentError> {
    let mut table = ProbeTable::new(env.cards());
    for s in pre_states {
        probe_into(&mut table, env, s, targets, config.probes_per_value, rng)?;
    }
    Ok(table.estimate(config.tau, config.min_samples))
}

/// Run verification probes from `state`; returns the number of environment
/// steps spent.
pub fn probe_into(
    table: &mut ProbeTable,
    env: &Environment,
    state: &EnvState,
    targets: &[usize],
    per_value: usize,
    rng: &mut RandomSource,
) -> Result<u64, AgentError> {
    let mut spent = 0;
    for _ in 0..per_value {
        let r = env.step(state, &Action::Noop, rng)?;
        table.record(&r.action, &r.next_state);
        spent += 1;
    }
    for &i in targets {
        for v in 0..env.cards()[i] {
            let a = Action::intervene(i, v);
            for _ in 0..per_value {
                let r = env.step(state, &a, rng)?;
                table.record(&a, &r.next_state);
                spent += 1;
            }
        }
    }
    Ok(spent)
}

/// `Σ W ⊙ log M̂` averaged over rows, with `W` from each row's effect
/// estimate, computed from decoder logits.
///
/// Weak-effect entries use `max(log M̂, log ε)`. Strong-effect entries keep
/// the unclamped `log σ(l)` so their gradient survives after the entry has
/// been pushed below `ε` by other samples sharing the code.
pub fn loss_mask_tape(
    tape: &mut Tape,
    logits: Var,
    effects: &[&EffectEstimate],
    tau: f64,
    lambda1: f64,
    lambda2: f64,
) -> Var {
    let rows = tape.value(logits).rows();
    let cols = tape.value(logits).cols();
    assert_eq!(effects.len(), rows, "one effect estimate per row");
    let mut strong = Vec::with_capacity(rows * cols);
    let mut weak = Vec::with_capacity(rows * cols);
    for e in effects {
        for w in e.mask_weights(tau, lambda1, lambda2) {
            strong.push(if w < 0.0 { w } else { 0.0 });
            weak.push(if w > 0.0 { w } else { 0.0 });
        }
    }
    let bounded = tape.clamp(logits, -LOGIT_BOUND, LOGIT_BOUND);
    let sig = tape.sigmoid(bounded);
    let log_sig = tape.log(sig);
    let floored = tape.clamp(log_sig, PROB_EPS.ln(), (1.0 - PROB_EPS).ln());
    let ws = tape.constant(Tensor::matrix(rows, cols, strong));
    let ww = tape.constant(Tensor::matrix(rows, cols, weak));
    let a = tape.mul(ws, log_sig);
    let b = tape.mul(ww, floored);
    let both = tape.add(a, b);
    let s = tape.sum(both);
    tape.scale(s, 1.0 / rows as f64)
}

const LOGIT_BOUND: f64 = 40.0;

/// Plain value of the mask loss for a single matrix.
pub fn loss_mask(
    probs: &crate::worldmodel::EdgeProbabilityMatrix,
    effects: &EffectEstimate,
    tau: f64,
    lambda1: f64,
    lambda2: f64,
) -> f64 {
    effects
        .mask_weights(tau, lambda1, lambda2)
        .iter()
        .zip(probs.data())
        .filter(|(w, _)| **w != 0.0)
        .map(|(w, &m)| w * m.clamp(PROB_EPS, 1.0 - PROB_EPS).ln())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verification {
    /// Dedicated probes from every visited pre-state.
    Active,
    /// Only the agent's own executed transitions.
    Passive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub initial_steps: u64,
    pub episode_length: u64,
    pub report_every: u64,
    pub curiosity: CuriosityConfig,
    pub verification: Verification,
    /// Curiosity-driven selection; uniform random actions otherwise.
    pub curious: bool,
    /// Variables the agent may intervene on; `None` means all.
    pub intervenable: Option<Vec<usize>>,
    pub replay_capacity: usize,
    pub eval_pairs: usize,
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 15_000,
            batch_size: 256,
            lr: 1e-4,
            initial_steps: 1000,
            episode_length: 25,
            report_every: 500,
            curiosity: CuriosityConfig::default(),
            verification: Verification::Active,
            curious: true,
            intervenable: None,
            replay_capacity: 100_000,
            eval_pairs: 400,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_mle: f64,
    pub loss_sparse: f64,
    pub loss_mask: f64,
    pub loss_quant: f64,
    pub reward_mean: f64,
    pub shd_per_code: Vec<usize>,
    pub meta_acc: f64,
    pub codes_in_use: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    pub probe_steps: u64,
    pub env_steps: u64,
    pub merges: usize,
    pub restarts: usize,
}

pub const REPORT_HEADER: &str =
    "step,loss_total,loss_mle,loss_sparse,loss_mask,loss_quant,reward_mean,shd_per_code,meta_acc,codes_in_use";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let shd: Vec<String> = r.shd_per_code.iter().map(|x| x.to_string()).collect();
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6},{}\n",
                r.step,
                r.loss_total,
                r.loss_mle,
                r.loss_sparse,
                r.loss_mask,
                r.loss_quant,
                r.reward_mean,
                shd.join(";"),
                r.meta_acc,
                r.codes_in_use
            ));
        }
        s
    }
}

/// Loss components of one gradient step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mle: f64,
    pub sparse: f64,
    pub mask: f64,
    pub quant: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.mle += o.mle;
        self.sparse += o.sparse;
        self.mask += o.mask;
        self.quant += o.quant;
    }
}

/// Held-out `(state, action)` pairs with their true meta states.
pub fn evaluation_pairs(env: &Environment, n: usize, rng: &mut RandomSource) -> Vec<(EnvState, Action, usize)> {
    (0..n)
        .map(|_| {
            let s = EnvState(env.cards().iter().map(|&c| rng.below(c)).collect());
            let a = env.actions()[rng.below(env.action_count())];
            let m = env.meta_of(&s);
            (s, a, m)
        })
        .collect()
}

/// Matched meta-state accuracy, per-code SHD against the majority true
/// subgraph, and the number of codes in use.
pub fn structure_metrics(
    env: &Environment,
    model: &WorldModel,
    pairs: &[(EnvState, Action, usize)],
) -> (f64, Vec<usize>, usize) {
    let codes: Vec<usize> = pairs.iter().map(|(s, a, _)| model.code_of(s, a)).collect();
    let truth: Vec<usize> = pairs.iter().map(|(_, _, m)| *m).collect();
    let acc = match_meta_states(&codes, &truth).map(|m| m.accuracy).unwrap_or(0.0);
    let k = model.k();
    let metas = env.truth().meta_count();
    let mut votes = vec![vec![0usize; metas]; k];
    for (&c, &m) in codes.iter().zip(&truth) {
        votes[c][m] += 1;
    }
    let mut shds = Vec::new();
    for (u, v) in votes.iter().enumerate() {
        if v.iter().sum::<usize>() == 0 {
            continue;
        }
        let m = argmax(&v.iter().map(|&x| x as f64).collect::<Vec<_>>());
        shds.push(shd(&model.skeleton(u), &env.truth().subgraphs[m]).map(|r| r.shd).unwrap_or(usize::MAX));
    }
    let in_use = shds.len();
    (acc, shds, in_use)
}

pub struct Trainer<'a> {
    pub env: &'a Environment,
    pub config: TrainConfig,
    pub adam: Adam,
    pub replay: Vec<TransitionRecord>,
    probes: HashMap<usize, ProbeTable>,
    effects: HashMap<usize, (u64, EffectEstimate)>,
    candidates: Vec<Action>,
    rng_env: RandomSource,
    rng_policy: RandomSource,
    rng_batch: RandomSource,
    rng_gumbel: RandomSource,
    rng_probe: RandomSource,
    rng_codebook: RandomSource,
    eval: Vec<(EnvState, Action, usize)>,
    recent: Vec<Vec<f64>>,
    pub report: TrainReport,
    state: Option<EnvState>,
    t: u64,
    window: (LossParts, f64, u64),
    window_trained: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(env: &'a Environment, model: &WorldModel, config: TrainConfig, rng: &RandomSource) -> Result<Self, AgentError> {
        config.curiosity.validate()?;
        if config.batch_size == 0 || config.episode_length == 0 {
            return Err(AgentError::InvalidConfig("batch_size and episode_length must be positive".into()));
        }
        let intervenable: Vec<usize> = config
            .intervenable
            .clone()
            .unwrap_or_else(|| (0..env.p()).collect());
        let candidates: Vec<Action> = env
            .actions()
            .iter()
            .copied()
            .filter(|a| a.target().map_or(true, |i| intervenable.contains(&i)))
            .collect();
        let mut rng_eval = rng.derive("eval-pairs");
        let eval = evaluation_pairs(env, config.eval_pairs, &mut rng_eval);
        Ok(Trainer {
            env,
            adam: Adam::new(config.lr, &model.params()),
            replay: Vec::new(),
            probes: HashMap::new(),
            effects: HashMap::new(),
            candidates,
            rng_env: rng.derive("env"),
            rng_policy: rng.derive("policy"),
            rng_batch: rng.derive("batch"),
            rng_gumbel: rng.derive("gumbel"),
            rng_probe: rng.derive("probe"),
            rng_codebook: rng.derive("codebook"),
            eval,
            recent: Vec::new(),
            report: TrainReport::default(),
            state: None,
            t: 0,
            window: Default::default(),
            window_trained: 0,
            config,
        })
    }

    pub fn candidates(&self) -> &[Action] {
        &self.candidates
    }

    fn intervenable(&self) -> Vec<usize> {
        self.config
            .intervenable
            .clone()
            .unwrap_or_else(|| (0..self.env.p()).collect())
    }

    /// Effect estimate for a pre-state, probing it first when verification
    /// is active.
    fn effect_for(&mut self, state: &EnvState) -> Result<&EffectEstimate, AgentError> {
        let key = state.index(self.env.cards());
        if self.config.verification == Verification::Active && !self.probes.contains_key(&key) {
            let mut table = ProbeTable::new(self.env.cards());
            let targets = self.intervenable();
            let spent = probe_into(
                &mut table,
                self.env,
                state,
                &targets,
                self.config.curiosity.probes_per_value,
                &mut self.rng_probe,
            )?;
            self.report.probe_steps += spent;
            self.probes.insert(key, table);
        }
        let p = self.env.p();
        let version = self.probes.get(&key).map(|t| t.version());
        let stale = match (self.effects.get(&key), version) {
            (Some((v, _)), Some(cur)) => *v != cur,
            (None, _) => true,
            (Some(_), None) => false,
        };
        if stale {
            let est = match self.probes.get(&key) {
                Some(t) => t.estimate(self.config.curiosity.tau, self.config.curiosity.min_samples),
                None => EffectEstimate::unestimated(p),
            };
            self.effects.insert(key, (version.unwrap_or(0), est));
        }
        Ok(&self.effects[&key].1)
    }

    /// One environment step followed by one gradient step once the initial
    /// random phase is over.
    pub fn step(&mut self, model: &mut WorldModel) -> Result<(), AgentError> {
        let cfg = self.config.clone();
        if self.t % cfg.episode_length == 0 || self.state.is_none() {
            self.state = Some(self.env.reset(&mut self.rng_env));
        }
        let state = self.state.clone().unwrap();
        let action = if self.t < cfg.initial_steps || !cfg.curious {
            self.candidates[self.rng_policy.below(self.candidates.len())]
        } else {
            select_intervention(model, &state, &self.candidates, &cfg.curiosity, &mut self.rng_policy)?
        };
        let rec = self.env.step(&state, &action, &mut self.rng_env)?;
        self.report.env_steps += 1;
        if cfg.verification == Verification::Passive {
            let key = state.index(self.env.cards());
            self.probes
                .entry(key)
                .or_insert_with(|| ProbeTable::new(self.env.cards()))
                .record(&rec.action, &rec.next_state);
        }
        self.state = Some(rec.next_state.clone());
        let reward = curiosity_reward(model, &rec, cfg.curiosity.kind);
        if self.replay.len() < cfg.replay_capacity {
            self.replay.push(rec);
        } else {
            let slot = (self.t as usize) % cfg.replay_capacity;
            self.replay[slot] = rec;
        }
        let mut parts = LossParts::default();
        if self.t >= cfg.initial_steps {
            let progress = (self.t - cfg.initial_steps) as f64 / (cfg.steps.saturating_sub(cfg.initial_steps)).max(1) as f64;
            parts = self.gradient_step(model, progress)?;
        }
        self.t += 1;
        model.step = self.t;
        if model.config.fusion_every > 0 && self.t % model.config.fusion_every == 0 && !self.recent.is_empty() {
            let d = model.codebook.cols();
            let mut anchor = vec![0.0; d];
            for e in &self.recent {
                for (a, x) in anchor.iter_mut().zip(e) {
                    *a += x / self.recent.len() as f64;
                }
            }
            let thr = model.config.fusion_l1_frac * (model.p() * model.p()) as f64;
            let report = model.fuse_codebook(model.config.fusion_cos, thr, &anchor, &mut self.rng_codebook);
            let freed: Vec<usize> = report.merges.iter().map(|&(_, f)| f).collect();
            self.adam.reset_rows(model.codebook_param_index(), &freed);
            self.report.merges += freed.len();
        }
        if self.t > cfg.initial_steps && self.t % 100 == 0 {
            let restarted = model.restart_dead(&self.recent, &mut self.rng_codebook);
            self.adam.reset_rows(model.codebook_param_index(), &restarted);
            self.report.restarts += restarted.len();
        }
        self.window_add(parts, reward);
        if cfg.report_every > 0 && self.t % cfg.report_every == 0 {
            self.flush_window(model);
        }
        if cfg.checkpoint_every > 0 && self.t % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(CheckpointError::from)?;
                save(model, &dir.join(format!("step{:06}.ckpt", self.t)))?;
            }
        }
        Ok(())
    }

    fn window_add(&mut self, parts: LossParts, reward: f64) {
        self.window.0.add(&parts);
        self.window.1 += reward;
        self.window.2 += 1;
    }

    fn flush_window(&mut self, model: &WorldModel) {
        let (parts, reward, n) = std::mem::take(&mut self.window);
        let trained = self.window_trained.max(1) as f64;
        let n = n.max(1) as f64;
        let (acc, shds, in_use) = structure_metrics(self.env, model, &self.eval);
        self.report.rows.push(ReportRow {
            step: self.t,
            loss_total: parts.total / trained,
            loss_mle: parts.mle / trained,
            loss_sparse: parts.sparse / trained,
            loss_mask: parts.mask / trained,
            loss_quant: parts.quant / trained,
            reward_mean: reward / n,
            shd_per_code: shds,
            meta_acc: acc,
            codes_in_use: in_use,
        });
        self.window_trained = 0;
    }

    fn gradient_step(&mut self, model: &mut WorldModel, progress: f64) -> Result<LossParts, AgentError> {
        let cfg = &self.config;
        let n = self.replay.len();
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| self.rng_batch.below(n)).collect();
        let tau = cfg.curiosity.tau;
        let mut effects = Vec::with_capacity(idx.len());
        for &k in &idx {
            let s = self.replay[k].state.clone();
            effects.push(self.effect_for(&s)?.clone());
        }
        let recs: Vec<&TransitionRecord> = idx.iter().map(|&k| &self.replay[k]).collect();
        let batch = model.encode_batch(&recs)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let e = model.encode_tape(&mut tape, &bound, &batch)?;
        let codes = model.assign_rows(tape.value(e));
        for &c in &codes {
            model.usage[c] += 1;
            model.last_used[c] = self.t;
        }
        let ev = tape.value(e);
        self.recent = (0..ev.rows().min(32)).map(|r| ev.row(r).to_vec()).collect();
        let (z, q) = model.quantize_tape(&mut tape, &bound, e, &codes);
        let logits = model.decode_logits_tape(&mut tape, &bound, q)?;
        let probs = model.probs_from_logits(&mut tape, logits);
        let temperature = model.config.temperature(progress);
        let sample = gumbel_bernoulli(&mut tape, probs, temperature, &mut self.rng_gumbel, true)?;
        let off = tape.constant(model.offdiag_rows(batch.size));
        let mask = tape.mul(sample, off);
        let mle = model.mle_tape(&mut tape, &bound, mask, &batch);
        let sparse = loss_sparse_tape(&mut tape, probs);
        let refs: Vec<&EffectEstimate> = effects.iter().collect();
        let lmask = loss_mask_tape(&mut tape, logits, &refs, tau, 1.0, 1.0);
        let quant = loss_quantization_tape(&mut tape, e, z, model.config.beta);
        let c = &model.config;
        let terms = [
            (sparse, c.lambda_sparse),
            (lmask, c.lambda_mask),
            (quant, c.lambda_quant),
        ];
        let mut total = mle;
        for (v, w) in terms {
            let scaled = tape.scale(v, w);
            total = tape.add(total, scaled);
        }
        let parts = LossParts {
            total: tape.value(total).item(),
            mle: tape.value(mle).item(),
            sparse: tape.value(sparse).item(),
            mask: tape.value(lmask).item(),
            quant: tape.value(quant).item(),
        };
        if !parts.total.is_finite() {
            return Err(AgentError::Divergence {
                step: self.t,
                detail: format!("{parts:?}"),
            });
        }
        let mut grads = tape.backward(total)?;
        let g: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.take(&tape, v)).collect();
        if g.iter().any(|t| !t.all_finite()) {
            return Err(AgentError::Divergence {
                step: self.t,
                detail: "non-finite gradient".into(),
            });
        }
        let mut params = model.params_mut();
        self.adam.step(&mut params, &g);
        self.window_trained += 1;
        Ok(parts)
    }

    pub fn steps_done(&self) -> u64 {
        self.t
    }

    pub fn evaluation_set(&self) -> &[(EnvState, Action, usize)] {
        &self.eval
    }
}

/// Run the full loop for `config.steps` steps.
pub fn train(
    env: &Environment,
    model: &mut WorldModel,
    config: TrainConfig,
    rng: &RandomSource,
) -> Result<TrainReport, AgentError> {
    if config.steps == 0 {
        return Ok(TrainReport::default());
    }
    let mut trainer = Trainer::new(env, model, config, rng)?;
    for _ in 0..trainer.config.steps {
        trainer.step(model)?;
    }
    if trainer.config.report_every == 0 || trainer.t % trainer.config.report_every != 0 {
        trainer.flush_window(model);
    }
    Ok(trainer.report)
}
