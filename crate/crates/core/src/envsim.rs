//! Tabular environments with a hidden meta-causal ground truth.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::metagraph::SkeletonMatrix;
use crate::numkit::RandomSource;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment size: {0}")]
    InvalidSize(String),
    #[error("action {0} out of range")]
    ActionOutOfRange(String),
    #[error("state {state:?} does not fit cardinalities {cards:?}")]
    BadState { state: Vec<usize>, cards: Vec<usize> },
    #[error("cannot corrupt {requested} nodes: only {available} non-root nodes")]
    TooMuchNoise { requested: usize, available: usize },
    #[error("descriptor: {0}")]
    Descriptor(String),
    #[error("trajectory line {line}: {detail}")]
    Trajectory { line: usize, detail: String },
    #[error("outcome enumeration exceeds {0} states")]
    TooManyOutcomes(usize),
}

/// Categorical node values, one per variable.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EnvState(pub Vec<usize>);

impl EnvState {
    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Mixed-radix index, first variable least significant.
    pub fn index(&self, cards: &[usize]) -> usize {
        state_index(&self.0, cards)
    }
}

impl fmt::Display for EnvState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for EnvState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(EnvState)
    }
}

pub fn state_index(values: &[usize], cards: &[usize]) -> usize {
    let mut idx = 0;
    for (&v, &n) in values.iter().zip(cards).rev() {
        idx = idx * n + v;
    }
    idx
}

pub fn state_from_index(mut idx: usize, cards: &[usize]) -> EnvState {
    let mut values = Vec::with_capacity(cards.len());
    for &n in cards {
        values.push(idx % n);
        idx /= n;
    }
    EnvState(values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InterventionSpec {
    pub target: usize,
    pub value: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Noop,
    Do(InterventionSpec),
}

impl Action {
    pub fn intervene(target: usize, value: usize) -> Self {
        Action::Do(InterventionSpec { target, value })
    }

    pub fn is_intervention(&self) -> bool {
        matches!(self, Action::Do(_))
    }

    pub fn target(&self) -> Option<usize> {
        match self {
            Action::Noop => None,
            Action::Do(s) => Some(s.target),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Noop => f.write_str("noop"),
            Action::Do(s) => write!(f, "do:{}={}", s.target, s.value),
        }
    }
}

impl FromStr for Action {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "noop" {
            return Ok(Action::Noop);
        }
        let body = s
            .strip_prefix("do:")
            .ok_or_else(|| format!("expected noop or do:i=v, got {s:?}"))?;
        let (i, v) = body
            .split_once('=')
            .ok_or_else(|| format!("expected do:i=v, got {s:?}"))?;
        let target = i.trim().parse().map_err(|e| format!("{i:?}: {e}"))?;
        let value = v.trim().parse().map_err(|e| format!("{v:?}: {e}"))?;
        Ok(Action::intervene(target, value))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub state: EnvState,
    pub action: Action,
    pub next_state: EnvState,
    /// Evaluation only.
    pub true_meta: usize,
}

impl TransitionRecord {
    pub fn was_intervention(&self) -> bool {
        self.action.is_intervention()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalTask {
    pub target: EnvState,
    pub horizon: usize,
}

impl GoalTask {
    pub fn new(target: EnvState) -> Self {
        GoalTask { target, horizon: 25 }
    }
}

/// Negative Hamming distance to the goal.
pub fn goal_reward(state: &EnvState, task: &GoalTask) -> f64 {
    -(state
        .0
        .iter()
        .zip(&task.target.0)
        .filter(|(a, b)| a != b)
        .count() as f64)
}

/// Conditional table whose mode per parent configuration carries `sharpness`
/// and whose remaining mass is spread evenly over the other values.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeTable {
    pub parents: Vec<usize>,
    pub card: usize,
    pub sharpness: f64,
    modes: Vec<usize>,
}

impl NodeTable {
    fn config(&self, values: &[usize], cards: &[usize]) -> usize {
        let mut idx = 0;
        for &pa in &self.parents {
            idx = idx * cards[pa] + values[pa];
        }
        idx
    }

    pub fn mode(&self, values: &[usize], cards: &[usize]) -> usize {
        self.modes[self.config(values, cards)]
    }

    pub fn probability(&self, value: usize, mode: usize) -> f64 {
        if self.card == 1 {
            1.0
        } else if value == mode {
            self.sharpness
        } else {
            (1.0 - self.sharpness) / (self.card - 1) as f64
        }
    }

    pub fn distribution(&self, values: &[usize], cards: &[usize]) -> Vec<f64> {
        let m = self.mode(values, cards);
        (0..self.card).map(|v| self.probability(v, m)).collect()
    }

    fn sample(&self, values: &[usize], cards: &[usize], rng: &mut RandomSource) -> usize {
        let m = self.mode(values, cards);
        if self.sharpness >= 1.0 {
            // Keep the stream aligned with the stochastic case.
            rng.uniform();
            return m;
        }
        let u = rng.uniform();
        if u < self.sharpness || self.card == 1 {
            m
        } else {
            let k = ((u - self.sharpness) / (1.0 - self.sharpness) * (self.card - 1) as f64) as usize;
            let k = k.min(self.card - 2);
            if k >= m {
                k + 1
            } else {
                k
            }
        }
    }

    /// Every parent changes the mode for some configuration of the others.
    fn is_faithful(&self, cards: &[usize]) -> bool {
        let radix: Vec<usize> = self.parents.iter().map(|&p| cards[p]).collect();
        let n_cfg = self.modes.len();
        for (slot, _) in self.parents.iter().enumerate() {
            let stride: usize = radix[slot + 1..].iter().product();
            let matters = (0..n_cfg).any(|cfg| {
                let digit = (cfg / stride) % radix[slot];
                (0..radix[slot]).any(|d| {
                    let other = cfg - digit * stride + d * stride;
                    self.modes[other] != self.modes[cfg]
                })
            });
            if !matters {
                return false;
            }
        }
        true
    }
}

/// State to meta-state mapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetaRule {
    /// `when_zero` if `node` holds 0, else `otherwise`.
    ZeroSelects { node: usize, when_zero: usize, otherwise: usize },
    /// Meta state equals the node's value.
    ValueOf { node: usize },
}

impl MetaRule {
    pub fn apply(&self, state: &[usize]) -> usize {
        match *self {
            MetaRule::ZeroSelects {
                node,
                when_zero,
                otherwise,
            } => {
                if state[node] == 0 {
                    when_zero
                } else {
                    otherwise
                }
            }
            MetaRule::ValueOf { node } => state[node],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMcg {
    pub subgraphs: Vec<SkeletonMatrix>,
    pub names: Vec<String>,
    pub rule: MetaRule,
    /// `tables[u][j]`
    pub tables: Vec<Vec<NodeTable>>,
    orders: Vec<Vec<usize>>,
    /// `downstream[u][i][j]`: `j` is a descendant of `i` in subgraph `u`.
    downstream: Vec<Vec<Vec<bool>>>,
}

impl GroundTruthMcg {
    fn new(
        subgraphs: Vec<SkeletonMatrix>,
        names: Vec<String>,
        rule: MetaRule,
        tables: Vec<Vec<NodeTable>>,
    ) -> Result<Self, EnvError> {
        let mut orders = Vec::new();
        let mut downstream = Vec::new();
        for (u, g) in subgraphs.iter().enumerate() {
            let order = g
                .topological_order()
                .ok_or_else(|| EnvError::InvalidSize(format!("subgraph {u} is cyclic")))?;
            orders.push(order);
            let p = g.p();
            downstream.push(
                (0..p)
                    .map(|i| {
                        let mut row = vec![false; p];
                        for d in g.descendants(i) {
                            row[d] = true;
                        }
                        row
                    })
                    .collect(),
            );
        }
        for a in 0..subgraphs.len() {
            for b in a + 1..subgraphs.len() {
                if subgraphs[a] == subgraphs[b] {
                    return Err(EnvError::InvalidSize(format!(
                        "subgraphs {a} and {b} coincide"
                    )));
                }
            }
        }
        Ok(GroundTruthMcg {
            subgraphs,
            names,
            rule,
            tables,
            orders,
            downstream,
        })
    }

    pub fn meta_count(&self) -> usize {
        self.subgraphs.len()
    }

    pub fn meta_of(&self, state: &EnvState) -> usize {
        self.rule.apply(&state.0)
    }

    pub fn order(&self, u: usize) -> &[usize] {
        &self.orders[u]
    }

    pub fn is_downstream(&self, u: usize, i: usize, j: usize) -> bool {
        self.downstream[u][i][j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChemicalVariant {
    FullFork,
    FullChain,
}

impl ChemicalVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ChemicalVariant::FullFork => "full_fork",
            ChemicalVariant::FullChain => "full_chain",
        }
    }
}

impl FromStr for ChemicalVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full_fork" | "fork" => Ok(ChemicalVariant::FullFork),
            "full_chain" | "chain" => Ok(ChemicalVariant::FullChain),
            _ => Err(format!("unknown chemical variant {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    Chemical(ChemicalVariant),
    Lockbox,
}

/// Everything needed to rebuild an environment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvDescriptor {
    pub kind: EnvKind,
    pub nodes: usize,
    pub colors: usize,
    pub seed: u64,
    pub sharpness: f64,
}

pub const DEFAULT_SHARPNESS: f64 = 0.9;

impl EnvDescriptor {
    pub fn chemical(variant: ChemicalVariant, nodes: usize, colors: usize, seed: u64) -> Self {
        EnvDescriptor {
            kind: EnvKind::Chemical(variant),
            nodes,
            colors,
            seed,
            sharpness: DEFAULT_SHARPNESS,
        }
    }

    pub fn lockbox(seed: u64) -> Self {
        EnvDescriptor {
            kind: EnvKind::Lockbox,
            nodes: 3,
            colors: 2,
            seed,
            sharpness: 1.0,
        }
    }

    pub fn build(&self) -> Result<Environment, EnvError> {
        match self.kind {
            EnvKind::Chemical(v) => make_chemical_with(v, self.nodes, self.colors, self.seed, self.sharpness),
            EnvKind::Lockbox => make_lockbox(self.seed),
        }
    }

    pub fn to_text(&self) -> String {
        let (name, variant) = match self.kind {
            EnvKind::Chemical(v) => ("chemical", v.name()),
            EnvKind::Lockbox => ("lockbox", "none"),
        };
        format!(
            "env.name = {name}\nenv.variant = {variant}\nenv.nodes = {}\nenv.colors = {}\nenv.seed = {}\nenv.sharpness = {}\n",
            self.nodes, self.colors, self.seed, self.sharpness
        )
    }

    /// Parse `key = value` lines; unknown `env.*` keys are rejected.
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| EnvError::Descriptor(format!("expected key = value, got {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        EnvDescriptor::from_map(&map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, EnvError> {
        const KEYS: [&str; 6] = [
            "env.name",
            "env.variant",
            "env.nodes",
            "env.colors",
            "env.seed",
            "env.sharpness",
        ];
        for k in map.keys().filter(|k| k.starts_with("env.")) {
            if !KEYS.contains(&k.as_str()) {
                return Err(EnvError::Descriptor(format!("unknown key {k}")));
            }
        }
        let get = |k: &str| map.get(k).map(String::as_str);
        let num = |k: &str, default: u64| -> Result<u64, EnvError> {
            get(k)
                .map(|v| v.parse::<u64>().map_err(|e| EnvError::Descriptor(format!("{k}: {e}"))))
                .unwrap_or(Ok(default))
        };
        let seed = num("env.seed", 0)?;
        match get("env.name").unwrap_or("chemical") {
            "lockbox" => Ok(EnvDescriptor::lockbox(seed)),
            "chemical" => {
                let variant: ChemicalVariant = get("env.variant")
                    .unwrap_or("full_chain")
                    .parse()
                    .map_err(EnvError::Descriptor)?;
                let mut d = EnvDescriptor::chemical(
                    variant,
                    num("env.nodes", 5)? as usize,
                    num("env.colors", 3)? as usize,
                    seed,
                );
                if let Some(s) = get("env.sharpness") {
                    d.sharpness = s
                        .parse()
                        .map_err(|e| EnvError::Descriptor(format!("env.sharpness: {e}")))?;
                }
                Ok(d)
            }
            other => Err(EnvError::Descriptor(format!("unknown env.name {other:?}"))),
        }
    }
}

/// Immutable environment handle.
#[derive(Clone, Debug)]
pub struct Environment {
    pub descriptor: EnvDescriptor,
    pub name: String,
    cards: Vec<usize>,
    truth: GroundTruthMcg,
    actions: Vec<Action>,
}

pub fn make_chemical(
    variant: ChemicalVariant,
    p: usize,
    colors: usize,
    seed: u64,
) -> Result<Environment, EnvError> {
    make_chemical_with(variant, p, colors, seed, DEFAULT_SHARPNESS)
}

pub fn make_chemical_with(
    variant: ChemicalVariant,
    p: usize,
    colors: usize,
    seed: u64,
    sharpness: f64,
) -> Result<Environment, EnvError> {
    if p < 3 || colors < 2 {
        return Err(EnvError::InvalidSize(format!(
            "need p >= 3 and colors >= 2, got p={p} colors={colors}"
        )));
    }
    if !(sharpness > 0.0 && sharpness <= 1.0) {
        return Err(EnvError::InvalidSize(format!("sharpness {sharpness} outside (0, 1]")));
    }
    let budget: f64 = (colors as f64).powi(p as i32 - 1);
    if budget > 5e7 {
        return Err(EnvError::InvalidSize(format!(
            "conditional tables for p={p} colors={colors} are too large"
        )));
    }
    let (sparse, sparse_name) = match variant {
        ChemicalVariant::FullFork => (SkeletonMatrix::fork(p), "fork"),
        ChemicalVariant::FullChain => (SkeletonMatrix::chain(p), "chain"),
    };
    let full = SkeletonMatrix::full(p);
    let cards = vec![colors; p];
    let mut rng = RandomSource::new(seed, "chemical-tables");
    let tables = [&sparse, &full]
        .iter()
        .map(|g| {
            (0..p)
                .map(|j| random_table(g.parents(j), &cards, colors, sharpness, &mut rng))
                .collect()
        })
        .collect();
    let truth = GroundTruthMcg::new(
        vec![sparse, full],
        vec![sparse_name.to_string(), "full".to_string()],
        MetaRule::ZeroSelects {
            node: 0,
            when_zero: 0,
            otherwise: 1,
        },
        tables,
    )?;
    let descriptor = EnvDescriptor {
        kind: EnvKind::Chemical(variant),
        nodes: p,
        colors,
        seed,
        sharpness,
    };
    Ok(Environment::new(descriptor, "chemical".into(), cards, truth))
}

fn random_table(
    parents: Vec<usize>,
    cards: &[usize],
    card: usize,
    sharpness: f64,
    rng: &mut RandomSource,
) -> NodeTable {
    let n_cfg: usize = parents.iter().map(|&p| cards[p]).product();
    loop {
        let modes = (0..n_cfg).map(|_| rng.below(card)).collect();
        let t = NodeTable {
            parents: parents.clone(),
            card,
            sharpness,
            modes,
        };
        if t.is_faithful(cards) {
            return t;
        }
    }
}

/// Lock (0 locked, 1 unlocked), push (0 no, 1 yes), door (0 closed, 1 open).
pub fn make_lockbox(seed: u64) -> Result<Environment, EnvError> {
    let cards = vec![2, 2, 2];
    let locked = SkeletonMatrix::empty(3);
    let unlocked = SkeletonMatrix::from_edges(3, &[(1, 2)]).unwrap();
    let free = |card| NodeTable {
        parents: vec![],
        card,
        sharpness: 1.0,
        modes: vec![0],
    };
    let copy_push = NodeTable {
        parents: vec![1],
        card: 2,
        sharpness: 1.0,
        modes: vec![0, 1],
    };
    let tables = vec![
        vec![free(2), free(2), free(2)],
        vec![free(2), free(2), copy_push],
    ];
    let truth = GroundTruthMcg::new(
        vec![locked, unlocked],
        vec!["locked".into(), "unlocked".into()],
        MetaRule::ValueOf { node: 0 },
        tables,
    )?;
    Ok(Environment::new(
        EnvDescriptor::lockbox(seed),
        "lockbox".into(),
        cards,
        truth,
    ))
}

impl Environment {
    fn new(descriptor: EnvDescriptor, name: String, cards: Vec<usize>, truth: GroundTruthMcg) -> Self {
        let mut actions = vec![Action::Noop];
        for (i, &n) in cards.iter().enumerate() {
            for v in 0..n {
                actions.push(Action::intervene(i, v));
            }
        }
        Environment {
            descriptor,
            name,
            cards,
            truth,
            actions,
        }
    }

    pub fn p(&self) -> usize {
        self.cards.len()
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn truth(&self) -> &GroundTruthMcg {
        &self.truth
    }

    pub fn state_count(&self) -> usize {
        self.cards.iter().product()
    }

    pub fn meta_of(&self, state: &EnvState) -> usize {
        self.truth.meta_of(state)
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn action_count(&self) -> usize {
        self.actions.len()
    }

    /// Noop is 0; `do(i=v)` follows in node-then-value order.
    pub fn action_index(&self, action: &Action) -> Result<usize, EnvError> {
        match action {
            Action::Noop => Ok(0),
            Action::Do(s) => {
                if s.target >= self.p() || s.value >= self.cards[s.target] {
                    return Err(EnvError::ActionOutOfRange(action.to_string()));
                }
                Ok(1 + self.cards[..s.target].iter().sum::<usize>() + s.value)
            }
        }
    }

    pub fn check_state(&self, state: &EnvState) -> Result<(), EnvError> {
        if state.len() != self.p() || state.0.iter().zip(&self.cards).any(|(v, n)| v >= n) {
            return Err(EnvError::BadState {
                state: state.0.clone(),
                cards: self.cards.clone(),
            });
        }
        Ok(())
    }

    /// Uniform draw followed by ancestral sampling in the active subgraph.
    pub fn reset(&self, rng: &mut RandomSource) -> EnvState {
        let mut values: Vec<usize> = self.cards.iter().map(|&n| rng.below(n)).collect();
        let u = self.truth.rule.apply(&values);
        for &j in &self.truth.orders[u] {
            let t = &self.truth.tables[u][j];
            if !t.parents.is_empty() {
                values[j] = t.sample(&values, &self.cards, rng);
            }
        }
        EnvState(values)
    }

    /// Apply `action` to `state`. An intervention sets its target and
    /// re-samples the target's descendants in the subgraph selected by the
    /// pre-action state; every other node holds its value.
    pub fn step(
        &self,
        state: &EnvState,
        action: &Action,
        rng: &mut RandomSource,
    ) -> Result<TransitionRecord, EnvError> {
        self.check_state(state)?;
        self.action_index(action)?;
        let u = self.truth.meta_of(state);
        let mut next = state.0.clone();
        if let Action::Do(s) = action {
            next[s.target] = s.value;
            for &j in &self.truth.orders[u] {
                if self.truth.downstream[u][s.target][j] {
                    next[j] = self.truth.tables[u][j].sample(&next, &self.cards, rng);
                }
            }
        }
        Ok(TransitionRecord {
            state: state.clone(),
            action: *action,
            next_state: EnvState(next),
            true_meta: u,
        })
    }

    /// Exact distribution over next states, merged by state.
    pub fn next_distribution(
        &self,
        state: &EnvState,
        action: &Action,
        cap: usize,
    ) -> Result<Vec<(EnvState, f64)>, EnvError> {
        self.check_state(state)?;
        self.action_index(action)?;
        let u = self.truth.meta_of(state);
        let mut start = state.0.clone();
        let affected: Vec<usize> = match action {
            Action::Noop => vec![],
            Action::Do(s) => {
                start[s.target] = s.value;
                self.truth.orders[u]
                    .iter()
                    .copied()
                    .filter(|&j| self.truth.downstream[u][s.target][j])
                    .collect()
            }
        };
        let mut frontier = vec![(start, 1.0)];
        for &j in &affected {
            let table = &self.truth.tables[u][j];
            let mut grown = Vec::new();
            for (vals, pr) in frontier {
                let m = table.mode(&vals, &self.cards);
                for v in 0..table.card {
                    let q = table.probability(v, m);
                    if q > 0.0 {
                        let mut nv = vals.clone();
                        nv[j] = v;
                        grown.push((nv, pr * q));
                    }
                }
            }
            if grown.len() > cap {
                return Err(EnvError::TooManyOutcomes(cap));
            }
            frontier = grown;
        }
        let mut merged: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for (v, pr) in frontier {
            *merged.entry(v).or_insert(0.0) += pr;
        }
        Ok(merged.into_iter().map(|(v, pr)| (EnvState(v), pr)).collect())
    }

    /// Per-node marginals of the next state.
    pub fn next_marginals(&self, state: &EnvState, action: &Action) -> Result<Vec<Vec<f64>>, EnvError> {
        let dist = self.next_distribution(state, action, 1 << 20)?;
        let mut out: Vec<Vec<f64>> = self.cards.iter().map(|&n| vec![0.0; n]).collect();
        for (s, pr) in dist {
            for (j, &v) in s.0.iter().enumerate() {
                out[j][v] += pr;
            }
        }
        Ok(out)
    }

    /// Replace `n_noise` distinct non-root nodes with uniform values.
    pub fn corrupt(
        &self,
        state: &EnvState,
        n_noise: usize,
        rng: &mut RandomSource,
    ) -> Result<EnvState, EnvError> {
        corrupt(state, &self.cards, n_noise, rng)
    }
}

/// Node 0 is the root and is never touched.
pub fn corrupt(
    state: &EnvState,
    cards: &[usize],
    n_noise: usize,
    rng: &mut RandomSource,
) -> Result<EnvState, EnvError> {
    let available = state.len().saturating_sub(1);
    if n_noise > available {
        return Err(EnvError::TooMuchNoise {
            requested: n_noise,
            available,
        });
    }
    let mut out = state.clone();
    for k in rng.choose_distinct(available, n_noise) {
        let j = k + 1;
        out.0[j] = rng.below(cards[j]);
    }
    Ok(out)
}

/// `step state action next` per line, values comma-separated.
pub fn write_trajectory(records: &[TransitionRecord]) -> String {
    let mut s = String::new();
    for (t, r) in records.iter().enumerate() {
        s.push_str(&format!("{t} {} {} {}\n", r.state, r.action, r.next_state));
    }
    s
}

/// Parsed `(step, state, action, next)` rows.
pub fn read_trajectory(text: &str) -> Result<Vec<(usize, EnvState, Action, EnvState)>, EnvError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| EnvError::Trajectory { line: n + 1, detail };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", f.len())));
        }
        let t = f[0].parse().map_err(|e| err(format!("step: {e}")))?;
        let s = f[1].parse().map_err(err)?;
        let a = f[2].parse().map_err(err)?;
        let x = f[3].parse().map_err(err)?;
        out.push((t, s, a, x));
    }
    Ok(out)
}
