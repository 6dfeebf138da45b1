//! Intervention reachability over the one-hot Kronecker state space.
//!
//! Operators follow `F[k,i] = 1` iff state `k` is obtainable from state `i`,
//! so they act on column vectors from the left. Both operators are stored as
//! per-source successor lists.

use std::collections::BTreeMap;

use crate::envsim::{state_from_index, state_index, Action, EnvError, EnvState, Environment};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ReachError {
    #[error("state {values:?} outside cardinalities {cards:?}")]
    OutOfRange { values: Vec<usize>, cards: Vec<usize> },
    #[error("state space of {n} exceeds the cap {cap}; restrict the analysis to a variable subset")]
    TooLarge { n: usize, cap: usize },
    #[error("intervenable variable {0} does not exist")]
    UnknownVariable(usize),
    #[error("operator row count {found} does not match state count {expected}")]
    Shape { expected: usize, found: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

pub const DEFAULT_STATE_CAP: usize = 100_000;

/// Single active entry of the Kronecker one-hot vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OneHotState {
    pub index: usize,
    pub size: usize,
}

impl OneHotState {
    pub fn to_vector(&self) -> Vec<u8> {
        let mut v = vec![0; self.size];
        v[self.index] = 1;
        v
    }
}

/// Mixed-radix index with the first variable varying fastest.
pub fn encode(state: &EnvState, cards: &[usize]) -> Result<OneHotState, ReachError> {
    if state.len() != cards.len() || state.0.iter().zip(cards).any(|(v, n)| v >= n) {
        return Err(ReachError::OutOfRange {
            values: state.0.clone(),
            cards: cards.to_vec(),
        });
    }
    Ok(OneHotState {
        index: state_index(&state.0, cards),
        size: cards.iter().product(),
    })
}

pub fn decode(z: OneHotState, cards: &[usize]) -> EnvState {
    state_from_index(z.index, cards)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReachOperators {
    cards: Vec<usize>,
    /// `f[i]` lists every `k` with `F[k,i] = 1`, sorted.
    f: Vec<Vec<u32>>,
    t: Vec<Vec<u32>>,
}

impl ReachOperators {
    /// From dense 0/1 matrices indexed `[row k][column i]`.
    pub fn from_dense(cards: &[usize], f: &[Vec<u8>], t: &[Vec<u8>]) -> Result<Self, ReachError> {
        let n: usize = cards.iter().product();
        let cols = |m: &[Vec<u8>]| -> Result<Vec<Vec<u32>>, ReachError> {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(ReachError::Shape {
                    expected: n,
                    found: m.len(),
                });
            }
            Ok((0..n)
                .map(|i| (0..n).filter(|&k| m[k][i] != 0).map(|k| k as u32).collect())
                .collect())
        };
        let ops = ReachOperators {
            cards: cards.to_vec(),
            f: cols(f)?,
            t: cols(t)?,
        };
        Ok(ops)
    }

    pub fn size(&self) -> usize {
        self.f.len()
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn f_dense(&self) -> Vec<Vec<u8>> {
        dense(&self.f)
    }

    pub fn t_dense(&self) -> Vec<Vec<u8>> {
        dense(&self.t)
    }

    pub fn apply_f(&self, v: &[bool]) -> Vec<bool> {
        apply(&self.f, v)
    }

    pub fn apply_t(&self, v: &[bool]) -> Vec<bool> {
        apply(&self.t, v)
    }

    /// Pairs `(i, k)` with `(TF)[k,i] = 1`.
    pub fn cycle_successors(&self, i: usize) -> Vec<usize> {
        let mut v = vec![false; self.size()];
        v[i] = true;
        let out = self.apply_t(&self.apply_f(&v));
        (0..out.len()).filter(|&k| out[k]).collect()
    }
}

fn dense(cols: &[Vec<u32>]) -> Vec<Vec<u8>> {
    let n = cols.len();
    let mut m = vec![vec![0u8; n]; n];
    for (i, ks) in cols.iter().enumerate() {
        for &k in ks {
            m[k as usize][i] = 1;
        }
    }
    m
}

fn apply(cols: &[Vec<u32>], v: &[bool]) -> Vec<bool> {
    let mut out = vec![false; cols.len()];
    for (i, ks) in cols.iter().enumerate() {
        if v[i] {
            for &k in ks {
                out[k as usize] = true;
            }
        }
    }
    out
}

fn check_size(cards: &[usize], cap: usize) -> Result<usize, ReachError> {
    let n = cards
        .iter()
        .try_fold(1usize, |acc, &c| acc.checked_mul(c))
        .unwrap_or(usize::MAX);
    if n > cap {
        return Err(ReachError::TooLarge { n, cap });
    }
    Ok(n)
}

/// `F` sets any subset of the intervenable variables to any values; `T` is
/// the support of `dynamics`.
pub fn build_from_dynamics(
    cards: &[usize],
    intervenable: &[usize],
    dynamics: impl Fn(&EnvState) -> Vec<EnvState>,
    cap: usize,
) -> Result<ReachOperators, ReachError> {
    let n = check_size(cards, cap)?;
    if let Some(&bad) = intervenable.iter().find(|&&i| i >= cards.len()) {
        return Err(ReachError::UnknownVariable(bad));
    }
    let mut f = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let s = state_from_index(i, cards);
        let mut reach = vec![s.0.clone()];
        for &var in intervenable {
            reach = reach
                .into_iter()
                .flat_map(|vals| {
                    (0..cards[var]).map(move |v| {
                        let mut w = vals.clone();
                        w[var] = v;
                        w
                    })
                })
                .collect();
        }
        f.push(sorted_indices(reach.iter().map(|v| state_index(v, cards))));
        t.push(sorted_indices(dynamics(&s).iter().map(|x| x.index(cards))));
    }
    Ok(ReachOperators {
        cards: cards.to_vec(),
        f,
        t,
    })
}

/// Operators of an environment: `F` holds the outcome support of every
/// single-variable intervention on `intervenable` (plus the state itself),
/// `T` the support of the uncontrolled step.
pub fn build_operators(env: &Environment, intervenable: &[usize], cap: usize) -> Result<ReachOperators, ReachError> {
    let cards = env.cards();
    let n = check_size(cards, cap)?;
    if let Some(&bad) = intervenable.iter().find(|&&i| i >= cards.len()) {
        return Err(ReachError::UnknownVariable(bad));
    }
    let mut f = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let s = state_from_index(i, cards);
        let mut ks = vec![i];
        for &var in intervenable {
            for v in 0..cards[var] {
                for (x, pr) in env.next_distribution(&s, &Action::intervene(var, v), cap)? {
                    if pr > 0.0 {
                        ks.push(x.index(cards));
                    }
                }
            }
        }
        f.push(sorted_indices(ks.into_iter()));
        let natural = env.next_distribution(&s, &Action::Noop, cap)?;
        t.push(sorted_indices(
            natural.iter().filter(|(_, pr)| *pr > 0.0).map(|(x, _)| x.index(cards)),
        ));
    }
    Ok(ReachOperators {
        cards: cards.to_vec(),
        f,
        t,
    })
}

fn sorted_indices(it: impl Iterator<Item = usize>) -> Vec<u32> {
    let mut v: Vec<u32> = it.map(|k| k as u32).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Minimal `k` with `[(TF)^k z0][i] > 0` for every reached `i`, `k <= max_k`.
pub fn reachable_set(ops: &ReachOperators, z0: OneHotState, max_k: usize) -> BTreeMap<usize, usize> {
    cycle_sets(ops, z0, max_k).0
}

/// Minimal `k` with `[F(TF)^k z0][i] > 0` for every feasible `i`, `k <= max_k`.
pub fn feasible_interventions(ops: &ReachOperators, z0: OneHotState, max_k: usize) -> BTreeMap<usize, usize> {
    cycle_sets(ops, z0, max_k).1
}

fn cycle_sets(
    ops: &ReachOperators,
    z0: OneHotState,
    max_k: usize,
) -> (BTreeMap<usize, usize>, BTreeMap<usize, usize>) {
    let n = ops.size();
    let mut reach = BTreeMap::new();
    let mut feasible = BTreeMap::new();
    let mut current = vec![false; n];
    current[z0.index] = true;
    let mut seen = vec![false; n];
    let mut seen_feasible = vec![false; n];
    for k in 0..=max_k {
        let mut grew = false;
        for i in 0..n {
            if current[i] && !seen[i] {
                seen[i] = true;
                reach.insert(i, k);
                grew = true;
            }
        }
        let after_f = ops.apply_f(&current);
        for i in 0..n {
            if after_f[i] && !seen_feasible[i] {
                seen_feasible[i] = true;
                feasible.insert(i, k);
                grew = true;
            }
        }
        // Once the union stops growing it never grows again.
        if !grew && k > 0 {
            break;
        }
        current = ops.apply_t(&after_f);
    }
    (reach, feasible)
}

/// `state_index,values,min_k_reach,feasible_flag` rows for every state.
pub fn reach_table_csv(ops: &ReachOperators, z0: OneHotState, max_k: usize) -> String {
    let reach = reachable_set(ops, z0, max_k);
    let feasible = feasible_interventions(ops, z0, max_k);
    let mut s = String::from("state_index,values,min_k_reach,feasible_flag\n");
    for i in 0..ops.size() {
        let vals: Vec<String> = state_from_index(i, &ops.cards)
            .0
            .iter()
            .map(|v| v.to_string())
            .collect();
        let k = reach.get(&i).map(|k| k.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{i},{},{k},{}\n",
            vals.join(" "),
            feasible.contains_key(&i) as u8
        ));
    }
    s
}
