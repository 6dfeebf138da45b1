//! Graph algebra over causal skeleton matrices.

use std::fmt;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("graphs over {left} and {right} nodes cannot be combined")]
    SizeMismatch { left: usize, right: usize },
    #[error("diagonal entry ({0},{0}) must be zero")]
    SelfLoop(usize),
    #[error("intervention target {index} out of range for {p} nodes")]
    TargetOutOfRange { index: usize, p: usize },
    #[error("skeleton text: {0}")]
    Parse(String),
    #[error("assignment lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Binary parent matrix: entry `[i][j]` set means `i` is a parent of `j`.
///
/// Learned masks and unions of DAGs may contain cycles; such matrices carry
/// the `relaxed` flag. Equality ignores the flag.
#[derive(Clone, Eq, Hash)]
pub struct SkeletonMatrix {
    p: usize,
    entries: Vec<bool>,
    relaxed: bool,
}

impl PartialEq for SkeletonMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p && self.entries == other.entries
    }
}

impl SkeletonMatrix {
    pub fn empty(p: usize) -> Self {
        SkeletonMatrix {
            p,
            entries: vec![false; p * p],
            relaxed: false,
        }
    }

    pub fn from_edges(p: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut g = SkeletonMatrix::empty(p);
        for &(i, j) in edges {
            for k in [i, j] {
                if k >= p {
                    return Err(GraphError::TargetOutOfRange { index: k, p });
                }
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            g.entries[i * p + j] = true;
        }
        Ok(g)
    }

    /// Build from 0/1 rows.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, GraphError> {
        let p = rows.len();
        let mut g = SkeletonMatrix::empty(p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(GraphError::Parse(format!(
                    "row {i} has {} entries, expected {p}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 if i == j => return Err(GraphError::SelfLoop(i)),
                    1 => g.entries[i * p + j] = true,
                    _ => return Err(GraphError::Parse(format!("entry ({i},{j}) is {v}"))),
                }
            }
        }
        g.relaxed = !g.is_acyclic();
        Ok(g)
    }

    /// Threshold a probability matrix (row-major `p*p`) at `threshold`.
    pub fn from_probabilities(p: usize, probs: &[f64], threshold: f64) -> Self {
        assert_eq!(probs.len(), p * p);
        let mut g = SkeletonMatrix::empty(p);
        for i in 0..p {
            for j in 0..p {
                g.entries[i * p + j] = i != j && probs[i * p + j] > threshold;
            }
        }
        g.relaxed = !g.is_acyclic();
        g
    }

    /// `0 -> 1 -> ... -> p-1`.
    pub fn chain(p: usize) -> Self {
        let edges: Vec<_> = (1..p).map(|j| (j - 1, j)).collect();
        SkeletonMatrix::from_edges(p, &edges).unwrap()
    }

    /// Node 0 is the parent of every other node.
    pub fn fork(p: usize) -> Self {
        let edges: Vec<_> = (1..p).map(|j| (0, j)).collect();
        SkeletonMatrix::from_edges(p, &edges).unwrap()
    }

    /// Every `i -> j` with `i < j`.
    pub fn full(p: usize) -> Self {
        let edges: Vec<_> = (0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).collect();
        SkeletonMatrix::from_edges(p, &edges).unwrap()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.p + j]
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        assert!(i != j || !on, "self-loop ({i},{i})");
        self.entries[i * self.p + j] = on;
    }

    pub fn is_relaxed(&self) -> bool {
        self.relaxed
    }

    pub fn edge_count(&self) -> usize {
        self.entries.iter().filter(|&&e| e).count()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let p = self.p;
        (0..p * p)
            .filter(|&k| self.entries[k])
            .map(|k| (k / p, k % p))
            .collect()
    }

    pub fn parents(&self, j: usize) -> Vec<usize> {
        (0..self.p).filter(|&i| self.get(i, j)).collect()
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.p).filter(|&j| self.get(i, j)).collect()
    }

    /// Kahn's algorithm, smallest ready index first; `None` on a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let p = self.p;
        let mut indeg: Vec<usize> = (0..p).map(|j| self.parents(j).len()).collect();
        let mut order = Vec::with_capacity(p);
        let mut done = vec![false; p];
        while order.len() < p {
            let next = (0..p).find(|&j| !done[j] && indeg[j] == 0)?;
            done[next] = true;
            order.push(next);
            for c in self.children(next) {
                indeg[c] -= 1;
            }
        }
        Some(order)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }

    /// Nodes reachable from `i` along directed edges, excluding `i`.
    pub fn descendants(&self, i: usize) -> Vec<usize> {
        let mut seen = vec![false; self.p];
        let mut stack = vec![i];
        while let Some(n) = stack.pop() {
            for c in self.children(n) {
                if !seen[c] {
                    seen[c] = true;
                    stack.push(c);
                }
            }
        }
        (0..self.p).filter(|&k| seen[k] && k != i).collect()
    }

    /// Row-major 0/1 values.
    pub fn to_f64(&self) -> Vec<f64> {
        self.entries.iter().map(|&e| e as u8 as f64).collect()
    }

    /// `p` on the first line, then `p` rows of space-separated 0/1.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.p);
        for i in 0..self.p {
            let row: Vec<&str> = (0..self.p)
                .map(|j| if self.get(i, j) { "1" } else { "0" })
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self, GraphError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let p: usize = lines
            .next()
            .ok_or_else(|| GraphError::Parse("missing size line".into()))?
            .parse()
            .map_err(|e| GraphError::Parse(format!("size line: {e}")))?;
        let mut rows = Vec::with_capacity(p);
        for i in 0..p {
            let line = lines
                .next()
                .ok_or_else(|| GraphError::Parse(format!("missing row {i}")))?;
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<u8>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| GraphError::Parse(format!("row {i}: {e}")))?;
            rows.push(row);
        }
        SkeletonMatrix::from_rows(&rows)
    }
}

impl fmt::Debug for SkeletonMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SkeletonMatrix(p={}, edges={:?})", self.p, self.edges())
    }
}

impl fmt::Display for SkeletonMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Family of intervention targets `{I_k}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterventionTargetSet {
    targets: Vec<Vec<usize>>,
}

impl InterventionTargetSet {
    pub fn new(p: usize, targets: Vec<Vec<usize>>) -> Result<Self, GraphError> {
        for t in &targets {
            if let Some(&index) = t.iter().find(|&&i| i >= p) {
                return Err(GraphError::TargetOutOfRange { index, p });
            }
        }
        Ok(InterventionTargetSet { targets })
    }

    pub fn singletons(p: usize, nodes: impl IntoIterator<Item = usize>) -> Result<Self, GraphError> {
        InterventionTargetSet::new(p, nodes.into_iter().map(|i| vec![i]).collect())
    }

    pub fn targets(&self) -> &[Vec<usize>] {
        &self.targets
    }

    pub fn push(&mut self, target: Vec<usize>) {
        self.targets.push(target);
    }
}

/// Remove every edge into a targeted node.
pub fn intervention_graph(g: &SkeletonMatrix, target: &[usize]) -> SkeletonMatrix {
    let mut out = g.clone();
    for &b in target {
        for a in 0..g.p {
            out.entries[a * g.p + b] = false;
        }
    }
    out
}

/// Elementwise OR. The result is always flagged relaxed.
pub fn union_graph(graphs: &[SkeletonMatrix]) -> Result<SkeletonMatrix, GraphError> {
    let first = graphs.first().ok_or(GraphError::Parse("empty graph list".into()))?;
    let mut out = SkeletonMatrix::empty(first.p);
    for g in graphs {
        if g.p != first.p {
            return Err(GraphError::SizeMismatch {
                left: first.p,
                right: g.p,
            });
        }
        for (o, &e) in out.entries.iter_mut().zip(&g.entries) {
            *o |= e;
        }
    }
    out.relaxed = true;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coverage {
    pub covered: bool,
    pub uncovered: Vec<(usize, usize)>,
}

/// Every edge `a -> b` needs a target containing exactly one of `a`, `b`.
pub fn covers_all_edges(g: &SkeletonMatrix, targets: &InterventionTargetSet) -> Coverage {
    let uncovered: Vec<_> = g
        .edges()
        .into_iter()
        .filter(|&(a, b)| {
            !targets
                .targets
                .iter()
                .any(|t| t.contains(&a) != t.contains(&b))
        })
        .collect();
    Coverage {
        covered: uncovered.is_empty(),
        uncovered,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShdReport {
    pub shd: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Directed-entry mismatches of `learned` against `truth`.
///
/// Precision is 1 when nothing is predicted, recall is 1 when the truth has
/// no edges.
pub fn shd(learned: &SkeletonMatrix, truth: &SkeletonMatrix) -> Result<ShdReport, GraphError> {
    if learned.p != truth.p {
        return Err(GraphError::SizeMismatch {
            left: learned.p,
            right: truth.p,
        });
    }
    let mut diff = 0;
    let mut tp = 0;
    for (&a, &b) in learned.entries.iter().zip(&truth.entries) {
        diff += (a != b) as usize;
        tp += (a && b) as usize;
    }
    let predicted = learned.edge_count();
    let actual = truth.edge_count();
    Ok(ShdReport {
        shd: diff,
        precision: if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 },
        recall: if actual == 0 { 1.0 } else { tp as f64 / actual as f64 },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchKind {
    /// Injective code-to-state matching (equal label counts, or fewer codes).
    SwapLabel,
    /// Many-to-one code-to-state mapping (more codes than states).
    Observational,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaMatch {
    pub kind: MatchKind,
    /// `(code label, true label)` pairs of the chosen mapping.
    pub mapping: Vec<(usize, usize)>,
    pub accuracy: f64,
}

impl MetaMatch {
    pub fn target_of(&self, code: usize) -> Option<usize> {
        self.mapping.iter().find(|(c, _)| *c == code).map(|&(_, t)| t)
    }
}

/// Exhaustive permutation search up to this many labels, greedy above.
pub const EXHAUSTIVE_MATCH_LIMIT: usize = 8;

/// Best agreement between learned code labels and true meta-state labels.
pub fn match_meta_states(learned: &[usize], truth: &[usize]) -> Result<MetaMatch, GraphError> {
    if learned.len() != truth.len() {
        return Err(GraphError::LengthMismatch(learned.len(), truth.len()));
    }
    let codes = distinct(learned);
    let states = distinct(truth);
    let n = learned.len();
    // confusion[c][s]
    let mut confusion = vec![vec![0usize; states.len()]; codes.len()];
    for (&l, &t) in learned.iter().zip(truth) {
        let c = codes.binary_search(&l).unwrap();
        let s = states.binary_search(&t).unwrap();
        confusion[c][s] += 1;
    }
    if n == 0 {
        return Ok(MetaMatch {
            kind: MatchKind::SwapLabel,
            mapping: vec![],
            accuracy: 1.0,
        });
    }

    if codes.len() > states.len() {
        let mapping: Vec<(usize, usize)> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let s = argmax_first(row);
                (codes[c], states[s])
            })
            .collect();
        let hits: usize = confusion.iter().map(|row| row[argmax_first(row)]).sum();
        return Ok(MetaMatch {
            kind: MatchKind::Observational,
            mapping,
            accuracy: hits as f64 / n as f64,
        });
    }

    let assignment = if states.len() <= EXHAUSTIVE_MATCH_LIMIT {
        best_injection(&confusion, states.len())
    } else {
        greedy_injection(&confusion, states.len())
    };
    let hits: usize = assignment
        .iter()
        .enumerate()
        .map(|(c, &s)| confusion[c][s])
        .sum();
    Ok(MetaMatch {
        kind: MatchKind::SwapLabel,
        mapping: assignment
            .iter()
            .enumerate()
            .map(|(c, &s)| (codes[c], states[s]))
            .collect(),
        accuracy: hits as f64 / n as f64,
    })
}

fn distinct(labels: &[usize]) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn argmax_first(row: &[usize]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Exhaustive search over injections codes -> states (codes <= states).
fn best_injection(confusion: &[Vec<usize>], n_states: usize) -> Vec<usize> {
    fn rec(
        c: usize,
        confusion: &[Vec<usize>],
        used: &mut Vec<bool>,
        current: &mut Vec<usize>,
        score: usize,
        best: &mut (usize, Vec<usize>),
    ) {
        if c == confusion.len() {
            if score > best.0 || best.1.is_empty() {
                *best = (score, current.clone());
            }
            return;
        }
        for s in 0..used.len() {
            if !used[s] {
                used[s] = true;
                current.push(s);
                rec(c + 1, confusion, used, current, score + confusion[c][s], best);
                current.pop();
                used[s] = false;
            }
        }
    }
    let mut best = (0, Vec::new());
    rec(
        0,
        confusion,
        &mut vec![false; n_states],
        &mut Vec::new(),
        0,
        &mut best,
    );
    best.1
}

fn greedy_injection(confusion: &[Vec<usize>], n_states: usize) -> Vec<usize> {
    let mut cells: Vec<(usize, usize, usize)> = confusion
        .iter()
        .enumerate()
        .flat_map(|(c, row)| row.iter().enumerate().map(move |(s, &v)| (v, c, s)))
        .collect();
    cells.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut assignment = vec![usize::MAX; confusion.len()];
    let mut used = vec![false; n_states];
    for (_, c, s) in cells {
        if assignment[c] == usize::MAX && !used[s] {
            assignment[c] = s;
            used[s] = true;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(p: usize, edges: &[(usize, usize)]) -> SkeletonMatrix {
        SkeletonMatrix::from_edges(p, edges).unwrap()
    }

    #[test]
    fn intervention_graph_examples() {
        let chain = SkeletonMatrix::chain(3);
        assert_eq!(intervention_graph(&chain, &[1]), g(3, &[(1, 2)]));
        assert_eq!(intervention_graph(&chain, &[]), chain);
        let fork = g(3, &[(0, 1), (0, 2)]);
        assert_eq!(intervention_graph(&fork, &[0]), fork);
    }

    #[test]
    fn union_examples() {
        let a = g(4, &[(1, 2)]);
        let b = g(4, &[(1, 3)]);
        let u = union_graph(&[a.clone(), b]).unwrap();
        assert_eq!(u, g(4, &[(1, 2), (1, 3)]));
        assert!(u.is_relaxed());
        assert_eq!(union_graph(&[a.clone(), a.clone()]).unwrap(), a);
        let fork = SkeletonMatrix::fork(10);
        let full = SkeletonMatrix::full(10);
        assert_eq!(union_graph(&[fork, full.clone()]).unwrap(), full);
        assert!(matches!(
            union_graph(&[g(2, &[]), g(3, &[])]),
            Err(GraphError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn coverage_examples() {
        let chain = SkeletonMatrix::chain(3);
        let t = InterventionTargetSet::new(3, vec![vec![0], vec![1]]).unwrap();
        assert!(covers_all_edges(&chain, &t).covered);
        let c2 = SkeletonMatrix::chain(2);
        let both = InterventionTargetSet::new(2, vec![vec![0, 1]]).unwrap();
        let cov = covers_all_edges(&c2, &both);
        assert!(!cov.covered);
        assert_eq!(cov.uncovered, vec![(0, 1)]);
        assert!(InterventionTargetSet::new(2, vec![vec![2]]).is_err());
    }

    #[test]
    fn shd_examples() {
        let a = SkeletonMatrix::chain(4);
        let r = shd(&a, &a).unwrap();
        assert_eq!((r.shd, r.precision, r.recall), (0, 1.0, 1.0));
        let mut extra = a.clone();
        extra.set(0, 3, true);
        let r = shd(&extra, &a).unwrap();
        assert_eq!(r.shd, 1);
        assert_eq!(r.recall, 1.0);
        assert!((r.precision - 0.75).abs() < 1e-12);
    }

    #[test]
    fn matching_examples() {
        let truth = [0, 0, 1, 1, 0, 1];
        let swapped = [1, 1, 0, 0, 1, 0];
        let m = match_meta_states(&swapped, &truth).unwrap();
        assert_eq!(m.kind, MatchKind::SwapLabel);
        assert_eq!(m.accuracy, 1.0);
        let refined = [0, 2, 1, 3, 2, 3];
        let m = match_meta_states(&refined, &truth).unwrap();
        assert_eq!(m.kind, MatchKind::Observational);
        assert_eq!(m.accuracy, 1.0);
        assert!(match_meta_states(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn text_round_trip_and_errors() {
        let full = SkeletonMatrix::full(4);
        let text = full.to_text();
        assert!(text.starts_with("4\n0 1 1 1\n"));
        assert_eq!(SkeletonMatrix::parse_text(&text).unwrap(), full);
        assert!(matches!(
            SkeletonMatrix::parse_text("2\n1 0\n0 0\n"),
            Err(GraphError::SelfLoop(0))
        ));
        assert!(SkeletonMatrix::parse_text("2\n0 1\n").is_err());
    }

    #[test]
    fn topological_order_and_cycles() {
        assert_eq!(SkeletonMatrix::chain(4).topological_order(), Some(vec![0, 1, 2, 3]));
        let cyc = g(3, &[(0, 1), (1, 2), (2, 0)]);
        assert!(!cyc.is_acyclic());
        assert_eq!(SkeletonMatrix::chain(4).descendants(1), vec![2, 3]);
    }

    fn arb_graph(p: usize) -> impl Strategy<Value = SkeletonMatrix> {
        proptest::collection::vec(any::<bool>(), p * p).prop_map(move |bits| {
            let mut m = SkeletonMatrix::empty(p);
            for i in 0..p {
                for j in 0..p {
                    if i != j && bits[i * p + j] {
                        m.set(i, j, true);
                    }
                }
            }
            m
        })
    }

    proptest! {
        #[test]
        fn union_laws(a in arb_graph(5), b in arb_graph(5), c in arb_graph(5)) {
            let ab = union_graph(&[a.clone(), b.clone()]).unwrap();
            prop_assert_eq!(&ab, &union_graph(&[b.clone(), a.clone()]).unwrap());
            let ab_c = union_graph(&[ab.clone(), c.clone()]).unwrap();
            let bc = union_graph(&[b.clone(), c.clone()]).unwrap();
            prop_assert_eq!(&ab_c, &union_graph(&[a.clone(), bc]).unwrap());
            prop_assert_eq!(&union_graph(&[a.clone(), a.clone()]).unwrap(), &a);
            let n = ab.edge_count();
            prop_assert!(n >= a.edge_count().max(b.edge_count()));
            if a != b {
                prop_assert!(n > a.edge_count().min(b.edge_count()));
            }
        }

        #[test]
        fn intervention_graph_cuts_in_edges(a in arb_graph(6), t in proptest::collection::vec(0usize..6, 0..4)) {
            let cut = intervention_graph(&a, &t);
            for &b in &t {
                prop_assert!(cut.parents(b).is_empty());
            }
            for (i, j) in a.edges() {
                if !t.contains(&j) {
                    prop_assert!(cut.get(i, j));
                }
            }
        }

        #[test]
        fn coverage_is_monotone(a in arb_graph(5), t in proptest::collection::vec(proptest::collection::vec(0usize..5, 1..3), 0..4), extra in proptest::collection::vec(0usize..5, 1..3)) {
            let base = InterventionTargetSet::new(5, t.clone()).unwrap();
            let before = covers_all_edges(&a, &base);
            let mut more = base.clone();
            more.push(extra);
            let after = covers_all_edges(&a, &more);
            prop_assert!(after.uncovered.iter().all(|e| before.uncovered.contains(e)));
        }

        #[test]
        fn shd_is_xor_popcount(a in arb_graph(5), b in arb_graph(5)) {
            let x = a.to_f64();
            let y = b.to_f64();
            let pop = x.iter().zip(&y).filter(|(u, v)| u != v).count();
            prop_assert_eq!(shd(&a, &b).unwrap().shd, pop);
        }

        #[test]
        fn matching_is_relabel_invariant(
            truth in proptest::collection::vec(0usize..3, 1..60),
            noise in proptest::collection::vec(0usize..4, 60),
            perm in Just(vec![2usize, 0, 3, 1]).prop_shuffle(),
        ) {
            let learned: Vec<usize> = truth.iter().zip(&noise).map(|(&t, &n)| if n == 0 { (t + 1) % 4 } else { t }).collect();
            let base = match_meta_states(&learned, &truth).unwrap().accuracy;
            let relabeled: Vec<usize> = learned.iter().map(|&l| perm[l] + 10).collect();
            let other = match_meta_states(&relabeled, &truth).unwrap().accuracy;
            prop_assert!((base - other).abs() < 1e-12);
            let truth_relabeled: Vec<usize> = truth.iter().map(|&t| 7 - t).collect();
            let third = match_meta_states(&learned, &truth_relabeled).unwrap().accuracy;
            prop_assert!((base - third).abs() < 1e-12);
        }
    }
}
