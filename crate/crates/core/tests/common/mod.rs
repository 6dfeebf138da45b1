//! Shared oracles for the integration tests: central finite differences and
//! a breadth-first reachability search.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use mcg_core::agent::{loss_mask_tape, EffectEstimate, EntryStatus};
use mcg_core::envsim::{Action, EnvState, TransitionRecord};
use mcg_core::numkit::{
    forward_mlp, gumbel_bernoulli, Activation, RandomSource, Tape, Tensor, Var,
};
use mcg_core::reach::ReachOperators;
use mcg_core::worldmodel::{loss_quantization_tape, loss_sparse_tape, ModelConfig, WorldModel};

pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude on both sides are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
    /// Entries whose one-sided differences disagree: the step straddles a
    /// relu or clamp kink.
    pub kinks: usize,
}

impl FdReport {
    pub fn merge(&mut self, o: &FdReport) {
        self.max_rel = self.max_rel.max(o.max_rel);
        self.checked += o.checked;
        self.kinks += o.kinks;
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Compare `analytic[k]` with central differences of `f` along entry `k` of
/// a flat parameter vector, for the entries in `probe`.
pub fn compare<F>(x: &[f64], analytic: &[f64], probe: &[usize], mut f: F) -> FdReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut rep = FdReport::default();
    let f0 = f(x);
    for &k in probe {
        let mut xp = x.to_vec();
        xp[k] += FD_STEP;
        let fp = f(&xp);
        xp[k] = x[k] - FD_STEP;
        let fm = f(&xp);
        let fwd = (fp - f0) / FD_STEP;
        let bwd = (f0 - fm) / FD_STEP;
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1.0) {
            rep.kinks += 1;
            continue;
        }
        let num = (fp - fm) / (2.0 * FD_STEP);
        rep.max_rel = rep.max_rel.max(rel_err(analytic[k], num));
        rep.checked += 1;
    }
    rep
}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(shapes: &[Tensor], flat: &[f64]) -> Vec<Tensor> {
    let mut at = 0;
    shapes
        .iter()
        .map(|t| {
            let n = t.len();
            let out = Tensor::new(t.shape().to_vec(), flat[at..at + n].to_vec());
            at += n;
            out
        })
        .collect()
}

/// Finite-difference check of a scalar built from leaf tensors.
pub fn check_leaves<B>(leaves: &[Tensor], build: B) -> FdReport
where
    B: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| grads.get(&tape, v).into_data())
        .collect();
    let x = flatten(leaves);
    let probe: Vec<usize> = (0..x.len()).collect();
    compare(&x, &analytic, &probe, |xs| {
        let mut t = Tape::new();
        let vs: Vec<Var> = unflatten(leaves, xs).into_iter().map(|l| t.leaf(l)).collect();
        let l = build(&mut t, &vs);
        t.value(l).item()
    })
}

/// Finite-difference check of a loss over every model parameter, probing
/// `probes` random entries.
pub fn check_model<B>(model: &WorldModel, probes: usize, rng: &mut RandomSource, build: B) -> FdReport
where
    B: Fn(&WorldModel, &mut Tape) -> (Var, Vec<Var>),
{
    let mut tape = Tape::new();
    let (loss, vars) = build(model, &mut tape);
    let grads = tape.backward(loss).expect("scalar loss");
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| grads.get(&tape, v).into_data())
        .collect();
    let shapes: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let x = flatten(&shapes);
    assert_eq!(x.len(), analytic.len(), "bound vars follow params order");
    // Half the probes on entries with a visible gradient, half uniform.
    let live: Vec<usize> = (0..x.len()).filter(|&k| analytic[k].abs() > 1e-6).collect();
    let mut probe = Vec::with_capacity(probes);
    for n in 0..probes {
        if n % 2 == 0 && !live.is_empty() {
            probe.push(live[rng.below(live.len())]);
        } else {
            probe.push(rng.below(x.len()));
        }
    }
    compare(&x, &analytic, &probe, |xs| {
        let mut m = model.clone();
        for (dst, src) in m.params_mut().into_iter().zip(unflatten(&shapes, xs)) {
            *dst = src;
        }
        let mut t = Tape::new();
        let (l, _) = build(&m, &mut t);
        t.value(l).item()
    })
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut RandomSource) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(lo, hi)).collect())
}

/// A random chain touching every differentiable tape operator. `detach` is
/// left out: finite differences cannot see a stop-gradient.
pub fn operator_chain_case(rng: &mut RandomSource) -> FdReport {
    let (n, m, k) = (2 + rng.below(3), 2 + rng.below(3), 3 + rng.below(3));
    let leaves = vec![
        random_tensor(&[n, m], -1.0, 1.0, rng),
        random_tensor(&[m, k], -1.0, 1.0, rng),
        random_tensor(&[k], -0.5, 0.5, rng),
        random_tensor(&[n, k], 0.2, 2.0, rng),
        random_tensor(&[n, k], 0.05, 0.95, rng),
    ];
    let rows: Vec<usize> = (0..n + 1).map(|_| rng.below(n)).collect();
    let cols: Vec<usize> = (0..k + 1).map(|_| rng.below(k)).collect();
    let picks: Vec<usize> = (0..rows.len()).map(|_| rng.below(cols.len())).collect();
    let noise_seed = rng.below(1 << 30) as u64;
    let temp = rng.range(0.3, 2.0);
    check_leaves(&leaves, |t, v| {
        let (a, b, bias, c, prob) = (v[0], v[1], v[2], v[3], v[4]);
        let x = t.matmul(a, b);
        let x = t.add_bias(x, bias);
        let th = t.tanh(x);
        let sg = t.sigmoid(x);
        let re = t.relu(x);
        let cl = t.clamp(x, -0.4, 0.4);
        let m1 = t.mul(th, sg);
        let m2 = t.add(m1, re);
        let m3 = t.sub(m2, cl);
        let lc = t.log(c);
        let m4 = t.mul(m3, lc);
        let sc = t.scale(m4, 0.7);
        let of = t.offset(sc, 0.3);
        let half = t.scale(of, 0.5);
        let ex = t.exp(half);
        let ls = t.log_softmax(ex);
        let sel = t.select_rows(ls, rows.clone());
        let g = t.gather_cols(sel, cols.clone());
        let pk = t.pick_per_row(g, picks.clone());
        let s1 = t.sum(pk);
        let sr = t.sum_rows(ex);
        let s2 = t.mean(sr);
        let sq = t.sq_dist_rows(th, c);
        let s3 = t.sum(sq);
        let mut noise = RandomSource::new(noise_seed, "fd-gumbel");
        let gb = gumbel_bernoulli(t, prob, temp, &mut noise, false).expect("positive temperature");
        let gw = t.mul(gb, c);
        let s4 = t.mean(gw);
        let total = t.add(s1, s2);
        let total = t.add(total, s3);
        t.add(total, s4)
    })
}

/// Two-layer tanh network followed by a relu layer through `forward_mlp`.
pub fn mlp_case(rng: &mut RandomSource) -> FdReport {
    let leaves = vec![
        random_tensor(&[4, 3], -1.0, 1.0, rng),
        random_tensor(&[3, 5], -1.0, 1.0, rng),
        random_tensor(&[5], -0.5, 0.5, rng),
        random_tensor(&[5, 2], -1.0, 1.0, rng),
        random_tensor(&[2], -0.5, 0.5, rng),
        random_tensor(&[2, 3], -1.0, 1.0, rng),
        random_tensor(&[3], -0.5, 0.5, rng),
    ];
    check_leaves(&leaves, |t, v| {
        let h = forward_mlp(t, &[(v[1], v[2]), (v[3], v[4])], v[0], Activation::Tanh).unwrap();
        let o = forward_mlp(t, &[(v[5], v[6])], h, Activation::Relu).unwrap();
        let sq = t.mul(o, o);
        t.sum(sq)
    })
}

pub fn small_model(rng: &mut RandomSource) -> WorldModel {
    let cards = [2, 3, 2];
    let cfg = ModelConfig {
        codebook_size: 3,
        embed_dim: 4,
        hidden: 6,
        ..ModelConfig::default()
    };
    WorldModel::new(&cards, cfg, rng).unwrap()
}

pub fn random_records(cards: &[usize], n: usize, rng: &mut RandomSource) -> Vec<TransitionRecord> {
    (0..n)
        .map(|_| {
            let s = EnvState(cards.iter().map(|&c| rng.below(c)).collect());
            let x = EnvState(cards.iter().map(|&c| rng.below(c)).collect());
            let action = if rng.bernoulli(0.3) {
                Action::Noop
            } else {
                let i = rng.below(cards.len());
                Action::intervene(i, rng.below(cards[i]))
            };
            TransitionRecord {
                state: s,
                action,
                next_state: x,
                true_meta: 0,
            }
        })
        .collect()
}

pub fn random_effect(p: usize, rng: &mut RandomSource) -> EffectEstimate {
    let mut e = EffectEstimate::unestimated(p);
    for k in 0..p * p {
        if k / p != k % p && rng.bernoulli(0.8) {
            e.delta[k] = rng.range(0.0, 1.0);
            e.counts[k] = 100;
            e.status[k] = EntryStatus::Measured;
        }
    }
    e
}

/// Which of the four training losses to check.
#[derive(Clone, Copy, Debug)]
pub enum LossKind {
    Mle,
    Sparse,
    Mask,
    Quant,
}

/// Loss gradients through codebook rows, decoder and predictors; the
/// straight-through encoder path is not a smooth function and is excluded.
pub fn loss_case(kind: LossKind, rng: &mut RandomSource) -> FdReport {
    let model = small_model(rng);
    let recs = random_records(model.cards(), 4, rng);
    let refs: Vec<&TransitionRecord> = recs.iter().collect();
    let batch = model.encode_batch(&refs).unwrap();
    let codes: Vec<usize> = (0..recs.len()).map(|_| rng.below(model.k())).collect();
    let effects: Vec<EffectEstimate> = (0..recs.len()).map(|_| random_effect(model.p(), rng)).collect();
    let e_fixed = random_tensor(&[recs.len(), model.config.embed_dim], -0.5, 0.5, rng);
    let beta = model.config.beta;
    match kind {
        LossKind::Quant => {
            // Codebook term against a frozen embedding, commitment term
            // against a frozen prototype.
            let z = random_tensor(&[recs.len(), model.config.embed_dim], -0.5, 0.5, rng);
            let mut rep = FdReport::default();
            // The combined loss must split into the two stop-gradient halves.
            let mut tape = Tape::new();
            let ev = tape.leaf(e_fixed.clone());
            let zv = tape.leaf(z.clone());
            let l = loss_quantization_tape(&mut tape, ev, zv, beta);
            let g = tape.backward(l).unwrap();
            let rows = e_fixed.rows() as f64;
            for (k, (&e, &zz)) in e_fixed.data().iter().zip(z.data()).enumerate() {
                let gz = g.get(&tape, zv).data()[k];
                let ge = g.get(&tape, ev).data()[k];
                rep.max_rel = rep.max_rel.max(rel_err(gz, 2.0 * (zz - e) / rows));
                rep.max_rel = rep.max_rel.max(rel_err(ge, 2.0 * beta * (e - zz) / rows));
                rep.checked += 2;
            }
            // Finite differences of each half with its counterpart frozen.
            let half = |t: &mut Tape, a: Var, b: Var, w: f64| {
                let d = t.sq_dist_rows(a, b);
                let s = t.sum(d);
                t.scale(s, w / rows)
            };
            let zc = z.clone();
            let by_z = check_leaves(&[z.clone()], |t, v| {
                let e = t.constant(e_fixed.clone());
                half(t, e, v[0], 1.0)
            });
            let by_e = check_leaves(&[e_fixed.clone()], |t, v| {
                let zz = t.constant(zc.clone());
                half(t, v[0], zz, beta)
            });
            rep.merge(&by_z);
            rep.merge(&by_e);
            rep
        }
        _ => check_model(&model, 24, rng, |m, t| {
            let bound = m.bind(t);
            let z = t.select_rows(bound.codebook, codes.clone());
            let logits = m.decode_logits_tape(t, &bound, z).unwrap();
            let loss = match kind {
                LossKind::Mle => {
                    let probs = m.probs_from_logits(t, logits);
                    m.mle_tape(t, &bound, probs, &batch)
                }
                LossKind::Sparse => {
                    let probs = m.probs_from_logits(t, logits);
                    loss_sparse_tape(t, probs)
                }
                LossKind::Mask => {
                    let refs: Vec<&EffectEstimate> = effects.iter().collect();
                    loss_mask_tape(t, logits, &refs, 0.3, 1.0, 1.0)
                }
                LossKind::Quant => unreachable!(),
            };
            (loss, bound.vars())
        }),
    }
}

/// Breadth-first search over the explicit one-cycle relation `(TF)[k,i]`.
pub fn bfs_reach(ops: &ReachOperators, start: usize) -> BTreeMap<usize, usize> {
    let mut dist = BTreeMap::new();
    dist.insert(start, 0);
    let mut queue = VecDeque::from([start]);
    while let Some(i) = queue.pop_front() {
        let d = dist[&i];
        for k in ops.cycle_successors(i) {
            if !dist.contains_key(&k) {
                dist.insert(k, d + 1);
                queue.push_back(k);
            }
        }
    }
    dist
}

/// Random boolean operators over a random mixed-radix space of at most
/// `max_n` states; `T` has non-empty columns.
pub fn random_operators(max_n: usize, rng: &mut RandomSource) -> ReachOperators {
    let cards = loop {
        let p = 1 + rng.below(4);
        let cards: Vec<usize> = (0..p).map(|_| 2 + rng.below(4)).collect();
        if cards.iter().product::<usize>() <= max_n {
            break cards;
        }
    };
    let n: usize = cards.iter().product();
    let df = rng.range(0.5, 3.0) / n as f64;
    let dt = rng.range(0.5, 2.0) / n as f64;
    let mut f = vec![vec![0u8; n]; n];
    let mut t = vec![vec![0u8; n]; n];
    for i in 0..n {
        f[i][i] = 1;
        t[rng.below(n)][i] = 1;
        for k in 0..n {
            if rng.bernoulli(df) {
                f[k][i] = 1;
            }
            if rng.bernoulli(dt) {
                t[k][i] = 1;
            }
        }
    }
    ReachOperators::from_dense(&cards, &f, &t).unwrap()
}
