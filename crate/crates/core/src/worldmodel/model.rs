use crate::envsim::{Action, EnvDescriptor, EnvState, Environment, TransitionRecord};
use crate::metagraph::SkeletonMatrix;
use crate::numkit::{
    bernoulli_entropy, sample_gumbel_bernoulli, sigmoid, Activation, Mlp, NumkitError,
    RandomSource, Tape, Tensor, Var, PROB_EPS,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("code {code} out of range for a codebook of {k}")]
    CodeOutOfRange { code: usize, k: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Numeric(#[from] NumkitError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub codebook_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub lambda_sparse: f64,
    pub lambda_mask: f64,
    pub lambda_quant: f64,
    pub beta: f64,
    pub temp_start: f64,
    pub temp_end: f64,
    pub fusion_cos: f64,
    /// Skeleton L1 threshold as a fraction of `p*p`.
    pub fusion_l1_frac: f64,
    pub fusion_every: u64,
    pub dead_after: u64,
    pub codebook_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            codebook_size: 4,
            embed_dim: 16,
            hidden: 64,
            lambda_sparse: 1e-3,
            lambda_mask: 1.0,
            lambda_quant: 1.0,
            beta: 0.25,
            temp_start: 1.0,
            temp_end: 0.3,
            fusion_cos: 0.98,
            fusion_l1_frac: 0.1,
            fusion_every: 2000,
            dead_after: 1000,
            codebook_init: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.codebook_size == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return bad("codebook_size, embed_dim and hidden must be positive".into());
        }
        for (name, v) in [
            ("lambda_sparse", self.lambda_sparse),
            ("lambda_mask", self.lambda_mask),
            ("lambda_quant", self.lambda_quant),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.temp_start > 0.0 && self.temp_end > 0.0) {
            return bad("temperatures must be positive".into());
        }
        Ok(())
    }

    /// Linear decay from `temp_start` to `temp_end`.
    pub fn temperature(&self, progress: f64) -> f64 {
        let t = progress.clamp(0.0, 1.0);
        self.temp_start + (self.temp_end - self.temp_start) * t
    }
}

/// Clamped edge probabilities with a zero diagonal, row-major `p*p`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeProbabilityMatrix {
    p: usize,
    data: Vec<f64>,
}

impl EdgeProbabilityMatrix {
    pub fn new(p: usize, mut data: Vec<f64>) -> Self {
        assert_eq!(data.len(), p * p);
        for i in 0..p {
            for j in 0..p {
                let x = &mut data[i * p + j];
                *x = if i == j { 0.0 } else { x.clamp(PROB_EPS, 1.0 - PROB_EPS) };
            }
        }
        EdgeProbabilityMatrix { p, data }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.p + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_skeleton(&self, threshold: f64) -> SkeletonMatrix {
        SkeletonMatrix::from_probabilities(self.p, &self.data, threshold)
    }

    /// Summed Bernoulli entropy of the off-diagonal entries, in nats.
    pub fn entropy(&self) -> f64 {
        let off: Vec<f64> = (0..self.p * self.p)
            .filter(|k| k / self.p != k % self.p)
            .map(|k| self.data[k])
            .collect();
        bernoulli_entropy(&Tensor::vector(off))
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Sample,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decoded {
    Sample(SkeletonMatrix),
    Mean(EdgeProbabilityMatrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub code: usize,
    pub embedding: Vec<f64>,
    pub quantized: Vec<f64>,
}

/// Per-node head: gated parent one-hots and a context block (own current
/// value, action) feed one relu hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NodePredictor {
    pub w_par: Tensor,
    pub w_ctx: Tensor,
    pub b1: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl NodePredictor {
    fn new(state_dim: usize, ctx_dim: usize, hidden: usize, card: usize, rng: &mut RandomSource) -> Self {
        let fan_in = (state_dim + ctx_dim) as f64;
        let b = 1.0 / fan_in.sqrt();
        let bo = 1.0 / (hidden as f64).sqrt();
        let mut init = |r: usize, c: usize, bound: f64| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.range(-bound, bound)).collect())
        };
        NodePredictor {
            w_par: init(state_dim, hidden, b),
            w_ctx: init(ctx_dim, hidden, b),
            b1: Tensor::zeros(&[hidden]),
            w_out: init(hidden, card, bo),
            b_out: Tensor::zeros(&[card]),
        }
    }

    fn params(&self) -> [&Tensor; 5] {
        [&self.w_par, &self.w_ctx, &self.b1, &self.w_out, &self.b_out]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.w_par,
            &mut self.w_ctx,
            &mut self.b1,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

/// Parameters pushed onto a tape, in [`WorldModel::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub encoder: Vec<(Var, Var)>,
    pub codebook: Var,
    pub decoder: Vec<(Var, Var)>,
    pub predictors: Vec<[Var; 5]>,
}

impl Bound {
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.encoder.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.push(self.codebook);
        v.extend(self.decoder.iter().flat_map(|&(w, b)| [w, b]));
        v.extend(self.predictors.iter().flatten().copied());
        v
    }
}

/// One-hot inputs of a transition batch.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub size: usize,
    /// `[B, S + A]` state and action one-hots.
    pub enc_input: Tensor,
    /// `[B, S]` next-state one-hots.
    pub next_onehot: Tensor,
    /// Per node `[B, c_j + A]`: own current value and action.
    pub ctx: Vec<Tensor>,
    /// Per node realized next values.
    pub next_vals: Vec<Vec<usize>>,
    pub action_idx: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FusionReport {
    /// `(kept, freed)` pairs.
    pub merges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    pub config: ModelConfig,
    pub env: Option<EnvDescriptor>,
    cards: Vec<usize>,
    offsets: Vec<usize>,
    col_node: Vec<usize>,
    pub encoder: Mlp,
    /// `[K, d]`
    pub codebook: Tensor,
    pub usage: Vec<u64>,
    pub last_used: Vec<u64>,
    pub decoder: Mlp,
    pub predictors: Vec<NodePredictor>,
    pub step: u64,
}

impl WorldModel {
    pub fn new(cards: &[usize], config: ModelConfig, rng: &mut RandomSource) -> Result<Self, ModelError> {
        config.validate()?;
        let p = cards.len();
        let mut offsets = Vec::with_capacity(p);
        let mut col_node = Vec::new();
        let mut acc = 0;
        for (i, &c) in cards.iter().enumerate() {
            offsets.push(acc);
            acc += c;
            col_node.extend(std::iter::repeat(i).take(c));
        }
        let state_dim = acc;
        let n_actions = 1 + state_dim;
        let (k, d, h) = (config.codebook_size, config.embed_dim, config.hidden);
        let encoder = Mlp::new(&[state_dim + n_actions, h, d], Activation::Tanh, rng);
        let s = config.codebook_init;
        let codebook = Tensor::matrix(k, d, (0..k * d).map(|_| rng.range(-s, s)).collect());
        let decoder = Mlp::new(&[d, h, p * p], Activation::Tanh, rng);
        let predictors = cards
            .iter()
            .map(|&c| NodePredictor::new(state_dim, c + n_actions, h, c, rng))
            .collect();
        Ok(WorldModel {
            config,
            env: None,
            cards: cards.to_vec(),
            offsets,
            col_node,
            encoder,
            codebook,
            usage: vec![0; k],
            last_used: vec![0; k],
            decoder,
            predictors,
            step: 0,
        })
    }

    pub fn for_env(env: &Environment, config: ModelConfig, rng: &mut RandomSource) -> Result<Self, ModelError> {
        let mut m = WorldModel::new(env.cards(), config, rng)?;
        m.env = Some(env.descriptor.clone());
        Ok(m)
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn p(&self) -> usize {
        self.cards.len()
    }

    pub fn k(&self) -> usize {
        self.codebook.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.col_node.len()
    }

    pub fn action_count(&self) -> usize {
        1 + self.state_dim()
    }

    pub fn action_index(&self, action: &Action) -> usize {
        match action {
            Action::Noop => 0,
            Action::Do(s) => 1 + self.offsets[s.target] + s.value,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.params();
        v.push(&self.codebook);
        v.extend(self.decoder.params());
        for p in &self.predictors {
            v.extend(p.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.params_mut();
        v.push(&mut self.codebook);
        v.extend(self.decoder.params_mut());
        for p in &mut self.predictors {
            v.extend(p.params_mut());
        }
        v
    }

    /// Position of the codebook in [`params`](Self::params).
    pub fn codebook_param_index(&self) -> usize {
        self.encoder.params().len()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            encoder: self.encoder.bind(tape),
            codebook: tape.leaf(self.codebook.clone()),
            decoder: self.decoder.bind(tape),
            predictors: self
                .predictors
                .iter()
                .map(|p| p.params().map(|t| tape.leaf(t.clone())))
                .collect(),
        }
    }

    fn encoder_row(&self, state: &EnvState, action: &Action) -> Vec<f64> {
        let mut row = vec![0.0; self.state_dim() + self.action_count()];
        for (i, &v) in state.0.iter().enumerate() {
            row[self.offsets[i] + v] = 1.0;
        }
        row[self.state_dim() + self.action_index(action)] = 1.0;
        row
    }

    pub fn encode_batch(&self, records: &[&TransitionRecord]) -> Result<EncodedBatch, ModelError> {
        if records.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let b = records.len();
        let (sd, na) = (self.state_dim(), self.action_count());
        let mut enc = Vec::with_capacity(b * (sd + na));
        let mut next = vec![0.0; b * sd];
        let mut ctx: Vec<Vec<f64>> = self.cards.iter().map(|&c| vec![0.0; b * (c + na)]).collect();
        let mut next_vals = vec![Vec::with_capacity(b); self.p()];
        let mut action_idx = Vec::with_capacity(b);
        for (r, rec) in records.iter().enumerate() {
            if rec.state.len() != self.p() || rec.next_state.len() != self.p() {
                return Err(ModelError::Shape(format!(
                    "transition over {} nodes for a model over {}",
                    rec.state.len(),
                    self.p()
                )));
            }
            enc.extend(self.encoder_row(&rec.state, &rec.action));
            let a = self.action_index(&rec.action);
            action_idx.push(a);
            for j in 0..self.p() {
                let c = self.cards[j];
                let x = rec.next_state.0[j];
                next[r * sd + self.offsets[j] + x] = 1.0;
                next_vals[j].push(x);
                let w = c + na;
                ctx[j][r * w + rec.state.0[j]] = 1.0;
                ctx[j][r * w + c + a] = 1.0;
            }
        }
        Ok(EncodedBatch {
            size: b,
            enc_input: Tensor::matrix(b, sd + na, enc),
            next_onehot: Tensor::matrix(b, sd, next),
            ctx: ctx
                .into_iter()
                .zip(&self.cards)
                .map(|(d, &c)| Tensor::matrix(b, c + na, d))
                .collect(),
            next_vals,
            action_idx,
        })
    }

    // ---- taped building blocks ----

    pub fn encode_tape(&self, tape: &mut Tape, bound: &Bound, batch: &EncodedBatch) -> Result<Var, ModelError> {
        let x = tape.constant(batch.enc_input.clone());
        Ok(self.encoder.forward_tape(tape, &bound.encoder, x)?)
    }

    /// Nearest codebook row per embedding row, smallest index on ties.
    pub fn assign_rows(&self, e: &Tensor) -> Vec<usize> {
        (0..e.rows()).map(|r| self.nearest(e.row(r))).collect()
    }

    /// `(z_sel, q)` with `q = e + sg(z_sel - e)`.
    pub fn quantize_tape(&self, tape: &mut Tape, bound: &Bound, e: Var, codes: &[usize]) -> (Var, Var) {
        let z = tape.select_rows(bound.codebook, codes.to_vec());
        let hard = tape.value(z).clone();
        let q = tape.straight_through(hard, e);
        (z, q)
    }

    /// Clamped edge probabilities `[B, p*p]` with a zero diagonal.
    pub fn decode_tape(&self, tape: &mut Tape, bound: &Bound, q: Var) -> Result<Var, ModelError> {
        let logits = self.decode_logits_tape(tape, bound, q)?;
        Ok(self.probs_from_logits(tape, logits))
    }

    /// Raw decoder logits `[B, p*p]`.
    pub fn decode_logits_tape(&self, tape: &mut Tape, bound: &Bound, q: Var) -> Result<Var, ModelError> {
        Ok(self.decoder.forward_tape(tape, &bound.decoder, q)?)
    }

    pub fn probs_from_logits(&self, tape: &mut Tape, logits: Var) -> Var {
        let probs = tape.sigmoid(logits);
        let clamped = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
        let off = tape.constant(self.offdiag_rows(tape.value(clamped).rows()));
        tape.mul(clamped, off)
    }

    pub fn offdiag_rows(&self, rows: usize) -> Tensor {
        let p = self.p();
        let row: Vec<f64> = (0..p * p).map(|k| (k / p != k % p) as u8 as f64).collect();
        Tensor::matrix(rows, p * p, row.repeat(rows))
    }

    /// Mean negative log-likelihood over batch and nodes with teacher-forced
    /// parent values gated by `mask` (`[B, p*p]`).
    pub fn mle_tape(&self, tape: &mut Tape, bound: &Bound, mask: Var, batch: &EncodedBatch) -> Var {
        let p = self.p();
        let next = tape.constant(batch.next_onehot.clone());
        let mut total: Option<Var> = None;
        for j in 0..p {
            let [w_par, w_ctx, b1, w_out, b_out] = bound.predictors[j];
            let idx: Vec<usize> = self.col_node.iter().map(|&i| i * p + j).collect();
            let gate = tape.gather_cols(mask, idx);
            let gated = tape.mul(gate, next);
            let ctx = tape.constant(batch.ctx[j].clone());
            let a = tape.matmul(gated, w_par);
            let c = tape.matmul(ctx, w_ctx);
            let pre = tape.add(a, c);
            let pre = tape.add_bias(pre, b1);
            let h = tape.relu(pre);
            let logits = tape.matmul(h, w_out);
            let logits = tape.add_bias(logits, b_out);
            let lsm = tape.log_softmax(logits);
            let picked = tape.pick_per_row(lsm, batch.next_vals[j].clone());
            let s = tape.sum(picked);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s),
            });
        }
        tape.scale(total.unwrap(), -1.0 / (batch.size * p) as f64)
    }

    // ---- plain inference ----

    pub fn embed(&self, state: &EnvState, action: &Action) -> Vec<f64> {
        let x = Tensor::matrix(1, self.state_dim() + self.action_count(), self.encoder_row(state, action));
        self.encoder.forward(&x).into_data()
    }

    pub fn nearest(&self, e: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for u in 0..self.k() {
            let d: f64 = self.codebook.row(u).iter().zip(e).map(|(z, x)| (z - x) * (z - x)).sum();
            if d < best_d {
                best_d = d;
                best = u;
            }
        }
        best
    }

    pub fn code_of(&self, state: &EnvState, action: &Action) -> usize {
        self.nearest(&self.embed(state, action))
    }

    /// Nearest code; bumps its usage counter.
    pub fn assign_meta(&mut self, state: &EnvState, action: &Action) -> Assignment {
        let e = self.embed(state, action);
        let code = self.nearest(&e);
        self.usage[code] += 1;
        self.last_used[code] = self.step;
        Assignment {
            code,
            quantized: self.codebook.row(code).to_vec(),
            embedding: e,
        }
    }

    pub fn edge_probs_of(&self, z: &[f64]) -> EdgeProbabilityMatrix {
        let logits = self.decoder.forward(&Tensor::matrix(1, z.len(), z.to_vec()));
        EdgeProbabilityMatrix::new(self.p(), logits.data().iter().map(|&l| sigmoid(l)).collect())
    }

    pub fn edge_probs(&self, code: usize) -> EdgeProbabilityMatrix {
        self.edge_probs_of(self.codebook.row(code))
    }

    pub fn decode_skeleton(
        &self,
        code: usize,
        mode: DecodeMode,
        temperature: f64,
        rng: &mut RandomSource,
    ) -> Result<Decoded, ModelError> {
        if code >= self.k() {
            return Err(ModelError::CodeOutOfRange { code, k: self.k() });
        }
        let probs = self.edge_probs(code);
        match mode {
            DecodeMode::Mean => Ok(Decoded::Mean(probs)),
            DecodeMode::Sample => {
                let p = self.p();
                let mut g = SkeletonMatrix::empty(p);
                for i in 0..p {
                    for j in 0..p {
                        if i != j && sample_gumbel_bernoulli(probs.get(i, j), temperature, rng, true)? > 0.5 {
                            g.set(i, j, true);
                        }
                    }
                }
                Ok(Decoded::Sample(g))
            }
        }
    }

    /// Mean-mode skeleton thresholded at 0.5.
    pub fn skeleton(&self, code: usize) -> SkeletonMatrix {
        self.edge_probs(code).to_skeleton(0.5)
    }

    /// Logits of node `j` given the parents' next values in `next`.
    pub fn node_logits(&self, j: usize, state: &EnvState, action_idx: usize, next: &[usize], mask: &SkeletonMatrix) -> Vec<f64> {
        let np = &self.predictors[j];
        let h = np.b1.len();
        let mut pre = np.b1.data().to_vec();
        for i in 0..self.p() {
            if i != j && mask.get(i, j) {
                let row = np.w_par.row(self.offsets[i] + next[i]);
                for (x, w) in pre.iter_mut().zip(row) {
                    *x += w;
                }
            }
        }
        for r in [state.0[j], self.cards[j] + action_idx] {
            for (x, w) in pre.iter_mut().zip(np.w_ctx.row(r)) {
                *x += w;
            }
        }
        let c = self.cards[j];
        let mut out = np.b_out.data().to_vec();
        for (k, &x) in pre.iter().enumerate().take(h) {
            if x > 0.0 {
                for (o, w) in out.iter_mut().zip(np.w_out.row(k)) {
                    *o += x * w;
                }
            }
        }
        debug_assert_eq!(out.len(), c);
        out
    }

    /// Per-node logits with the realized next values as parent inputs.
    pub fn teacher_logits(&self, state: &EnvState, action: &Action, next: &EnvState, mask: &SkeletonMatrix) -> Vec<Vec<f64>> {
        let a = self.action_index(action);
        (0..self.p())
            .map(|j| self.node_logits(j, state, a, &next.0, mask))
            .collect()
    }

    /// Autoregressive per-node distributions: parents contribute their modal
    /// predicted values, following the mask's topological order when it has
    /// one and index order otherwise.
    pub fn predict_next(&self, state: &EnvState, action: &Action, mask: &SkeletonMatrix) -> Vec<Vec<f64>> {
        let a = self.action_index(action);
        let order = mask.topological_order().unwrap_or_else(|| (0..self.p()).collect());
        let mut next = state.0.clone();
        let mut out = vec![Vec::new(); self.p()];
        for j in order {
            let probs = softmax(&self.node_logits(j, state, a, &next, mask));
            next[j] = argmax(&probs);
            out[j] = probs;
        }
        out
    }

    /// Autoregressive sample of the next state.
    pub fn sample_next(&self, state: &EnvState, action: &Action, mask: &SkeletonMatrix, rng: &mut RandomSource) -> EnvState {
        let a = self.action_index(action);
        let order = mask.topological_order().unwrap_or_else(|| (0..self.p()).collect());
        let mut next = state.0.clone();
        for j in order {
            let probs = softmax(&self.node_logits(j, state, a, &next, mask));
            next[j] = rng.categorical(&probs);
        }
        EnvState(next)
    }

    /// Distributions under the skeleton of the assigned code.
    pub fn predict(&self, state: &EnvState, action: &Action) -> Vec<Vec<f64>> {
        let mask = self.skeleton(self.code_of(state, action));
        self.predict_next(state, action, &mask)
    }

    // ---- codebook maintenance ----

    /// Merge entries whose embeddings and decoded skeletons agree. The more
    /// used entry of a pair survives (lower index on ties); the other is
    /// re-seeded near `anchor`.
    pub fn fuse_codebook(
        &mut self,
        embed_sim_threshold: f64,
        skeleton_l1_threshold: f64,
        anchor: &[f64],
        rng: &mut RandomSource,
    ) -> FusionReport {
        let mut report = FusionReport::default();
        let k = self.k();
        if k < 2 {
            return report;
        }
        let mut freed = vec![false; k];
        let probs: Vec<EdgeProbabilityMatrix> = (0..k).map(|u| self.edge_probs(u)).collect();
        for a in 0..k {
            for b in a + 1..k {
                if freed[a] || freed[b] {
                    continue;
                }
                let cos = cosine(self.codebook.row(a), self.codebook.row(b));
                let l1 = probs[a].l1_distance(&probs[b]);
                if cos > embed_sim_threshold && l1 < skeleton_l1_threshold {
                    let (keep, drop) = if self.usage[b] > self.usage[a] { (b, a) } else { (a, b) };
                    self.usage[keep] += self.usage[drop];
                    self.usage[drop] = 0;
                    self.last_used[drop] = self.step;
                    self.reseed(drop, anchor, rng);
                    freed[drop] = true;
                    report.merges.push((keep, drop));
                }
            }
        }
        report
    }

    fn reseed(&mut self, code: usize, anchor: &[f64], rng: &mut RandomSource) {
        let s = self.config.codebook_init * 0.1;
        let d = self.codebook.cols();
        for c in 0..d {
            self.codebook.data_mut()[code * d + c] = anchor[c] + rng.range(-s, s);
        }
    }

    /// Re-seed entries unused for `dead_after` steps near a random recent
    /// embedding. Returns the restarted codes.
    pub fn restart_dead(&mut self, recent: &[Vec<f64>], rng: &mut RandomSource) -> Vec<usize> {
        let mut restarted = Vec::new();
        if recent.is_empty() {
            return restarted;
        }
        for u in 0..self.k() {
            if self.step.saturating_sub(self.last_used[u]) >= self.config.dead_after {
                let anchor = recent[rng.below(recent.len())].clone();
                self.reseed(u, &anchor, rng);
                self.usage[u] = 0;
                self.last_used[u] = self.step;
                restarted.push(u);
            }
        }
        restarted
    }

    /// Codes holding at least `min_share` of the assignments of `pairs`.
    pub fn codes_in_use(&self, pairs: &[(EnvState, Action)], min_share: f64) -> Vec<usize> {
        let mut counts = vec![0usize; self.k()];
        for (s, a) in pairs {
            counts[self.code_of(s, a)] += 1;
        }
        let n = pairs.len().max(1) as f64;
        (0..self.k()).filter(|&u| counts[u] as f64 / n >= min_share && counts[u] > 0).collect()
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

/// Mean teacher-forced NLL over batch and nodes. `masks` holds one mask per
/// record or a single shared mask.
pub fn loss_mle(model: &WorldModel, batch: &[TransitionRecord], masks: &[SkeletonMatrix]) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if masks.len() != 1 && masks.len() != batch.len() {
        return Err(ModelError::Shape(format!(
            "{} masks for {} records",
            masks.len(),
            batch.len()
        )));
    }
    let mut total = 0.0;
    for (r, rec) in batch.iter().enumerate() {
        let mask = &masks[if masks.len() == 1 { 0 } else { r }];
        let logits = model.teacher_logits(&rec.state, &rec.action, &rec.next_state, mask);
        for (j, l) in logits.iter().enumerate() {
            let probs = softmax(l);
            total -= probs[rec.next_state.0[j]].max(PROB_EPS).ln();
        }
    }
    Ok(total / (batch.len() * model.p()) as f64)
}

/// Sum of all entries.
pub fn loss_sparse(probs: &EdgeProbabilityMatrix) -> f64 {
    probs.data().iter().sum()
}

/// Per-row entry sums averaged over rows.
pub fn loss_sparse_tape(tape: &mut Tape, probs: Var) -> Var {
    let rows = tape.value(probs).rows();
    let s = tape.sum(probs);
    tape.scale(s, 1.0 / rows as f64)
}

/// `||sg(e) - z||^2 + beta ||e - sg(z)||^2`.
pub fn loss_quantization(e: &[f64], z: &[f64], beta: f64) -> f64 {
    let d: f64 = e.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
    d * (1.0 + beta)
}

/// Row-averaged quantization loss; the codebook term reaches only `z`, the
/// commitment term only `e`.
pub fn loss_quantization_tape(tape: &mut Tape, e: Var, z: Var, beta: f64) -> Var {
    let rows = tape.value(e).rows();
    let e_sg = tape.detach(e);
    let z_sg = tape.detach(z);
    let codebook = tape.sq_dist_rows(e_sg, z);
    let commit = tape.sq_dist_rows(e, z_sg);
    let commit = tape.scale(commit, beta);
    let both = tape.add(codebook, commit);
    let s = tape.sum(both);
    tape.scale(s, 1.0 / rows as f64)
}
