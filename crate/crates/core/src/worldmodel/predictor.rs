//! Next-state predictors shared by the planner and the evaluation harness.

use super::model::{argmax, softmax, ModelError, WorldModel};
use crate::envsim::{Action, EnvState, Environment, TransitionRecord};
use crate::numkit::{Activation, Adam, Mlp, RandomSource, Tape, Tensor};

pub trait Predictor {
    fn cards(&self) -> &[usize];

    /// Per-node categorical distributions over next values.
    fn predict(&self, state: &EnvState, action: &Action) -> Vec<Vec<f64>>;

    fn sample_next(&self, state: &EnvState, action: &Action, rng: &mut RandomSource) -> EnvState;

    /// Per-node modal values.
    fn modal_next(&self, state: &EnvState, action: &Action) -> EnvState {
        EnvState(self.predict(state, action).iter().map(|d| argmax(d)).collect())
    }
}

impl Predictor for WorldModel {
    fn cards(&self) -> &[usize] {
        WorldModel::cards(self)
    }

    fn predict(&self, state: &EnvState, action: &Action) -> Vec<Vec<f64>> {
        WorldModel::predict(self, state, action)
    }

    fn sample_next(&self, state: &EnvState, action: &Action, rng: &mut RandomSource) -> EnvState {
        let mask = self.skeleton(self.code_of(state, action));
        WorldModel::sample_next(self, state, action, &mask, rng)
    }

    fn modal_next(&self, state: &EnvState, action: &Action) -> EnvState {
        let mask = self.skeleton(self.code_of(state, action));
        EnvState(
            self.predict_next(state, action, &mask)
                .iter()
                .map(|d| argmax(d))
                .collect(),
        )
    }
}

/// The environment's own conditional tables.
#[derive(Clone, Debug)]
pub struct OraclePredictor {
    pub env: Environment,
}

impl Predictor for OraclePredictor {
    fn cards(&self) -> &[usize] {
        self.env.cards()
    }

    fn predict(&self, state: &EnvState, action: &Action) -> Vec<Vec<f64>> {
        match self.env.next_marginals(state, action) {
            Ok(m) => m,
            Err(_) => {
                // Too many joint outcomes: fall back to a seeded frequency estimate.
                let mut rng = RandomSource::new(state.index(self.env.cards()) as u64, "oracle-marginals");
                let mut out: Vec<Vec<f64>> = self.env.cards().iter().map(|&n| vec![0.0; n]).collect();
                let draws = 400;
                for _ in 0..draws {
                    let r = self.env.step(state, action, &mut rng).expect("valid action");
                    for (j, &v) in r.next_state.0.iter().enumerate() {
                        out[j][v] += 1.0 / draws as f64;
                    }
                }
                out
            }
        }
    }

    fn sample_next(&self, state: &EnvState, action: &Action, rng: &mut RandomSource) -> EnvState {
        self.env.step(state, action, rng).expect("valid action").next_state
    }
}

/// Uniform over every node's values.
#[derive(Clone, Debug)]
pub struct UniformPredictor {
    pub cards: Vec<usize>,
}

impl Predictor for UniformPredictor {
    fn cards(&self) -> &[usize] {
        &self.cards
    }

    fn predict(&self, _: &EnvState, _: &Action) -> Vec<Vec<f64>> {
        self.cards.iter().map(|&n| vec![1.0 / n as f64; n]).collect()
    }

    fn sample_next(&self, _: &EnvState, _: &Action, rng: &mut RandomSource) -> EnvState {
        EnvState(self.cards.iter().map(|&n| rng.below(n)).collect())
    }
}

/// Unstructured baseline: one relu MLP from the full state and action
/// one-hots to every node's next-value logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseModel {
    cards: Vec<usize>,
    offsets: Vec<usize>,
    pub net: Mlp,
}

impl DenseModel {
    pub fn new(cards: &[usize], hidden: usize, rng: &mut RandomSource) -> Self {
        let mut offsets = Vec::new();
        let mut acc = 0;
        for &c in cards {
            offsets.push(acc);
            acc += c;
        }
        let input = acc + 1 + acc;
        DenseModel {
            cards: cards.to_vec(),
            offsets,
            net: Mlp::new(&[input, hidden, hidden, acc], Activation::Relu, rng),
        }
    }

    fn state_dim(&self) -> usize {
        self.cards.iter().sum()
    }

    fn input_row(&self, state: &EnvState, action: &Action) -> Vec<f64> {
        let sd = self.state_dim();
        let mut row = vec![0.0; 2 * sd + 1];
        for (i, &v) in state.0.iter().enumerate() {
            row[self.offsets[i] + v] = 1.0;
        }
        let a = match action {
            Action::Noop => 0,
            Action::Do(s) => 1 + self.offsets[s.target] + s.value,
        };
        row[sd + a] = 1.0;
        row
    }

    pub fn optimizer(&self, lr: f64) -> Adam {
        Adam::new(lr, &self.net.params())
    }

    /// Mean NLL over batch and nodes.
    pub fn train_batch(&mut self, records: &[&TransitionRecord], adam: &mut Adam) -> Result<f64, ModelError> {
        if records.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let b = records.len();
        let width = 2 * self.state_dim() + 1;
        let mut input = Vec::with_capacity(b * width);
        for r in records {
            input.extend(self.input_row(&r.state, &r.action));
        }
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(b, width, input));
        let logits = self.net.forward_tape(&mut tape, &bound, x)?;
        let mut total = None;
        for (j, &c) in self.cards.iter().enumerate() {
            let cols: Vec<usize> = (self.offsets[j]..self.offsets[j] + c).collect();
            let block = tape.gather_cols(logits, cols);
            let lsm = tape.log_softmax(block);
            let targets = records.iter().map(|r| r.next_state.0[j]).collect();
            let picked = tape.pick_per_row(lsm, targets);
            let s = tape.sum(picked);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s),
            });
        }
        let loss = tape.scale(total.unwrap(), -1.0 / (b * self.cards.len()) as f64);
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound
            .iter()
            .flat_map(|&(w, bb)| [w, bb])
            .map(|v| grads.take(&tape, v))
            .collect();
        let mut params = self.net.params_mut();
        adam.step(&mut params, &g);
        Ok(value)
    }
}

impl Predictor for DenseModel {
    fn cards(&self) -> &[usize] {
        &self.cards
    }

    fn predict(&self, state: &EnvState, action: &Action) -> Vec<Vec<f64>> {
        let row = self.input_row(state, action);
        let logits = self.net.forward(&Tensor::matrix(1, row.len(), row)).into_data();
        self.cards
            .iter()
            .zip(&self.offsets)
            .map(|(&c, &o)| softmax(&logits[o..o + c]))
            .collect()
    }

    fn sample_next(&self, state: &EnvState, action: &Action, rng: &mut RandomSource) -> EnvState {
        EnvState(self.predict(state, action).iter().map(|d| rng.categorical(d)).collect())
    }
}
