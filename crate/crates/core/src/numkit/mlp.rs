use super::random::RandomSource;
use super::tape::{sigmoid, Tape, Var};
use super::tensor::Tensor;
use super::NumkitError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    fn record(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Identity => v,
        }
    }
}

/// Dense layers `(weight [in, out], bias [out])` applied in order, with
/// `activation` after every layer. Shapes are checked before anything is
/// recorded.
pub fn forward_mlp(
    tape: &mut Tape,
    layers: &[(Var, Var)],
    input: Var,
    activation: Activation,
) -> Result<Var, NumkitError> {
    let in_shape = tape.value(input).shape().to_vec();
    if in_shape.len() != 2 {
        return Err(NumkitError::LayerShape {
            layer: 0,
            detail: format!("input must be [batch, features], got {in_shape:?}"),
        });
    }
    let mut width = in_shape[1];
    for (k, &(w, b)) in layers.iter().enumerate() {
        let ws = tape.value(w).shape();
        if ws.len() != 2 || ws[0] != width {
            return Err(NumkitError::LayerShape {
                layer: k,
                detail: format!("weight {ws:?} cannot take {width} inputs"),
            });
        }
        if tape.value(b).len() != ws[1] {
            return Err(NumkitError::LayerShape {
                layer: k,
                detail: format!("bias length {} vs {} outputs", tape.value(b).len(), ws[1]),
            });
        }
        width = ws[1];
    }
    let mut h = input;
    for &(w, b) in layers {
        let z = tape.matmul(h, w);
        let z = tape.add_bias(z, b);
        h = activation.record(tape, z);
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Hidden layers use `hidden`; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub hidden: Activation,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialisation, zero biases.
    pub fn new(sizes: &[usize], hidden: Activation, rng: &mut RandomSource) -> Self {
        assert!(sizes.len() >= 2);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| rng.range(-bound, bound)).collect();
                Layer {
                    weight: Tensor::matrix(w[0], w[1], data),
                    bias: Tensor::zeros(&[w[1]]),
                }
            })
            .collect();
        Mlp { layers, hidden }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Push all parameters as leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect()
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &[(Var, Var)],
        input: Var,
    ) -> Result<Var, NumkitError> {
        let n = bound.len();
        let h = forward_mlp(tape, &bound[..n - 1], input, self.hidden)?;
        forward_mlp(tape, &bound[n - 1..], h, Activation::Identity)
    }

    /// Forward pass without recording, for inference.
    pub fn forward(&self, input: &Tensor) -> Tensor {
        let n = self.layers.len();
        let mut h = input.clone();
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&l.weight);
            let m = z.cols();
            let act = if k + 1 == n { Activation::Identity } else { self.hidden };
            for row in z.data_mut().chunks_mut(m) {
                for (x, b) in row.iter_mut().zip(l.bias.data()) {
                    *x = act.apply(*x + b);
                }
            }
            h = z;
        }
        h
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let m = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(m) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

pub fn sigmoid_tensor(t: &Tensor) -> Tensor {
    t.map(sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer(tape: &mut Tape, w: Tensor, b: Tensor) -> Vec<(Var, Var)> {
        vec![(tape.leaf(w), tape.leaf(b))]
    }

    #[test]
    fn identity_layer() {
        let mut tape = Tape::new();
        let layers = one_layer(&mut tape, Tensor::identity(2), Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let y = forward_mlp(&mut tape, &layers, x, Activation::Identity).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_clamps() {
        let mut tape = Tape::new();
        let layers = one_layer(
            &mut tape,
            Tensor::matrix(1, 1, vec![1.0]),
            Tensor::vector(vec![-3.0]),
        );
        let x = tape.constant(Tensor::matrix(1, 1, vec![2.0]));
        let y = forward_mlp(&mut tape, &layers, x, Activation::Relu).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn mismatch_names_layer() {
        let mut tape = Tape::new();
        let l0 = (tape.leaf(Tensor::zeros(&[2, 3])), tape.leaf(Tensor::zeros(&[3])));
        let l1 = (tape.leaf(Tensor::zeros(&[4, 1])), tape.leaf(Tensor::zeros(&[1])));
        let x = tape.constant(Tensor::zeros(&[5, 2]));
        match forward_mlp(&mut tape, &[l0, l1], x, Activation::Tanh) {
            Err(NumkitError::LayerShape { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected layer error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn two_layer_tanh_matches_hand_unrolled() {
        let mut rng = RandomSource::new(0, "mlp-test");
        let net = Mlp::new(&[2, 3, 2], Activation::Tanh, &mut rng);
        let mut tape = Tape::new();
        let bound: Vec<(Var, Var)> = net
            .layers
            .iter()
            .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
            .collect();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.5, -0.5]));
        let y = forward_mlp(&mut tape, &bound, x, Activation::Tanh).unwrap();

        // straight-line recomputation, same summation order
        let (w0, b0) = (&net.layers[0].weight, &net.layers[0].bias);
        let (w1, b1) = (&net.layers[1].weight, &net.layers[1].bias);
        let input = [0.5, -0.5];
        let mut h = [0.0; 3];
        for j in 0..3 {
            let mut acc = 0.0;
            acc += input[0] * w0.at(0, j);
            acc += input[1] * w0.at(1, j);
            h[j] = (acc + b0.data()[j]).tanh();
        }
        let mut out = [0.0; 2];
        for j in 0..2 {
            let mut acc = 0.0;
            for (i, hv) in h.iter().enumerate() {
                acc += hv * w1.at(i, j);
            }
            out[j] = (acc + b1.data()[j]).tanh();
        }
        assert_eq!(tape.value(y).data(), &out);
    }

    #[test]
    fn plain_and_taped_forward_agree() {
        let mut rng = RandomSource::new(4, "mlp-test");
        let net = Mlp::new(&[3, 5, 2], Activation::Relu, &mut rng);
        let input = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.0, 0.0, -1.0]);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.constant(input.clone());
        let y = net.forward_tape(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).data(), net.forward(&input).data());
    }
}
