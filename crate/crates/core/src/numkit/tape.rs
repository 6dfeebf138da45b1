//! Reverse-mode differentiation over a small fixed operator set.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse and accumulates vector-Jacobian products into
//! the nodes that need them. Constants never receive gradients.

use super::tensor::Tensor;
use super::NumkitError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    LogSoftmax(Var),
    SelectRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Leaves the loss does not
    /// depend on get an all-zero tensor of the right shape.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }

    pub fn take(&mut self, tape: &Tape, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value from {:?}", op);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `[n, m] + [m]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        let m = xv.cols();
        assert_eq!(bv.len(), m, "bias length {} vs {} columns", bv.len(), m);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        let ng = self.ng(&[a]);
        self.push(value, Op::Offset(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.ng(&[a]);
        self.push(value, Op::Log(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(&[a]);
        self.push(value, Op::Exp(a), ng)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(m) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Gather rows `idx` of a matrix (repeats allowed).
    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let m = av.cols();
        let mut out = Vec::with_capacity(idx.len() * m);
        for &r in &idx {
            out.extend_from_slice(av.row(r));
        }
        let value = Tensor::matrix(idx.len(), m, out);
        let ng = self.ng(&[a]);
        self.push(value, Op::SelectRows(a, idx), ng)
    }

    /// `out[b, k] = a[b, idx[k]]`.
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        debug_assert!(idx.iter().all(|&c| c < m));
        let mut out = Vec::with_capacity(n * idx.len());
        for r in 0..n {
            let row = av.row(r);
            out.extend(idx.iter().map(|&c| row[c]));
        }
        let value = Tensor::matrix(n, idx.len(), out);
        let ng = self.ng(&[a]);
        self.push(value, Op::GatherCols(a, idx), ng)
    }

    /// `out[b] = a[b, idx[b]]`.
    pub fn pick_per_row(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), idx.len(), "pick_per_row: one index per row");
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| av.at(r, c)).collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::vector(out), Op::PickPerRow(a, idx), ng)
    }

    /// Sum over the columns of each row: `[n, m] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.cols();
        let out: Vec<f64> = av.data().chunks(m).map(|r| r.iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::vector(out), Op::SumRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::scalar(av.sum() / av.len() as f64);
        let ng = self.ng(&[a]);
        self.push(value, Op::Mean(a), ng)
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Var {
        assert_eq!(hard.shape(), self.value(soft).shape());
        let ng = self.ng(&[soft]);
        self.push(hard, Op::StraightThrough(soft), ng)
    }

    /// Squared Euclidean distance per row: `[n, d] x [n, d] -> [n]`.
    pub fn sq_dist_rows(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d2 = self.mul(d, d);
        self.sum_rows(d2)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumkitError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumkitError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            // leaves keep their gradient for the caller
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = g.matmul_t(self.value(*b));
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.value(*a).t_matmul(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(x, bias) => {
                if self.nodes[bias.0].needs_grad {
                    let m = g.cols();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, gb));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, g.map(|x| x * k));
            }
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |x, y| x * (1.0 - y * y));
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |x, y| x * y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(*a), |x, v| x / v);
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(out, |x, y| x * y);
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = g.zip_map(self.value(*a), |x, v| if v < lo || v > hi { 0.0 } else { x });
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                // d/dx_k = g_k - softmax_k * sum(g)
                let m = out.cols();
                let mut ga = g.clone();
                for (grow, orow) in ga.data_mut().chunks_mut(m).zip(out.data().chunks(m)) {
                    let gs: f64 = grow.iter().sum();
                    for (gv, o) in grow.iter_mut().zip(orow) {
                        *gv -= o.exp() * gs;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SelectRows(a, idx) => {
                let av = self.value(*a);
                let m = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for (i, &r) in idx.iter().enumerate() {
                    let src = &g.data()[i * m..(i + 1) * m];
                    let dst = &mut ga.data_mut()[r * m..(r + 1) * m];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherCols(a, idx) => {
                let av = self.value(*a);
                let m = av.cols();
                let k = idx.len();
                let mut ga = Tensor::zeros(av.shape());
                for (grow, arow) in g.data().chunks(k).zip(ga.data_mut().chunks_mut(m)) {
                    for (&c, &v) in idx.iter().zip(grow) {
                        arow[c] += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PickPerRow(a, idx) => {
                let av = self.value(*a);
                let m = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for (r, &c) in idx.iter().enumerate() {
                    ga.data_mut()[r * m + c] += g.data()[r];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let m = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for (row, &gv) in ga.data_mut().chunks_mut(m).zip(g.data()) {
                    row.iter_mut().for_each(|x| *x = gv);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let gv = g.item();
                let ga = Tensor::full(self.value(*a).shape(), gv);
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gv = g.item() / av.len() as f64;
                self.accumulate(grads, *a, Tensor::full(av.shape(), gv));
            }
            Op::StraightThrough(soft) => self.accumulate(grads, *soft, g.clone()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = t.mul(w, w);
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(&t, w).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn log_sigmoid_at_zero() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![0.0]));
        let s = t.sigmoid(w);
        let l = t.log(s);
        let loss = t.sum(l);
        let g = t.backward(loss).unwrap();
        assert!((g.get(&t, w).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = t.scale(w, 2.0);
        assert!(matches!(
            t.backward(y),
            Err(NumkitError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(vec![3.0]));
        let w = t.leaf(Tensor::vector(vec![2.0]));
        let p = t.mul(c, w);
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(&t, c).data(), &[0.0]);
        assert_eq!(g.get(&t, w).data(), &[3.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![2.0]));
        let d = t.detach(w);
        let p = t.mul(w, d);
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(&t, w).data(), &[2.0]);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![0.3, 0.8]));
        let s = t.straight_through(Tensor::vector(vec![0.0, 1.0]), w);
        assert_eq!(t.value(s).data(), &[0.0, 1.0]);
        let k = t.constant(Tensor::vector(vec![2.0, 5.0]));
        let p = t.mul(s, k);
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(&t, w).data(), &[2.0, 5.0]);
    }
}
