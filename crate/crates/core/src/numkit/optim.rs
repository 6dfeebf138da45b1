use super::tensor::Tensor;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Tensor]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. `params` and `grads` must line up with the
    /// parameter list given at construction.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads[k];
            assert_eq!(p.shape(), g.shape(), "gradient shape for parameter {k}");
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Zero the moments of one parameter (used when a codebook row is reset).
    pub fn reset_rows(&mut self, param: usize, rows: &[usize]) {
        for t in [&mut self.first[param], &mut self.second[param]] {
            let m = t.cols();
            for &r in rows {
                t.data_mut()[r * m..(r + 1) * m].iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = Tensor::vector(vec![1.0, -1.0]);
        let mut opt = Adam::new(0.1, &[&w]);
        opt.step(&mut [&mut w], &[Tensor::vector(vec![3.0, -0.5])]);
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut w = Tensor::vector(vec![5.0]);
        let mut opt = Adam::new(0.05, &[&w]);
        for _ in 0..2000 {
            let g = Tensor::vector(vec![2.0 * (w.data()[0] - 1.5)]);
            opt.step(&mut [&mut w], &[g]);
        }
        assert!((w.data()[0] - 1.5).abs() < 1e-3);
    }
}
