//! AdamW with decoupled weight decay and bias-corrected moments.

use crate::autodiff::{Gradients, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-4, betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.01 }
    }
}

pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[Var<'_, T>], cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(&p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(&p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Parameters without a gradient this
    /// step still receive moment decay and weight decay.
    pub fn step(&mut self, tape: &Tape<T>, params: &[Var<'_, T>], grads: &Gradients<T>) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter set");
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            let value = p.value();
            let zero;
            let g = match grads.get(*p) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(&p.shape());
                    &zero
                }
            };
            let mut new_m = Vec::with_capacity(value.numel());
            let mut new_v = Vec::with_capacity(value.numel());
            let mut new_p = Vec::with_capacity(value.numel());
            for j in 0..value.numel() {
                let gv = g.data()[j].to_f64();
                let m = b1 * self.m[i].data()[j].to_f64() + (1.0 - b1) * gv;
                let v = b2 * self.v[i].data()[j].to_f64() + (1.0 - b2) * gv * gv;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let mut x = value.data()[j].to_f64();
                x -= self.cfg.lr * self.cfg.weight_decay * x;
                x -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                new_m.push(T::from_f64(m));
                new_v.push(T::from_f64(v));
                new_p.push(T::from_f64(x));
            }
            self.m[i] = Tensor::from_vec(&p.shape(), new_m);
            self.v[i] = Tensor::from_vec(&p.shape(), new_v);
            tape.set_value(*p, Tensor::from_vec(&p.shape(), new_p));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(&[2], vec![1.0, -2.0]));
        let cfg = AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&[p], cfg);
        // gradient [0.5, -0.25]: first bias-corrected update is sign(g)
        let loss = p.mul(tape.leaf(Tensor::from_vec(&[2], vec![0.5, -0.25]))).sum_all();
        let grads = tape.backward(loss);
        opt.step(&tape, &[p], &grads);
        let v = p.value();
        assert!((v.data()[0] - (1.0 - 1e-3)).abs() < 1e-8, "{}", v.data()[0]);
        assert!((v.data()[1] - (-2.0 + 1e-3)).abs() < 1e-8, "{}", v.data()[1]);
    }

    #[test]
    fn zero_grads_zero_decay_leave_params_unchanged() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(&[3], vec![0.5, -0.5, 2.0]));
        let before = p.value();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&[p], cfg);
        // loss independent of p: gradient is absent
        let q = tape.leaf(Tensor::scalar(1.0));
        let grads = tape.backward(q.sum_all());
        opt.step(&tape, &[p], &grads);
        assert!(p.value().bit_eq(&before));
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(&[1], vec![1.0]));
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(&[p], cfg);
        let q = tape.leaf(Tensor::scalar(1.0));
        let grads = tape.backward(q.sum_all());
        opt.step(&tape, &[p], &grads);
        assert!((p.value().item() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x) = 0.5 * sum a_i (x_i - b_i)^2
        let mut rng = Rng::new(120);
        let d = 8;
        let a: Vec<f64> = (0..d).map(|_| rng.range(0.5, 2.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.range(-1.0, 1.0)).collect();
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(
            &[d],
            b.iter().map(|v| v + rng.range(-0.5, 0.5)).collect::<Vec<f64>>(),
        ));
        let mark = tape.len();
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&[p], cfg);
        let mut grad_norm = f64::MAX;
        for _ in 0..200 {
            tape.truncate(mark);
            let av = tape.leaf(Tensor::from_vec(&[d], a.clone()));
            let bv = tape.leaf(Tensor::from_vec(&[d], b.clone()));
            let diff = p.sub(bv);
            let loss = diff.mul(diff).mul(av).affine(0.5, 0.0).sum_all();
            let grads = tape.backward(loss);
            grad_norm = grads
                .get(p)
                .unwrap()
                .data()
                .iter()
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            opt.step(&tape, &[p], &grads);
        }
        assert!(grad_norm < 1e-3, "gradient norm after 200 steps: {grad_norm}");
    }
}
