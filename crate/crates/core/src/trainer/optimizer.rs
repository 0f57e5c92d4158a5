use serde::{Deserialize, Serialize};

use crate::diffengine::ParameterSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adaptive-moment or plain gradient-descent updates, no weight decay.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, beta1: f64, beta2: f64, eps: f64, like: &ParameterSet) -> Self {
        let zeros = || like.arrays().iter().map(|a| vec![0.0; a.len()]).collect();
        Self { kind, lr, beta1, beta2, eps, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    let g = grads.array(i).data();
                    for (p, g) in params.data_mut(i).iter_mut().zip(g) {
                        *p -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - self.beta1.powf(self.t as f64);
                let c2 = 1.0 - self.beta2.powf(self.t as f64);
                for i in 0..params.len() {
                    let g = grads.array(i).data();
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, p) in params.data_mut(i).iter_mut().enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *p -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::Array;

    fn one(x: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("x", Array::vector(vec![x]).unwrap()).unwrap();
        p
    }

    /// ∇ of ½ a (x − x*)².
    fn quad_grad(p: &ParameterSet, a: f64, star: f64) -> ParameterSet {
        one(a * (p.array(0).data()[0] - star))
    }

    #[test]
    fn gradient_descent_converges_geometrically() {
        let (a, star, lr) = (2.0, 1.5, 0.1);
        let mut p = one(-3.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, lr, 0.9, 0.999, 1e-8, &p);
        let mut err = (p.array(0).data()[0] - star).abs();
        for _ in 0..50 {
            let g = quad_grad(&p, a, star);
            opt.step(&mut p, &g);
            let next = (p.array(0).data()[0] - star).abs();
            assert!((next - (1.0 - lr * a) * err).abs() <= 1e-12);
            err = next;
        }
        assert!(err < 1e-4);
    }

    #[test]
    fn adam_reaches_the_minimum() {
        let (a, star) = (3.0, -0.7);
        let mut p = one(2.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, 0.9, 0.999, 1e-8, &p);
        for _ in 0..3000 {
            let g = quad_grad(&p, a, star);
            opt.step(&mut p, &g);
        }
        assert!((p.array(0).data()[0] - star).abs() < 1e-3);
    }

    #[test]
    fn first_adam_step_has_size_lr() {
        let mut p = one(0.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, 0.9, 0.999, 1e-8, &p);
        opt.step(&mut p, &one(42.0));
        assert!((p.array(0).data()[0] + 1e-3).abs() < 1e-10);
    }
}
