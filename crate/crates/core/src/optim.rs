//! AdamW with decoupled weight decay.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(invalid(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<ArrayD<f64>>,
    pub second: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new<P: Parameters>(config: AdamWConfig, model: &P) -> Self {
        let mut first = Vec::new();
        model.visit(&mut |_, a| first.push(ArrayD::zeros(a.raw_dim())));
        let second = first.clone();
        Self { config, step: 0, first, second }
    }

    /// One update of `model` from `grads`, which must share its layout.
    pub fn update<P: Parameters>(&mut self, model: &mut P, grads: &P) -> Result<()> {
        let mut g = Vec::with_capacity(self.first.len());
        grads.visit(&mut |_, a| g.push(a.to_owned()));
        if g.len() != self.first.len() {
            return Err(Error::Invariant(format!("optimizer tracks {} tensors, gradient has {}", self.first.len(), g.len())));
        }
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_mut(&mut |_, mut p| {
            let (m, v, g) = (&mut first[idx], &mut second[idx], &g[idx]);
            idx += 1;
            ndarray::Zip::from(&mut p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
            });
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, ArrayViewD, ArrayViewMutD};

    #[derive(Clone)]
    struct Quad(Array1<f64>);

    impl Parameters for Quad {
        fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
            f("x", self.0.view().into_dyn());
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
            f("x", self.0.view_mut().into_dyn());
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut q = Quad(Array1::from(vec![1.0, -2.0]));
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &q);
        let g = Quad(Array1::from(vec![0.5, -3.0]));
        opt.update(&mut q, &g).unwrap();
        assert!((q.0[0] - (1.0 - cfg.lr)).abs() < 1e-9);
        assert!((q.0[1] - (-2.0 + cfg.lr)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut q = Quad(Array1::from(vec![3.0, -4.0]));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() }, &q);
        for _ in 0..2000 {
            let g = Quad(q.0.mapv(|x| 2.0 * x));
            opt.update(&mut q, &g).unwrap();
        }
        assert!(q.0.iter().all(|x| x.abs() < 1e-2), "{:?}", q.0);
    }
}
