//! Stochastic gradient descent with heavy-ball momentum.

use alloc::format;
use alloc::vec::Vec;

use crate::encoder::ParamTensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// `v <- μ·v + g`, `p <- p - lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "invalid optimizer lr={lr} momentum={momentum}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [ParamTensor<F>], grads: &[Vec<F>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| alloc::vec![F::zero(); p.values.len()])
                .collect();
        }
        let lr = F::of(self.lr);
        let mu = F::of(self.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if g.len() != p.values.len() {
                return Err(Error::Shape(format!(
                    "gradient for {} has {} values, expected {}",
                    p.name,
                    g.len(),
                    p.values.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of {}", p.name),
                    iteration: None,
                });
            }
            for ((pv, &gv), vv) in p.values.iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = mu * *vv + gv;
                *pv = *pv - lr * *vv;
            }
        }
        Ok(())
    }
}
