//! Adam with decoupled weight decay, and SGD with momentum and polynomial
//! learning-rate decay.

use bws_tensor::{Gradients, Real, Tensor};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// `lr · (1 - step / total_steps)^0.9`, momentum 0.9.
    SgdPoly,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" | "sgd-poly" => Ok(Self::SgdPoly),
            other => Err(Error::config(format!("unknown optimizer {other:?}; expected adam or sgd-poly"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::SgdPoly => "sgd-poly",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub poly_power: f64,
    /// Horizon of the polynomial schedule.
    pub total_steps: u64,
}

impl OptimConfig {
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            poly_power: 0.9,
            total_steps: 1,
        }
    }

    pub fn sgd_poly(lr: f64, weight_decay: f64, total_steps: u64) -> Self {
        Self { kind: OptimizerKind::SgdPoly, total_steps, ..Self::adam(lr, weight_decay) }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.kind {
            OptimizerKind::Adam => self.lr,
            OptimizerKind::SgdPoly => {
                let frac = 1.0 - step as f64 / self.total_steps.max(1) as f64;
                self.lr * frac.max(0.0).powf(self.poly_power)
            }
        }
    }
}

/// Gradients of each bound parameter, in store order.
pub fn collect_grads<T: Real>(grads: &Gradients<T>, bound: &Bound<'_, T>) -> Vec<Option<Tensor<T>>> {
    bound.vars().iter().map(|&v| grads.get(v).cloned()).collect()
}

pub struct Optimizer<T: Real> {
    cfg: OptimConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimConfig, store: &ParamStore<T>) -> Result<Self> {
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || !(cfg.weight_decay >= 0.0) {
            return Err(Error::config("learning rate and weight decay must be finite and non-negative"));
        }
        let zeros: Vec<Tensor<T>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        let second = if cfg.kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() };
        Ok(Self { cfg, step: 0, first: zeros, second })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        if lr == 0.0 {
            return Ok(());
        }
        let wd = self.cfg.weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for (i, (id, g)) in ids.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::contract(format!("gradient shape {:?} for parameter shape {:?}", g.shape(), p.shape())));
            }
            match self.cfg.kind {
                OptimizerKind::Adam => {
                    let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                    let c1 = 1.0 - b1.powi(self.step as i32);
                    let c2 = 1.0 - b2.powi(self.step as i32);
                    let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
                    for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gf = g.as_f64();
                        let mf = b1 * m.as_f64() + (1.0 - b1) * gf;
                        let vf = b2 * v.as_f64() + (1.0 - b2) * gf * gf;
                        *m = T::of(mf);
                        *v = T::of(vf);
                        let pf = p.as_f64();
                        let update = (mf / c1) / ((vf / c2).sqrt() + self.cfg.eps);
                        *p = T::of(pf - lr * wd * pf - lr * update);
                    }
                }
                OptimizerKind::SgdPoly => {
                    let mu = self.cfg.momentum;
                    for ((p, &g), buf) in p.data_mut().iter_mut().zip(g.data()).zip(self.first[i].data_mut()) {
                        let pf = p.as_f64();
                        let bf = mu * buf.as_f64() + g.as_f64() + wd * pf;
                        *buf = T::of(bf);
                        *p = T::of(pf - lr * bf);
                    }
                }
            }
        }
        Ok(())
    }
}
