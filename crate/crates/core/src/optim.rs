//! SGD with momentum, Adam, and the polynomial learning-rate decay.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum {
            momentum,
            weight_decay: 0.0,
        }
    }

    /// Adam with the betas used by output-space adaptation discriminators.
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer plus its per-parameter moment buffers.
///
/// Buffers are created lazily on the first step, one set per parameter, in
/// the order the parameters are passed. Later steps must pass the same list.
#[derive(Clone, Debug)]
pub struct OptimizerState<E: Element = f32> {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    /// Momentum velocity (SGD) or first moment (Adam).
    pub first: Vec<Vec<E>>,
    /// Second moment (Adam only; empty for SGD).
    pub second: Vec<Vec<E>>,
    pub step_count: u64,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(kind: OptimizerKind, base_lr: f64) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Argument(format!("base learning rate must be positive, got {base_lr}")));
        }
        Ok(OptimizerState {
            kind,
            base_lr,
            first: Vec::new(),
            second: Vec::new(),
            step_count: 0,
        })
    }

    pub fn reset(&mut self) {
        self.first.clear();
        self.second.clear();
        self.step_count = 0;
    }

    fn ensure_buffers(&mut self, params: &[Tensor<E>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
            return Ok(());
        }
        let matches = self.first.len() == params.len()
            && self.first.iter().zip(params).all(|(b, p)| b.len() == p.numel());
        if !matches {
            return Err(Error::State(
                "parameter list differs from the one the optimizer was built for".into(),
            ));
        }
        Ok(())
    }

    /// Applies one update with learning rate `lr` using the gradients stored
    /// on `params`.
    pub fn step(&mut self, params: &[Tensor<E>], lr: f64) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::State(format!(
                "parameter {i} (shape {:?}) has no gradient",
                params[i].shape()
            )));
        }
        self.ensure_buffers(params)?;
        self.step_count += 1;
        let lr_e = E::lit(lr);
        match self.kind {
            OptimizerKind::SgdMomentum { momentum, weight_decay } => {
                let mu = E::lit(momentum);
                let wd = E::lit(weight_decay);
                for (p, vel) in params.iter().zip(&mut self.first) {
                    p.with_grad(|g| {
                        let g = g.expect("gradient checked above");
                        let mut w = p.data_mut();
                        for ((w, v), &g) in w.iter_mut().zip(vel.iter_mut()).zip(g) {
                            let g = g + wd * *w;
                            *v = mu * *v + g;
                            *w = *w - lr_e * *v;
                        }
                    });
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let t = self.step_count as i32;
                let (b1, b2, eps) = (E::lit(beta1), E::lit(beta2), E::lit(epsilon));
                let c1 = E::lit(1.0 - beta1.powi(t));
                let c2 = E::lit(1.0 - beta2.powi(t));
                for ((p, m), v) in params.iter().zip(&mut self.first).zip(&mut self.second) {
                    p.with_grad(|g| {
                        let g = g.expect("gradient checked above");
                        let mut w = p.data_mut();
                        for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                            *m = b1 * *m + (E::one() - b1) * g;
                            *v = b2 * *v + (E::one() - b2) * g * g;
                            let m_hat = *m / c1;
                            let v_hat = *v / c2;
                            *w = *w - lr_e * m_hat / (v_hat.sqrt() + eps);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// `lr(iter) = base_lr * (1 - iter / total_iters)^power`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub total_iters: usize,
    pub power: f64,
}

impl PolySchedule {
    pub fn new(base_lr: f64, total_iters: usize) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Argument(format!("base learning rate must be positive, got {base_lr}")));
        }
        if total_iters == 0 {
            return Err(Error::Argument("total_iters must be positive".into()));
        }
        Ok(PolySchedule {
            base_lr,
            total_iters,
            power: 0.9,
        })
    }

    pub fn lr(&self, iter: usize) -> Result<f64> {
        if iter > self.total_iters {
            return Err(Error::Argument(format!(
                "iteration {iter} beyond schedule length {}",
                self.total_iters
            )));
        }
        if iter == self.total_iters {
            return Ok(0.0);
        }
        let frac = 1.0 - iter as f64 / self.total_iters as f64;
        Ok(self.base_lr * frac.powf(self.power))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn param(v: f64) -> Tensor<f64> {
        Tensor::parameter(vec![v], &[1]).unwrap()
    }

    fn set_grad(p: &Tensor<f64>, g: f64) {
        p.clear_grad();
        p.scale(g).sum().backward().unwrap();
    }

    #[test]
    fn plain_sgd_step() {
        let p = param(1.0);
        set_grad(&p, 1.0);
        let mut opt = OptimizerState::new(OptimizerKind::sgd(0.0), 0.1).unwrap();
        opt.step(std::slice::from_ref(&p), 0.1).unwrap();
        assert_relative_eq!(p.item(), 0.9, epsilon = 1e-12);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let p = param(0.0);
        let mut opt = OptimizerState::new(OptimizerKind::sgd(0.9), 1.0).unwrap();
        set_grad(&p, 1.0);
        opt.step(std::slice::from_ref(&p), 1.0).unwrap();
        set_grad(&p, 1.0);
        opt.step(std::slice::from_ref(&p), 1.0).unwrap();
        // v1 = 1, v2 = 1.9 => p = -2.9
        assert_relative_eq!(p.item(), -2.9, epsilon = 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // t = 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        for g in [0.37, -4.0, 1e-3] {
            let p = param(2.0);
            set_grad(&p, g);
            let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.01).unwrap();
            opt.step(std::slice::from_ref(&p), 0.01).unwrap();
            let expected = 2.0 - 0.01 * g / (g.abs() + 1e-8);
            assert_relative_eq!(p.item(), expected, epsilon = 1e-12);
            assert_relative_eq!((p.item() - 2.0).abs(), 0.01, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_lr_leaves_params() {
        for kind in [OptimizerKind::sgd(0.9), OptimizerKind::adam()] {
            let p = param(3.5);
            set_grad(&p, 0.8);
            let mut opt = OptimizerState::new(kind, 0.1).unwrap();
            opt.step(std::slice::from_ref(&p), 0.0).unwrap();
            assert_eq!(p.item(), 3.5);
        }
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let p = param(1.0);
        let mut opt = OptimizerState::<f64>::new(OptimizerKind::sgd(0.9), 0.1).unwrap();
        assert!(matches!(opt.step(&[p], 0.1), Err(Error::State(_))));
        assert_eq!(opt.step_count, 0);
    }

    #[test]
    fn changed_parameter_list_is_rejected() {
        let a = param(1.0);
        set_grad(&a, 1.0);
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.1).unwrap();
        opt.step(std::slice::from_ref(&a), 0.1).unwrap();
        let b = Tensor::parameter(vec![1.0, 2.0], &[2]).unwrap();
        b.sum().backward().unwrap();
        assert!(opt.step(&[b], 0.1).is_err());
    }

    #[test]
    fn poly_endpoints_and_midpoint() {
        let s = PolySchedule::new(0.0002, 1000).unwrap();
        assert_eq!(s.lr(0).unwrap(), 0.0002);
        assert_eq!(s.lr(1000).unwrap(), 0.0);
        assert_relative_eq!(s.lr(500).unwrap(), 1.0717e-4, max_relative = 1e-4);
        assert!(s.lr(1001).is_err());
    }

    #[test]
    fn poly_is_non_increasing() {
        let s = PolySchedule::new(0.01, 97).unwrap();
        let lrs: Vec<f64> = (0..=97).map(|i| s.lr(i).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
