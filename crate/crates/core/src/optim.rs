//! AdamW with decoupled weight decay.

use crate::config::TrainConfig;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub params: AdamWParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: AdamWParams, shapes: &[&[usize]]) -> Self {
        let zeros = |s: &&[usize]| vec![0.0; s.iter().product()];
        Self {
            params,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update at step `t + 1`:
    /// `θ ← θ − lr·wd·θ`, then `θ ← θ − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, weights: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), TensorError> {
        if weights.len() != grads.len() || weights.len() != self.m.len() {
            return Err(TensorError::Shape {
                op: "adamw_step",
                detail: format!("{} weights, {} grads, {} moments", weights.len(), grads.len(), self.m.len()),
            });
        }
        for (w, g) in weights.iter().zip(grads) {
            if w.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "adamw_step",
                    detail: format!("weight {:?} vs grad {:?}", w.shape(), g.shape()),
                });
            }
        }
        self.t += 1;
        let AdamWParams {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.params;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((w, g), (m, v)) in weights.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((theta, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *theta -= lr * weight_decay * *theta;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(lr: f64, wd: f64) -> AdamWParams {
        AdamWParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_grads_without_decay_is_fixed_point() {
        let mut w = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.clone();
        let mut opt = AdamW::new(params(0.1, 0.0), &[&[3]]);
        for _ in 0..5 {
            opt.step(&mut [&mut w], &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_is_lr_sized() {
        let mut w = Tensor::scalar(1.0);
        let mut opt = AdamW::new(params(0.1, 0.0), &[&[1]]);
        opt.step(&mut [&mut w], &[Tensor::scalar(1.0)]).unwrap();
        assert!((w.item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_nonzero_weights() {
        let mut w = Tensor::new(&[3], vec![1.0, -2.0, 0.0]).unwrap();
        let mut opt = AdamW::new(params(0.1, 0.01), &[&[3]]);
        opt.step(&mut [&mut w], &[Tensor::zeros(&[3])]).unwrap();
        assert!(w.data()[0] < 1.0 && w.data()[0] > 0.0);
        assert!(w.data()[1] > -2.0 && w.data()[1] < 0.0);
        assert_eq!(w.data()[2], 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut w = Tensor::zeros(&[2]);
        let mut opt = AdamW::new(params(0.1, 0.0), &[&[2]]);
        assert!(opt.step(&mut [&mut w], &[Tensor::zeros(&[3])]).is_err());
    }

    #[test]
    fn quadratic_bowl_descends() {
        // f(θ) = Σ a_i θ_i², a = [1, 10, 0.1]
        let a = [1.0, 10.0, 0.1];
        let mut w = Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let mut opt = AdamW::new(params(0.01, 0.0), &[&[3]]);
        let loss = |w: &Tensor| w.data().iter().zip(&a).map(|(x, c)| c * x * x).sum::<f64>();
        let mut history = vec![loss(&w)];
        for _ in 0..100 {
            let g = Tensor::new(&[3], w.data().iter().zip(&a).map(|(x, c)| 2.0 * c * x).collect()).unwrap();
            opt.step(&mut [&mut w], &[g]).unwrap();
            history.push(loss(&w));
        }
        for pair in history[5..].windows(2) {
            assert!(pair[1] < pair[0]);
        }
    }
}
