use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers per named parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: IndexMap<String, Tensor<f32>>,
    pub v: IndexMap<String, Tensor<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One bias-corrected Adam update over every `(name, param, grad)` triple.
    /// The step counter advances by exactly one per call.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<f32>, &'a [f32])>,
    {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, param, grad) in params {
            if grad.len() != param.numel() {
                return Err(Error::shape("adam_step", param.shape(), &[grad.len()]));
            }
            let shape = param.shape().to_vec();
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
            if m.shape() != shape.as_slice() {
                return Err(Error::shape("adam_step", &shape, m.shape()));
            }
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
            if v.shape() != shape.as_slice() {
                return Err(Error::shape("adam_step", &shape, v.shape()));
            }
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad[i] as f64 + weight_decay * *p as f64;
                let mi = beta1 * md[i] as f64 + (1.0 - beta1) * g;
                let vi = beta2 * vd[i] as f64 + (1.0 - beta2) * g * g;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let upd = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                *p = (*p as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(theta: &mut Tensor<f32>, g: &[f32], st: &mut AdamState) {
        st.step([("p", theta, g)]).unwrap();
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut st = AdamState::new(AdamConfig::default());
        let mut th = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        run(&mut th, &[0.3, -7.0, 2.0], &mut st);
        let lr = 1e-3;
        let want = [1.0 - lr, -2.0 + lr, 0.5 - lr];
        for (a, b) in th.data().iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::new(AdamConfig::default());
        let mut th = Tensor::new(&[2], vec![0.25, -4.0]).unwrap();
        let before = th.clone();
        for _ in 0..5 {
            run(&mut th, &[0.0, 0.0], &mut st);
        }
        assert_eq!(th.data(), before.data());
        assert_eq!(st.t, 5);
    }

    #[test]
    fn minimizes_square() {
        let mut st = AdamState::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        let mut th = Tensor::new(&[1], vec![1.0]).unwrap();
        for _ in 0..100 {
            let g = 2.0 * th.data()[0];
            run(&mut th, &[g], &mut st);
        }
        // reference scalar run in f64
        let (mut x, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=100 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!(x.abs() < 0.05);
        assert!(th.data()[0].abs() < 0.05, "theta = {}", th.data()[0]);
        assert!((th.data()[0] as f64 - x).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut st = AdamState::new(AdamConfig::default());
        let mut th = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        assert!(st.step([("p", &mut th, &[1.0f32][..])]).is_err());
    }
}
