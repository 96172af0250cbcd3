use crate::error::{Error, Result};

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        let mut params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} moment buffers, {} params, {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            let p: &Tensor<T> = p;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step = T::from_f64(c.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv = *pv - step * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut params = vec![Tensor::new(&[3], vec![1.0f64, -2.0, 0.0]).unwrap()];
        let grads = vec![Tensor::new(&[3], vec![0.5, -3.0, 2.0]).unwrap()];
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg, &params);
        state.step(&mut params, &grads).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let expected = [1.0 - 1e-3, -2.0 + 1e-3, -1e-3];
        for (p, e) in params[0].data().iter().zip(expected) {
            assert!((p - e).abs() < 1e-10, "{p} vs {e}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::new(&[2], vec![0.3f32, -0.7]).unwrap()];
        let before = params.clone();
        let mut state = AdamState::new(AdamConfig::default(), &params);
        state.step(&mut params, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn identical_steps_are_deterministic() {
        let params = vec![Tensor::from_fn(&[5], |i| i as f32 * 0.1)];
        let grads = vec![Tensor::from_fn(&[5], |i| (i as f32 - 2.0) * 0.3)];
        let run = || {
            let mut p = params.clone();
            let mut s = AdamState::new(AdamConfig::default(), &p);
            s.step(&mut p, &grads).unwrap();
            s.step(&mut p, &grads).unwrap();
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        assert!(state.step(&mut params, &[Tensor::zeros(&[3])]).is_err());
        assert!(state.step(&mut params, &[]).is_err());
    }
}
