//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamKey};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient when its global l2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn for_model(config: AdamConfig, params: &ModelParams) -> Self {
        Self::new(config, params.iter().map(|(_, t)| t.shape()))
    }

    /// One Adam update over parallel slices of parameters and gradients.
    /// `names` label parameters in diagnostics.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        names: &[&str],
    ) -> Result<()> {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                let name = names.get(i).copied().unwrap_or("?");
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
            if g.shape() != params[i].shape() {
                return Err(Error::Config(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    names.get(i).copied().unwrap_or("?"),
                    g.shape(),
                    params[i].shape()
                )));
            }
        }
        let c = self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let norm = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / correction1;
                let v_hat = v[j] / correction2;
                *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Updates every model tensor; `grads` follows [`ParamKey::ALL`] order.
    pub fn step_model(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        let names: Vec<&str> = ParamKey::ALL.iter().map(|k| k.name()).collect();
        let mut refs = params.tensors_mut();
        self.update(&mut refs, grads, &names)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(state: &mut AdamState, w: &mut Tensor, g: &Tensor) {
        state.update(&mut [w], std::slice::from_ref(g), &["w"]).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::vector(vec![1.0, -2.0]);
        let mut s = AdamState::new(AdamConfig::default(), [w.shape()]);
        run(&mut s, &mut w, &Tensor::zeros(&[2]));
        assert_eq!(w.data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut w = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let g = Tensor::vector(vec![3.0, -0.5, 1e-3]);
        let mut s = AdamState::new(cfg, [w.shape()]);
        run(&mut s, &mut w, &g);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        for (x, gi) in w.data().iter().zip(g.data()) {
            let expected = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((x - expected).abs() < 1e-18);
            assert!((x + cfg.lr * gi.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = Tensor::vector(vec![0.0]);
        let mut b = Tensor::vector(vec![0.0]);
        let mut s = AdamState::new(AdamConfig::default(), [a.shape(), b.shape()]);
        let err = s
            .update(
                &mut [&mut a, &mut b],
                &[Tensor::vector(vec![1.0]), Tensor::vector(vec![f64::NAN])],
                &["a", "b"],
            )
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b"));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn quadratic_converges() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut w = Tensor::vector(vec![1.0, 1.0]);
        let f0 = w.norm().powi(2);
        let mut s = AdamState::new(cfg, [w.shape()]);
        for _ in 0..200 {
            let g = w.map(|x| 2.0 * x);
            run(&mut s, &mut w, &g);
        }
        assert!(w.norm().powi(2) <= 0.01 * f0, "f = {}", w.norm().powi(2));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let cfg = AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        };
        let mut w = Tensor::vector(vec![0.0, 0.0]);
        let mut s = AdamState::new(cfg, [w.shape()]);
        run(&mut s, &mut w, &Tensor::vector(vec![30.0, 40.0]));
        // first moment stores the clipped gradient (0.6, 0.8) scaled by 1-β1
        assert!((s.first[0].data()[0] - 0.1 * 0.6).abs() < 1e-12);
    }
}
