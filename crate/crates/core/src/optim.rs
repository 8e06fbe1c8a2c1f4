//! SGD with momentum, optional weight decay and per-tensor gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-tensor gradient L2 norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

/// Velocity buffers for an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T: Real> {
    pub config: SgdConfig,
    pub velocities: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig, params: &[&Tensor<T>]) -> Self {
        Sgd {
            config,
            velocities: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            steps: 0,
        }
    }

    /// `v ← momentum·v − lr·scale·g;  p ← p + v` for each parameter.
    ///
    /// `lr_scale[i]` multiplies the learning rate of parameter `i`. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[&Tensor<T>],
        lr_scale: &[f64],
        names: &[&str],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocities.len() {
            return Err(Error::Invalid(format!(
                "sgd step over {} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocities.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                let name = names.get(i).copied().unwrap_or("?");
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
            if g.shape() != params[i].shape() {
                return Err(Error::shape(
                    "sgd",
                    format!("param {:?} vs grad {:?}", params[i].shape(), g.shape()),
                ));
            }
        }
        let mom = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let scale = lr_scale.get(i).copied().unwrap_or(1.0);
            let lr = T::of(self.config.lr * scale);
            let clip = match self.config.clip_norm {
                Some(c) => {
                    let n = g.norm().as_f64();
                    if n > c {
                        T::of(c / n)
                    } else {
                        T::one()
                    }
                }
                None => T::one(),
            };
            let v = &mut self.velocities[i];
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let grad = gv * clip + wd * *pv;
                *vv = mom * *vv - lr * grad;
                *pv = *pv + *vv;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, momentum: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn plain_step() {
        let mut p = scalar(1.0);
        let mut opt = Sgd::new(cfg(0.1, 0.0), &[&p]);
        opt.step(&mut [&mut p], &[&scalar(2.0)], &[1.0], &["p"]).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = scalar(1.5);
        let mut opt = Sgd::new(cfg(0.3, 0.9), &[&p]);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[&scalar(0.0)], &[1.0], &["p"]).unwrap();
        }
        assert_eq!(p.item(), 1.5);
    }

    #[test]
    fn momentum_closed_form() {
        let mut p = scalar(0.0);
        let mut opt = Sgd::new(cfg(1.0, 0.5), &[&p]);
        opt.step(&mut [&mut p], &[&scalar(1.0)], &[1.0], &["p"]).unwrap();
        assert_eq!(p.item(), -1.0);
        opt.step(&mut [&mut p], &[&scalar(1.0)], &[1.0], &["p"]).unwrap();
        assert_eq!(p.item(), -2.5);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = scalar(1.0);
        let mut b = scalar(1.0);
        let mut opt = Sgd::new(cfg(0.1, 0.0), &[&a, &b]);
        let err = opt
            .step(
                &mut [&mut a, &mut b],
                &[&scalar(1.0), &scalar(f64::NAN)],
                &[1.0, 1.0],
                &["first", "second"],
            )
            .unwrap_err();
        assert!(err.to_string().contains("second"));
        assert_eq!(a.item(), 1.0);
    }

    #[test]
    fn clipping_bounds_step() {
        let mut p = scalar(0.0);
        let mut opt = Sgd::new(
            SgdConfig {
                clip_norm: Some(1.0),
                ..cfg(1.0, 0.0)
            },
            &[&p],
        );
        opt.step(&mut [&mut p], &[&scalar(100.0)], &[1.0], &["p"]).unwrap();
        assert!((p.item() + 1.0).abs() < 1e-12);
    }
}
