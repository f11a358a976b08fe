//! AdamW with decoupled weight decay, a multi-step learning-rate schedule and
//! per-group learning-rate multipliers.

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// LR multiplier applied to [`ParamGroup::Encoder`] parameters.
    pub encoder_lr_mult: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            encoder_lr_mult: 0.5,
        }
    }
}

/// Multiply the LR by `gamma` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiStepLr {
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for MultiStepLr {
    fn default() -> Self {
        Self {
            milestones: vec![20, 26],
            gamma: 0.1,
        }
    }
}

impl MultiStepLr {
    /// Number of milestones already passed at (0-based) `epoch`.
    pub fn passed(&self, epoch: usize) -> usize {
        self.milestones.iter().filter(|&&m| m <= epoch).count()
    }

    pub fn factor(&self, epoch: usize) -> f64 {
        self.gamma.powi(self.passed(epoch) as i32)
    }
}

/// Moments and step counter, one moment pair per parameter.
#[derive(Debug, Clone, Default)]
pub struct OptimState<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub schedule: MultiStepLr,
    pub state: OptimState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, schedule: MultiStepLr) -> Self {
        Self {
            config,
            schedule,
            state: OptimState {
                first: Vec::new(),
                second: Vec::new(),
                step: 0,
            },
        }
    }

    pub fn lr(&self, group: ParamGroup, epoch: usize) -> f64 {
        let mult = match group {
            ParamGroup::Encoder => self.config.encoder_lr_mult,
            ParamGroup::Head => 1.0,
        };
        self.config.lr * self.schedule.factor(epoch) * mult
    }

    /// One update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, epoch: usize) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` at flat index {i} is {}",
                    p.name, p.grad[i]
                )));
            }
        }
        if self.state.first.len() != store.len() {
            self.state.first = store.iter().map(|(_, p)| vec![T::zero(); p.grad.len()]).collect();
            self.state.second = self.state.first.clone();
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = &self.config;
        let (b1, b2) = (T::cast(c.beta1), T::cast(c.beta2));
        let bc1 = T::cast(1.0 - c.beta1.powi(t));
        let bc2 = T::cast(1.0 - c.beta2.powi(t));
        let eps = T::cast(c.eps);
        let lrs = [
            self.lr(ParamGroup::Encoder, epoch),
            self.lr(ParamGroup::Head, epoch),
        ];
        for (i, p) in store.iter_mut().enumerate() {
            let lr = lrs[matches!(p.group, ParamGroup::Head) as usize];
            let decay = T::cast(1.0 - lr * c.weight_decay);
            let lr = T::cast(lr);
            let (m, v) = (&mut self.state.first[i], &mut self.state.second[i]);
            let grad = &p.grad;
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] = w[j] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn store_with(w: f64) -> (ParamStore<f64>, crate::nn::ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .add("w", Tensor::from_f64(&[1], &[w]).unwrap(), ParamGroup::Head)
            .unwrap();
        (s, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let (mut s, id) = store_with(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, MultiStepLr::default());
        opt.step(&mut s, 0).unwrap();
        assert_eq!(s.value(id).data(), &[0.7]);
    }

    #[test]
    fn descends_on_square() {
        let (mut s, id) = store_with(1.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 1e-2,
                ..Default::default()
            },
            MultiStepLr::default(),
        );
        let grads = {
            let mut g = Graph::with_params(&s, true);
            let w = g.param(id);
            let sq = g.square(w);
            let l = g.sum(sq);
            g.backward(l).unwrap();
            g.param_grads()
        };
        s.accumulate(&grads);
        opt.step(&mut s, 0).unwrap();
        assert!(s.value(id).data()[0].abs() < 1.0);
    }

    #[test]
    fn milestone_decay_and_group_multiplier() {
        let opt = AdamW::<f32>::new(
            AdamWConfig {
                lr: 1.0,
                ..Default::default()
            },
            MultiStepLr {
                milestones: vec![3, 5],
                gamma: 0.1,
            },
        );
        assert_eq!(opt.lr(ParamGroup::Head, 2), 1.0);
        assert!((opt.lr(ParamGroup::Head, 3) - 0.1).abs() < 1e-15);
        assert!((opt.lr(ParamGroup::Head, 6) - 0.01).abs() < 1e-15);
        assert!((opt.lr(ParamGroup::Encoder, 3) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts() {
        let (mut s, id) = store_with(1.0);
        s.param_mut(id).grad[0] = f64::NAN;
        let mut opt = AdamW::new(AdamWConfig::default(), MultiStepLr::default());
        let err = opt.step(&mut s, 0).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }
}
