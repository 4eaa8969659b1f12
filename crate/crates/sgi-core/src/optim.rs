//! Adam optimizer over named parameter sets with per-group learning-rate
//! scales. Groups are the unit the finetuning schemes act on: `Reduced`
//! maps encoder/dynamics to 0.01 and other pretrained weights to 1/3,
//! `Frozen` pins the encoder at 0, `Naive` leaves everything at 1.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// A named collection of parameters updated at a common learning-rate scale.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    /// Multiplier on the base learning rate. Zero freezes the group.
    pub learning_rate_scale: f64,
    /// Names of the parameters belonging to this group.
    pub params: Vec<String>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, scale: f64, params: Vec<String>) -> Result<Self> {
        if scale < 0.0 || !scale.is_finite() {
            return Err(CoreError::argument(format!(
                "learning_rate_scale must be finite and >= 0, got {scale}"
            )));
        }
        Ok(ParamGroup {
            name: name.into(),
            learning_rate_scale: scale,
            params,
        })
    }
}

/// Anything that exposes named parameter tensors in a stable order.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(String::from(n)));
        names
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam hyperparameters. Defaults: beta1 0.9, beta2 0.999, eps 1.5e-4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1.5e-4,
        }
    }
}

/// Adam state: first/second moment per parameter (keyed by name) plus the
/// shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over every parameter covered by `groups`.
    ///
    /// Parameters in a zero-scale group are left untouched (their gradients
    /// are cleared); parameters in a positive-scale group must carry a
    /// gradient. Parameters not covered by any group are skipped entirely.
    /// All consumed gradients are zeroed after the step.
    pub fn step(&mut self, params: &mut dyn ParamSet, groups: &[ParamGroup]) -> Result<()> {
        let mut scale_of: BTreeMap<&str, f64> = BTreeMap::new();
        for g in groups {
            for p in &g.params {
                if scale_of.insert(p.as_str(), g.learning_rate_scale).is_some() {
                    return Err(CoreError::contract(format!(
                        "parameter {p} appears in more than one group"
                    )));
                }
            }
        }

        self.step += 1;
        let t = self.step as f64;
        let AdamConfig {
            base_lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, t);
        let bc2 = 1.0 - libm::pow(beta2, t);

        let mut failure: Option<CoreError> = None;
        let moments = &mut self.moments;
        params.visit_mut(&mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            let Some(&scale) = scale_of.get(name) else {
                return;
            };
            if scale == 0.0 {
                tensor.zero_grad();
                return;
            }
            let Some(grad) = tensor.grad.as_ref() else {
                failure = Some(CoreError::contract(format!("parameter {name} has no gradient")));
                return;
            };
            let lr = base_lr * scale;
            let n = tensor.numel();
            let mom = moments.entry(String::from(name)).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            debug_assert_eq!(mom.m.len(), n);
            let grad = grad.clone();
            let values = tensor.values_mut();
            for i in 0..n {
                let g = grad[i];
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                values[i] -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
            tensor.zero_grad();
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Single {
        w: Tensor,
    }

    impl ParamSet for Single {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("w", &self.w);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("w", &mut self.w);
        }
    }

    struct Pair {
        a: Tensor,
        b: Tensor,
    }

    impl ParamSet for Pair {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("a", &self.a);
            f("b", &self.b);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("a", &mut self.a);
            f("b", &mut self.b);
        }
    }

    fn group(name: &str, scale: f64, params: &[&str]) -> ParamGroup {
        ParamGroup::new(name, scale, params.iter().map(|s| String::from(*s)).collect()).unwrap()
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Single {
            w: Tensor::new(&[2], alloc::vec![1.5, -0.5]).unwrap(),
        };
        p.w.accumulate_grad(&[0.0, 0.0]);
        let mut state = AdamState::new(AdamConfig::default());
        state.step(&mut p, &[group("all", 1.0, &["w"])]).unwrap();
        assert_eq!(p.w.values(), &[1.5, -0.5]);
    }

    #[test]
    fn descends_on_quadratic() {
        // f(w) = w^2 at w=1, grad 2. One step with base LR 0.1 must shrink w.
        let mut p = Single {
            w: Tensor::new(&[1], alloc::vec![1.0]).unwrap(),
        };
        p.w.accumulate_grad(&[2.0]);
        let cfg = AdamConfig {
            base_lr: 0.1,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg);
        state.step(&mut p, &[group("all", 1.0, &["w"])]).unwrap();
        assert!(p.w.values()[0] < 1.0);
        assert!(p.w.values()[0] > 0.0);
    }

    #[test]
    fn scale_is_proportional_on_first_step() {
        // Same gradient, scales 1.0 vs 0.01: first-step movement differs by
        // exactly the scale ratio (the Adam direction is identical).
        let mut p = Pair {
            a: Tensor::new(&[1], alloc::vec![1.0]).unwrap(),
            b: Tensor::new(&[1], alloc::vec![1.0]).unwrap(),
        };
        p.a.accumulate_grad(&[0.73]);
        p.b.accumulate_grad(&[0.73]);
        let mut state = AdamState::new(AdamConfig::default());
        state
            .step(
                &mut p,
                &[group("big", 1.0, &["a"]), group("small", 0.01, &["b"])],
            )
            .unwrap();
        let da = 1.0 - p.a.values()[0];
        let db = 1.0 - p.b.values()[0];
        assert!(da > 0.0);
        assert!((db / da - 0.01).abs() < 1e-12, "ratio {}", db / da);
    }

    #[test]
    fn zero_scale_group_freezes_parameters() {
        let mut p = Single {
            w: Tensor::new(&[1], alloc::vec![2.0]).unwrap(),
        };
        p.w.accumulate_grad(&[5.0]);
        let mut state = AdamState::new(AdamConfig::default());
        state.step(&mut p, &[group("frozen", 0.0, &["w"])]).unwrap();
        assert_eq!(p.w.values(), &[2.0]);
        // gradient consumed
        assert!(p.w.grad.as_ref().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = Single {
            w: Tensor::new(&[1], alloc::vec![2.0]).unwrap(),
        };
        let mut state = AdamState::new(AdamConfig::default());
        let err = state.step(&mut p, &[group("all", 1.0, &["w"])]).unwrap_err();
        assert!(matches!(err, CoreError::Contract(_)));
    }

    #[test]
    fn gradients_are_zeroed_after_step() {
        let mut p = Single {
            w: Tensor::new(&[1], alloc::vec![1.0]).unwrap(),
        };
        p.w.accumulate_grad(&[1.0]);
        let mut state = AdamState::new(AdamConfig::default());
        state.step(&mut p, &[group("all", 1.0, &["w"])]).unwrap();
        assert!(p.w.grad.as_ref().unwrap().iter().all(|&g| g == 0.0));
    }
}
