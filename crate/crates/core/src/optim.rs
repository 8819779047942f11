//! AdamW with per-group peak learning rates and a warmup-linear schedule.

use serde::{Deserialize, Serialize};

use crate::error::{DeptError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Linear ramp from 0 to the peak over the warmup steps, then linear
    /// decay to 0 at `total_steps`.
    WarmupLinear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_proportion: f64,
    pub schedule: Schedule,
    pub total_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            warmup_proportion: 0.06,
            schedule: Schedule::WarmupLinear,
            total_steps: 2000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(DeptError::Config("beta1 and beta2 must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_proportion) {
            return Err(DeptError::Config("warmup_proportion must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(DeptError::Config("eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_proportion * self.total_steps as f64).round() as usize
    }
}

/// Scheduled learning rate at `step` (0-based update index) for a group
/// whose peak rate is `peak`.
pub fn lr_at(cfg: &OptimizerConfig, step: usize, peak: f64) -> f64 {
    match cfg.schedule {
        Schedule::Constant => peak,
        Schedule::WarmupLinear => {
            let total = cfg.total_steps;
            let warmup = cfg.warmup_steps();
            if step >= total {
                0.0
            } else if step < warmup {
                peak * step as f64 / warmup as f64
            } else {
                peak * (total - step) as f64 / (total - warmup) as f64
            }
        }
    }
}

pub struct ParamGroup<T: Scalar = f32> {
    pub name: String,
    pub params: Vec<Tensor<T>>,
    pub peak_lr: f64,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn new(name: impl Into<String>, params: Vec<Tensor<T>>, peak_lr: f64) -> Self {
        ParamGroup {
            name: name.into(),
            params,
            peak_lr,
        }
    }
}

struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Decoupled-weight-decay Adam. Each group follows the shared schedule
/// scaled to its own peak rate.
pub struct AdamW<T: Scalar = f32> {
    cfg: OptimizerConfig,
    groups: Vec<ParamGroup<T>>,
    moments: Vec<Vec<Moments<T>>>,
    t: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimizerConfig, groups: Vec<ParamGroup<T>>) -> Result<Self> {
        cfg.validate()?;
        let mut seen = std::collections::HashSet::new();
        for g in &groups {
            for p in &g.params {
                if !seen.insert(p.id()) {
                    return Err(DeptError::Contract(format!(
                        "parameter appears in more than one group (group `{}`)",
                        g.name
                    )));
                }
                if !p.is_leaf() || !p.requires_grad() {
                    return Err(DeptError::Contract(format!(
                        "group `{}` holds a tensor that is not a trainable leaf",
                        g.name
                    )));
                }
            }
        }
        let moments = groups
            .iter()
            .map(|g| {
                g.params
                    .iter()
                    .map(|p| Moments {
                        first: vec![T::zero(); p.numel()],
                        second: vec![T::zero(); p.numel()],
                    })
                    .collect()
            })
            .collect();
        Ok(AdamW {
            cfg,
            groups,
            moments,
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    /// Updates applied so far.
    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Scheduled rate of each group at `step_index`.
    pub fn rates_at(&self, step_index: usize) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| lr_at(&self.cfg, step_index, g.peak_lr))
            .collect()
    }

    /// One update using the rates scheduled for `step_index`; gradients are
    /// cleared afterwards.
    pub fn step(&mut self, step_index: usize) -> Result<()> {
        for g in &self.groups {
            if let Some(p) = g.params.iter().find(|p| !p.has_grad()) {
                return Err(DeptError::Contract(format!(
                    "parameter of shape {:?} in group `{}` has no gradient",
                    p.shape(),
                    g.name
                )));
            }
        }
        self.t += 1;
        let b1 = T::of(self.cfg.beta1);
        let b2 = T::of(self.cfg.beta2);
        let c1 = T::of(1.0 - self.cfg.beta1.powi(self.t as i32));
        let c2 = T::of(1.0 - self.cfg.beta2.powi(self.t as i32));
        let eps = T::of(self.cfg.eps);
        for (g, moments) in self.groups.iter().zip(self.moments.iter_mut()) {
            let lr_f = lr_at(&self.cfg, step_index, g.peak_lr);
            let lr = T::of(lr_f);
            let decay = T::of(1.0 - lr_f * self.cfg.weight_decay);
            for (p, mo) in g.params.iter().zip(moments.iter_mut()) {
                let grad = p.grad().expect("checked above");
                p.update(|w| {
                    for i in 0..w.len() {
                        let gi = grad[i];
                        mo.first[i] = b1 * mo.first[i] + (T::one() - b1) * gi;
                        mo.second[i] = b2 * mo.second[i] + (T::one() - b2) * gi * gi;
                        let m_hat = mo.first[i] / c1;
                        let v_hat = mo.second[i] / c2;
                        w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                })?;
                p.zero_grad();
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for g in &self.groups {
            for p in &g.params {
                p.zero_grad();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn schedule(total: usize) -> OptimizerConfig {
        OptimizerConfig {
            total_steps: total,
            ..Default::default()
        }
    }

    #[test]
    fn warmup_linear_examples() {
        let cfg = schedule(1000);
        assert_eq!(cfg.warmup_steps(), 60);
        assert_eq!(lr_at(&cfg, 0, 0.3), 0.0);
        assert_eq!(lr_at(&cfg, 60, 0.3), 0.3);
        // (1000 − 530) / (1000 − 60) = 0.5
        assert_abs_diff_eq!(lr_at(&cfg, 530, 0.3), 0.15, epsilon = 1e-15);
        assert_eq!(lr_at(&cfg, 1000, 0.3), 0.0);
    }

    #[test]
    fn schedule_peaks_once_and_is_continuous() {
        let cfg = schedule(200);
        let rates: Vec<f64> = (0..=200).map(|s| lr_at(&cfg, s, 1.0)).collect();
        let peak = rates.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(rates.iter().filter(|&&r| r == peak).count(), 1);
        for w in rates.windows(2) {
            assert!((w[1] - w[0]).abs() <= 1.0 / 12.0 + 1e-12);
        }
    }

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::param(vec![v], &[1]).unwrap()
    }

    fn constant_cfg(wd: f64) -> OptimizerConfig {
        OptimizerConfig {
            weight_decay: wd,
            schedule: Schedule::Constant,
            ..Default::default()
        }
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let p = scalar_param(0.0);
        let mut opt = AdamW::new(constant_cfg(0.0), vec![ParamGroup::new("p", vec![p.clone()], 0.1)]).unwrap();
        p.accumulate_grad(vec![1.0]);
        opt.step(0).unwrap();
        // m̂ = v̂ = 1, so the update is −0.1 / (1 + eps).
        assert_abs_diff_eq!(p.values()[0], -0.1 / (1.0 + 1e-6), epsilon = 1e-15);
        assert!(!p.has_grad());
    }

    #[test]
    fn decoupled_decay_scales_before_adam_delta() {
        let p = scalar_param(2.0);
        let mut opt = AdamW::new(constant_cfg(0.01), vec![ParamGroup::new("p", vec![p.clone()], 0.1)]).unwrap();
        p.accumulate_grad(vec![1.0]);
        opt.step(0).unwrap();
        let expected = 2.0 * (1.0 - 0.1 * 0.01) - 0.1 / (1.0 + 1e-6);
        assert_abs_diff_eq!(p.values()[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn groups_are_independent() {
        let cfg = schedule(50);
        let grads = |k: usize| -> (Vec<f64>, Vec<f64>) {
            let x = k as f64;
            (vec![x.sin(), 0.5 - x.cos()], vec![0.1 * x, -1.0])
        };
        let a = Tensor::<f64>::param(vec![0.2, -0.4], &[2]).unwrap();
        let b = Tensor::<f64>::param(vec![1.0, 3.0], &[2]).unwrap();
        let mut joint = AdamW::new(
            cfg,
            vec![
                ParamGroup::new("prompt", vec![a.clone()], 0.3),
                ParamGroup::new("low_rank", vec![b.clone()], 5e-4),
            ],
        )
        .unwrap();
        let a2 = a.deep_clone();
        let b2 = b.deep_clone();
        let mut only_a = AdamW::new(cfg, vec![ParamGroup::new("prompt", vec![a2.clone()], 0.3)]).unwrap();
        let mut only_b = AdamW::new(cfg, vec![ParamGroup::new("low_rank", vec![b2.clone()], 5e-4)]).unwrap();
        for k in 0..50 {
            let (ga, gb) = grads(k);
            a.accumulate_grad(ga.clone());
            b.accumulate_grad(gb.clone());
            a2.accumulate_grad(ga);
            b2.accumulate_grad(gb);
            joint.step(k).unwrap();
            only_a.step(k).unwrap();
            only_b.step(k).unwrap();
        }
        assert_eq!(a.to_vec(), a2.to_vec());
        assert_eq!(b.to_vec(), b2.to_vec());
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let p = scalar_param(1.0);
        let mut opt = AdamW::new(constant_cfg(0.0), vec![ParamGroup::new("p", vec![p], 0.1)]).unwrap();
        assert!(matches!(opt.step(0), Err(DeptError::Contract(_))));
    }

    #[test]
    fn parameter_in_two_groups_is_rejected() {
        let p = scalar_param(1.0);
        let groups = vec![
            ParamGroup::new("a", vec![p.clone()], 0.1),
            ParamGroup::new("b", vec![p], 0.1),
        ];
        assert!(AdamW::new(constant_cfg(0.0), groups).is_err());
    }

    #[test]
    fn bad_betas_are_config_errors() {
        let cfg = OptimizerConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(DeptError::Config(_))));
    }
}
