use dept_core::{lr_at, AdamW, OptimizerConfig, ParamGroup, Schedule, Tensor};
use proptest::prelude::*;

/// Textbook AdamW on one scalar: decay by `1 − lr·wd`, then the
/// bias-corrected Adam step.
struct ScalarAdamW {
    w: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdamW {
    fn step(&mut self, cfg: &OptimizerConfig, g: f64, lr: f64) {
        self.t += 1;
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * g;
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * g * g;
        let m_hat = self.m / (1.0 - cfg.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - cfg.beta2.powi(self.t));
        self.w = self.w * (1.0 - lr * cfg.weight_decay) - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Gradient of `sum(w ⊙ c)` with respect to `w` is `c`.
fn inject(w: &Tensor<f64>, grads: &[f64]) {
    let c = Tensor::new(grads.to_vec(), w.shape()).unwrap();
    w.mul(&c).unwrap().sum().backward().unwrap();
}

proptest! {
    #[test]
    fn matches_scalar_reference(
        init in prop::collection::vec(-2.0f64..2.0, 1..5),
        grads in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), 1..25),
        peak in 1e-4f64..0.5,
        decay in 0.0f64..0.1,
        warm in 0.0f64..0.5,
    ) {
        let n = init.len();
        let cfg = OptimizerConfig {
            weight_decay: decay,
            warmup_proportion: warm,
            total_steps: grads.len(),
            ..Default::default()
        };
        let w = Tensor::param(init.clone(), &[n]).unwrap();
        let mut opt = AdamW::new(cfg, vec![ParamGroup::new("w", vec![w.clone()], peak)]).unwrap();
        let mut reference: Vec<ScalarAdamW> = init.iter().map(|&w| ScalarAdamW { w, m: 0.0, v: 0.0, t: 0 }).collect();
        for (step, g) in grads.iter().enumerate() {
            inject(&w, &g[..n]);
            opt.step(step).unwrap();
            let lr = lr_at(&cfg, step, peak);
            for (r, &gi) in reference.iter_mut().zip(&g[..n]) {
                r.step(&cfg, gi, lr);
            }
            for (got, r) in w.to_vec().iter().zip(&reference) {
                prop_assert!((got - r.w).abs() <= 1e-12 * (1.0 + r.w.abs()), "step {}: {} vs {}", step, got, r.w);
            }
            prop_assert!(!w.has_grad());
        }
        prop_assert_eq!(opt.steps_taken(), grads.len());
    }

    #[test]
    fn warmup_linear_shape(total in 1usize..5000, warm in 0.0f64..0.9, peak in 1e-5f64..1.0) {
        let cfg = OptimizerConfig { total_steps: total, warmup_proportion: warm, ..Default::default() };
        let warmup = cfg.warmup_steps();
        let rates: Vec<f64> = (0..=total).map(|s| lr_at(&cfg, s, peak)).collect();
        prop_assert!(rates.iter().all(|&r| (0.0..=peak * (1.0 + 1e-12)).contains(&r)));
        prop_assert_eq!(rates[total], 0.0);
        for s in 1..=warmup.min(total - 1) {
            prop_assert!(rates[s] >= rates[s - 1]);
        }
        for s in (warmup + 1)..=total {
            prop_assert!(rates[s] <= rates[s - 1] + 1e-15);
        }
        if warmup < total {
            prop_assert!((rates[warmup] - peak).abs() <= 1e-12 * peak);
        }
    }

    #[test]
    fn constant_schedule_ignores_the_step(step in 0usize..10_000, peak in 1e-5f64..1.0) {
        let cfg = OptimizerConfig { schedule: Schedule::Constant, ..Default::default() };
        prop_assert_eq!(lr_at(&cfg, step, peak), peak);
    }
}

#[test]
fn groups_follow_their_own_peaks() {
    let cfg = OptimizerConfig {
        total_steps: 100,
        ..Default::default()
    };
    let a = Tensor::<f64>::param(vec![0.0], &[1]).unwrap();
    let b = Tensor::<f64>::param(vec![0.0], &[1]).unwrap();
    let opt = AdamW::new(
        cfg,
        vec![ParamGroup::new("prompt", vec![a], 0.3), ParamGroup::new("low-rank", vec![b], 1e-4)],
    )
    .unwrap();
    for step in [0, 3, 6, 50, 99] {
        let r = opt.rates_at(step);
        assert!((r[0] / 0.3 - r[1] / 1e-4).abs() < 1e-9);
    }
}
