use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::Backbone;
use crate::bench::memory_estimate;
use crate::config::TrainConfig;
use crate::error::{DeptError, Result};
use crate::optim::{AdamW, OptimizerConfig, ParamGroup};
use crate::peft::{PeftParams, PeftVariant, VariantTag};
use crate::rng::derive_seed;
use crate::tasks::Example;

use super::{check_examples, evaluate, label_loss, EvalMetric};

const SHUFFLE_STREAM: u64 = 30;

/// Everything a training run needs besides the model and data.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub train: TrainConfig,
    /// `total_steps` is taken from `train.steps`.
    pub optim: OptimizerConfig,
    pub seed: u64,
    /// Label tokens scored at evaluation; empty scores the whole vocabulary.
    pub candidates: Vec<usize>,
    /// Vanilla prompt length the adapter is budgeted against.
    pub budget_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean training loss over the updates since the previous point.
    pub train_loss: Option<f64>,
    /// Loss on the evaluation set.
    pub loss: f64,
    pub accuracy: f64,
    pub lr_prompt: f64,
    pub lr_lowrank: f64,
}

/// Wall-clock figures. They vary between machines and runs and are left
/// out of reproducibility comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
    pub ms_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: VariantTag,
    pub m: usize,
    pub r: usize,
    pub budget_len: usize,
    pub trainable_params: usize,
    pub seed: u64,
    pub steps: usize,
    pub eval_every: usize,
    /// Evaluation before the first update.
    pub initial: EvalPoint,
    /// One point every `eval_every` updates.
    pub curve: Vec<EvalPoint>,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub best_accuracy: f64,
    pub best_step: usize,
    /// Activation elements of the longest composed training batch.
    pub peak_activation_elems: u64,
    pub timing: Timing,
    /// The configuration that produced this run.
    pub config: Value,
}

impl RunReport {
    /// Report without wall-clock fields, for reproducibility checks.
    pub fn numeric_fields(&self) -> RunReport {
        RunReport {
            timing: Timing {
                seconds: 0.0,
                ms_per_step: 0.0,
            },
            ..self.clone()
        }
    }

    pub fn write_curve_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss", "accuracy", "lr_prompt", "lr_lowrank"])?;
        for p in &self.curve {
            w.write_record([
                p.step.to_string(),
                p.loss.to_string(),
                p.accuracy.to_string(),
                p.lr_prompt.to_string(),
                p.lr_lowrank.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    /// Adapter at the best evaluation point (earliest on ties).
    pub best: PeftParams,
    pub last: PeftParams,
}

/// Epoch-wise shuffled mini-batches; the tail of an epoch that cannot fill a
/// batch is dropped.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self, size: usize) -> &[usize] {
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + size];
        self.pos += size;
        out
    }
}

/// Optimise the adapter against the frozen backbone, evaluating every
/// `eval_every` updates and keeping the best adapter seen, the initial one
/// included.
pub fn train_peft(
    backbone: &Backbone,
    variant: PeftVariant,
    train: &[Example],
    eval: &[Example],
    spec: &TrainSpec,
) -> Result<TrainOutcome> {
    let tc = &spec.train;
    tc.validate()?;
    if !backbone.is_frozen() {
        return Err(DeptError::Contract("adapter training needs a frozen backbone".into()));
    }
    if train.is_empty() {
        return Err(DeptError::Degenerate("empty training set".into()));
    }
    let bc = backbone.config();
    check_examples(bc.vocab_size, bc.max_seq_len, &[train, eval])?;

    let params = variant.params;
    let (prompt, low_rank) = params.param_groups();
    let mut groups = Vec::new();
    if !prompt.is_empty() {
        groups.push(ParamGroup::new("prompt", prompt, variant.rates.prompt));
    }
    if !low_rank.is_empty() {
        groups.push(ParamGroup::new("low_rank", low_rank, variant.rates.low_rank));
    }
    let optim = OptimizerConfig {
        total_steps: tc.steps,
        ..spec.optim
    };
    let mut opt = AdamW::new(optim, groups)?;
    let rate_of = |opt: &AdamW, name: &str, step: usize| -> f64 {
        opt.groups()
            .iter()
            .zip(opt.rates_at(step))
            .find(|(g, _)| g.name == name)
            .map_or(0.0, |(_, r)| r)
    };

    let batch_size = tc.batch_size.min(train.len());
    let longest = train.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    let peak_activation_elems = memory_estimate(bc, params.prompt_len() + longest, batch_size);
    let point = |step: usize, train_loss: Option<f64>, m: EvalMetric, lrs: (f64, f64)| EvalPoint {
        step,
        train_loss,
        loss: m.loss,
        accuracy: m.accuracy,
        lr_prompt: lrs.0,
        lr_lowrank: lrs.1,
    };

    let initial_metric = evaluate(backbone, &params, eval, &spec.candidates, tc.eval_batch_size)?;
    let initial = point(0, None, initial_metric, (0.0, 0.0));
    let mut best = params.deep_clone();
    let mut best_accuracy = initial.accuracy;
    let mut best_step = 0;
    let mut curve = Vec::with_capacity(tc.steps / tc.eval_every);
    let mut sampler = Sampler::new(train.len(), derive_seed(spec.seed, SHUFFLE_STREAM));
    let mut window = 0.0;
    let mut window_len = 0usize;
    let start = Instant::now();
    for step in 0..tc.steps {
        let examples: Vec<&Example> = sampler.next(batch_size).iter().map(|&i| &train[i]).collect();
        let loss = label_loss(backbone, &params, &examples)?;
        let value = loss.item()? as f64;
        if !value.is_finite() {
            return Err(DeptError::Training {
                step,
                reason: format!("loss is {value}"),
            });
        }
        loss.backward()?;
        let lrs = (rate_of(&opt, "prompt", step), rate_of(&opt, "low_rank", step));
        opt.step(step)?;
        window += value;
        window_len += 1;
        if (step + 1) % tc.eval_every == 0 {
            let metric = evaluate(backbone, &params, eval, &spec.candidates, tc.eval_batch_size)?;
            let p = point(step + 1, Some(window / window_len as f64), metric, lrs);
            window = 0.0;
            window_len = 0;
            if p.accuracy > best_accuracy {
                best_accuracy = p.accuracy;
                best_step = p.step;
                best = params.deep_clone();
            }
            curve.push(p);
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let (final_accuracy, final_loss) = match curve.last() {
        Some(p) => (p.accuracy, p.loss),
        None => {
            let m = evaluate(backbone, &params, eval, &spec.candidates, tc.eval_batch_size)?;
            (m.accuracy, m.loss)
        }
    };
    let report = RunReport {
        variant: params.tag(),
        m: params.prompt_len(),
        r: params.rank(),
        budget_len: spec.budget_len,
        trainable_params: params.trainable_params(),
        seed: spec.seed,
        steps: tc.steps,
        eval_every: tc.eval_every,
        initial,
        curve,
        final_accuracy,
        final_loss,
        best_accuracy,
        best_step,
        peak_activation_elems,
        timing: Timing {
            seconds,
            ms_per_step: 1e3 * seconds / tc.steps as f64,
        },
        config: Value::Null,
    };
    Ok(TrainOutcome {
        report,
        best,
        last: params,
    })
}
