//! Pretraining, adapter training, evaluation, and the comparative studies
//! built from them.

mod ablation;
mod fewshot;
mod pretrain;
mod train;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, TokenBatch};
use crate::config::{AdapterShape, ExperimentConfig};
use crate::error::{DeptError, Result};
use crate::peft::{DeptParams, InitOptions, PeftParams, PromptParams, VariantTag};
use crate::tasks::{gen_task, load_jsonl, Example};
use crate::tensor::{Scalar, Tensor};

pub use ablation::{lr_ablation, AblationReport, AblationRow, AblationSetting, PUBLISHED_SCORES};
pub use fewshot::{few_shot, fewshot_data, mean_std, train_source, FewShotReport, FewShotRow, FewShotSummary, InitKind};
pub use pretrain::{pretrain_backbone, PretrainReport};
pub use train::{train_peft, EvalPoint, RunReport, Timing, TrainOutcome, TrainSpec};

/// Fresh adapter of the given shape.
pub fn new_adapter(backbone: &Backbone, shape: &AdapterShape, init: &InitOptions, seed: u64) -> Result<PeftParams> {
    Ok(match shape.variant {
        VariantTag::VanillaPt => PeftParams::Vanilla(PromptParams::init(backbone, shape.m, init, seed)?),
        VariantTag::Dept => PeftParams::Dept(DeptParams::init(backbone, shape.m, shape.r, init, seed)?),
    })
}

/// Training settings of `cfg` for a run seeded with `seed`.
pub fn train_spec(cfg: &ExperimentConfig, seed: u64) -> TrainSpec {
    TrainSpec {
        train: cfg.train.clone(),
        optim: cfg.optim.optimizer(cfg.train.steps),
        seed,
        candidates: cfg.target_task().label_tokens(),
        budget_len: cfg.peft.budget_len,
    }
}

/// Backbone from `backbone_checkpoint`, or pretrained from scratch.
pub fn load_or_pretrain(cfg: &ExperimentConfig) -> Result<(Backbone, Option<PretrainReport>)> {
    match &cfg.backbone_checkpoint {
        Some(path) => {
            let mut backbone = Backbone::load(path)?;
            if *backbone.config() != cfg.backbone {
                return Err(DeptError::Config(format!(
                    "checkpoint {} does not match the backbone section",
                    path.display()
                )));
            }
            backbone.freeze();
            Ok((backbone, None))
        }
        None => {
            let (backbone, report) = pretrain_backbone(cfg)?;
            Ok((backbone, Some(report)))
        }
    }
}

/// Target train and evaluation sets: loaded when both paths are given,
/// generated otherwise.
pub fn task_data(cfg: &ExperimentConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    match (&cfg.task.train_path, &cfg.task.eval_path) {
        (Some(train), Some(eval)) => Ok((load_jsonl(train)?, load_jsonl(eval)?)),
        (None, None) => gen_task(&cfg.target_task(), cfg.task.n_train, cfg.task.n_eval),
        _ => Err(DeptError::Config(
            "task.train_path and task.eval_path must be given together".into(),
        )),
    }
}

pub(crate) fn token_batch(examples: &[&Example]) -> Result<(TokenBatch, Vec<usize>)> {
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let batch = TokenBatch::new(&seqs)?;
    Ok((batch, examples.iter().map(|e| e.label).collect()))
}

/// Logits `[B, V]` read at the last text token of each example.
pub fn label_logits<T: Scalar>(
    backbone: &Backbone<T>,
    peft: &PeftParams<T>,
    batch: &TokenBatch,
) -> Result<Tensor<T>> {
    let composed = peft.compose(backbone, batch)?;
    let hidden = backbone.forward_hidden(&composed.embeds, Some(&composed.key_mask))?;
    let rows = composed.batch() * composed.composed_len();
    let picked = hidden
        .reshape(&[rows, backbone.config().d_model])?
        .index_rows(&composed.last_token_rows())?;
    backbone.logits(&picked)
}

/// Mean cross-entropy of the labels, read only at the label position.
pub fn label_loss<T: Scalar>(
    backbone: &Backbone<T>,
    peft: &PeftParams<T>,
    examples: &[&Example],
) -> Result<Tensor<T>> {
    let (batch, targets) = token_batch(examples)?;
    let logits = label_logits(backbone, peft, &batch)?;
    Tensor::cross_entropy(&logits, &targets, &vec![true; targets.len()])
}

/// Index of the largest entry among `candidates` (all entries when empty);
/// ties go to the earliest.
pub(crate) fn argmax_among<T: Scalar>(row: &[T], candidates: &[usize]) -> usize {
    let mut best: Option<(usize, T)> = None;
    let mut consider = |i: usize| {
        if best.is_none_or(|(_, v)| row[i] > v) {
            best = Some((i, row[i]));
        }
    };
    if candidates.is_empty() {
        (0..row.len()).for_each(&mut consider);
    } else {
        candidates.iter().copied().for_each(&mut consider);
    }
    best.map(|(i, _)| i).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetric {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
}

/// Label-position accuracy and mean loss. Predictions are restricted to
/// `candidates` when it is non-empty, so a classifier is scored over its
/// class tokens only.
pub fn evaluate<T: Scalar>(
    backbone: &Backbone<T>,
    peft: &PeftParams<T>,
    eval: &[Example],
    candidates: &[usize],
    batch_size: usize,
) -> Result<EvalMetric> {
    if eval.is_empty() {
        return Err(DeptError::Degenerate("empty evaluation set".into()));
    }
    let frozen = peft.detached();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for chunk in eval.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (batch, targets) = token_batch(&refs)?;
        let logits = label_logits(backbone, &frozen, &batch)?;
        let loss = Tensor::cross_entropy(&logits, &targets, &vec![true; targets.len()])?;
        loss_sum += loss.item()?.as_f64() * chunk.len() as f64;
        let vocab = logits.shape()[1];
        let values = logits.values();
        for (b, &t) in targets.iter().enumerate() {
            if argmax_among(&values[b * vocab..(b + 1) * vocab], candidates) == t {
                correct += 1;
            }
        }
    }
    Ok(EvalMetric {
        accuracy: correct as f64 / eval.len() as f64,
        loss: loss_sum / eval.len() as f64,
        count: eval.len(),
    })
}

/// Reject examples the backbone cannot take before any training starts.
pub(crate) fn check_examples(backbone_vocab: usize, max_seq_len: usize, sets: &[&[Example]]) -> Result<()> {
    for set in sets {
        for ex in set.iter() {
            ex.validate(backbone_vocab)
                .map_err(|e| DeptError::Config(format!("dataset does not fit the backbone: {e}")))?;
            if ex.tokens.len() > max_seq_len {
                return Err(DeptError::Config(format!(
                    "example of length {} exceeds max_seq_len {max_seq_len}",
                    ex.tokens.len()
                )));
            }
        }
    }
    Ok(())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
