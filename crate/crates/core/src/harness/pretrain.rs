use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::ExperimentConfig;
use crate::error::{DeptError, Result};
use crate::optim::{AdamW, ParamGroup};
use crate::rng::derive_seed;
use crate::tasks::{Example, SourceMixture, FIRST_CONTENT_ID};
use crate::tensor::Tensor;

use super::{argmax_among, token_batch};

const INIT_STREAM: u64 = 20;
const DATA_STREAM: u64 = 21;
const PROBE_STREAM: u64 = 22;
const PROBE_EXAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// `(step, mean training loss since the previous entry)`.
    pub curve: Vec<(usize, f64)>,
    /// Loss and accuracy on a fixed held-out probe batch.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// Probe accuracy on instructed classification examples only.
    pub rule_accuracy: f64,
    /// Probe accuracy on copy-recall examples only.
    pub recall_accuracy: f64,
    pub seconds: f64,
}

fn label_logits_full(backbone: &Backbone, examples: &[&Example]) -> Result<(Tensor, Vec<usize>)> {
    let (batch, targets) = token_batch(examples)?;
    let embeds = backbone.embed_unchecked(&batch)?;
    let hidden = backbone.forward_hidden(&embeds, Some(&batch.key_mask()))?;
    let n = batch.seq_len;
    let rows: Vec<usize> = batch.lengths.iter().enumerate().map(|(b, &len)| b * n + len - 1).collect();
    let picked = hidden
        .reshape(&[batch.batch * n, backbone.config().d_model])?
        .index_rows(&rows)?;
    Ok((backbone.logits(&picked)?, targets))
}

struct Probe {
    loss: f64,
    accuracy: f64,
    rule_accuracy: f64,
    recall_accuracy: f64,
}

fn probe(backbone: &Backbone, examples: &[Example]) -> Result<Probe> {
    let mut loss = 0.0;
    // (correct, total) for classification and recall examples
    let mut rule = (0usize, 0usize);
    let mut recall = (0usize, 0usize);
    for chunk in examples.chunks(64) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (logits, targets) = label_logits_full(backbone, &refs)?;
        let ce = Tensor::cross_entropy(&logits, &targets, &vec![true; targets.len()])?;
        loss += ce.item()? as f64 * chunk.len() as f64;
        let v = logits.shape()[1];
        let values = logits.values();
        for (b, &t) in targets.iter().enumerate() {
            let hit = usize::from(argmax_among(&values[b * v..(b + 1) * v], &[]) == t);
            let slot = if t >= FIRST_CONTENT_ID { &mut recall } else { &mut rule };
            slot.0 += hit;
            slot.1 += 1;
        }
    }
    let frac = |(c, n): (usize, usize)| if n == 0 { f64::NAN } else { c as f64 / n as f64 };
    Ok(Probe {
        loss: loss / examples.len() as f64,
        accuracy: frac((rule.0 + recall.0, rule.1 + recall.1)),
        rule_accuracy: frac(rule),
        recall_accuracy: frac(recall),
    })
}

/// Train every backbone weight on the source mixture, then freeze.
pub fn pretrain_backbone(cfg: &ExperimentConfig) -> Result<(Backbone, PretrainReport)> {
    let p = &cfg.pretrain;
    if p.steps == 0 || p.batch_size == 0 {
        return Err(DeptError::Config("pretrain.steps and batch_size must be >= 1".into()));
    }
    let rules = (0..p.num_rules).map(|i| cfg.source_rule(i)).collect();
    let mixture = SourceMixture::new(rules, cfg.recall_task(), p.recall_weight, p.max_prefix)?;
    let mut backbone = Backbone::init(cfg.backbone, derive_seed(cfg.seed, INIT_STREAM))?;
    backbone.unfreeze();
    let probe_set = mixture.batch(derive_seed(cfg.seed, PROBE_STREAM), 0, PROBE_EXAMPLES);
    let initial_loss = probe(&backbone, &probe_set)?.loss;

    let mut opt = AdamW::new(
        p.optimizer(),
        vec![ParamGroup::new("backbone", backbone.parameters(), p.lr)],
    )?;
    let data_seed = derive_seed(cfg.seed, DATA_STREAM);
    let log_every = p.log_every.max(1);
    let mut curve = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0;
    let start = Instant::now();
    for step in 0..p.steps {
        let examples = mixture.batch(data_seed, step, p.batch_size);
        let refs: Vec<&Example> = examples.iter().collect();
        let (logits, targets) = label_logits_full(&backbone, &refs)?;
        let loss = Tensor::cross_entropy(&logits, &targets, &vec![true; targets.len()])?;
        let value = loss.item()? as f64;
        if !value.is_finite() {
            return Err(DeptError::Training {
                step,
                reason: format!("loss is {value}"),
            });
        }
        loss.backward()?;
        opt.step(step)?;
        window += value;
        window_len += 1;
        if (step + 1) % log_every == 0 || step + 1 == p.steps {
            curve.push((step + 1, window / window_len as f64));
            window = 0.0;
            window_len = 0;
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    backbone.freeze();
    let last = probe(&backbone, &probe_set)?;
    Ok((
        backbone,
        PretrainReport {
            steps: p.steps,
            curve,
            initial_loss,
            final_loss: last.loss,
            final_accuracy: last.accuracy,
            rule_accuracy: last.rule_accuracy,
            recall_accuracy: last.recall_accuracy,
            seconds,
        },
    ))
}
