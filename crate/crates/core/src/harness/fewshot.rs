use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, TrainConfig};
use crate::error::{DeptError, Result};
use crate::peft::PeftVariant;
use crate::rng::derive_seed;
use crate::tasks::{few_shot_sample, gen_task, Example};

use super::{new_adapter, task_data, train_peft, train_spec, RunReport, TrainOutcome};

const SOURCE_STREAM: u64 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    Random,
    Transfer,
}

impl InitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitKind::Random => "random",
            InitKind::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub k: usize,
    pub seed: u64,
    pub init: InitKind,
    /// Accuracy of the best checkpoint on the target evaluation set.
    pub accuracy: f64,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSummary {
    pub k: usize,
    pub init: InitKind,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub rows: Vec<FewShotRow>,
    pub summary: Vec<FewShotSummary>,
    pub runs: Vec<RunReport>,
}

impl FewShotReport {
    pub fn summary_of(&self, k: usize, init: InitKind) -> Option<&FewShotSummary> {
        self.summary.iter().find(|s| s.k == k && s.init == init)
    }

    /// `k | random mean ± std | transfer mean ± std` table.
    pub fn table(&self) -> String {
        let mut ks: Vec<usize> = self.summary.iter().map(|s| s.k).collect();
        ks.dedup();
        let mut out = String::from("k\trandom\ttransfer\n");
        for k in ks {
            let cell = |init| {
                self.summary_of(k, init)
                    .map_or("-".to_string(), |s| format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.std))
            };
            out.push_str(&format!("{k}\t{}\t{}\n", cell(InitKind::Random), cell(InitKind::Transfer)));
        }
        out
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Target pool to sample shots from, and the target evaluation set.
pub fn fewshot_data(cfg: &ExperimentConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    let f = &cfg.fewshot;
    let largest = f.k_values.iter().copied().max().unwrap_or(0);
    if f.n_pool < largest {
        return Err(DeptError::Config(format!(
            "fewshot.n_pool {} is smaller than the largest k {largest}",
            f.n_pool
        )));
    }
    gen_task(&cfg.fewshot_task(), f.n_pool, f.n_eval)
}

/// Adapter trained on the full source task, for use as a transfer source.
pub fn train_source(backbone: &Backbone, cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let (train, eval) = task_data(cfg)?;
    let seed = derive_seed(cfg.seed, SOURCE_STREAM);
    let shape = cfg.peft.resolve(backbone.config())?;
    let params = new_adapter(backbone, &shape, &cfg.peft.init, seed)?;
    train_peft(backbone, PeftVariant::new(params, cfg.optim.rates())?, &train, &eval, &train_spec(cfg, seed))
}

/// For each `k` and seed, train on `k` sampled target examples from a fresh
/// adapter and from the source checkpoint, and summarise each cell.
pub fn few_shot(
    backbone: &Backbone,
    cfg: &ExperimentConfig,
    source: &Checkpoint,
    target_train: &[Example],
    target_eval: &[Example],
) -> Result<FewShotReport> {
    let f = &cfg.fewshot;
    let shape = cfg.peft.resolve(backbone.config())?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &k in &f.k_values {
        for &seed in &f.seeds {
            let shots = few_shot_sample(target_train, k, seed)?;
            for init in [InitKind::Random, InitKind::Transfer] {
                let fresh = PeftVariant::new(new_adapter(backbone, &shape, &cfg.peft.init, seed)?, cfg.optim.rates())?;
                let variant = match init {
                    InitKind::Random => fresh,
                    InitKind::Transfer => fresh.transfer_init(source)?,
                };
                let mut spec = train_spec(cfg, seed);
                spec.train = TrainConfig {
                    steps: f.steps,
                    eval_every: f.eval_every,
                    ..spec.train
                };
                let out = train_peft(backbone, variant, &shots, target_eval, &spec)?;
                rows.push(FewShotRow {
                    k,
                    seed,
                    init,
                    accuracy: out.report.best_accuracy,
                    final_accuracy: out.report.final_accuracy,
                });
                runs.push(out.report);
            }
        }
    }
    let mut summary = Vec::new();
    for &k in &f.k_values {
        for init in [InitKind::Random, InitKind::Transfer] {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| r.k == k && r.init == init)
                .map(|r| r.accuracy)
                .collect();
            let (mean, std) = mean_std(&accs);
            summary.push(FewShotSummary {
                k,
                init,
                mean,
                std,
                runs: accs.len(),
            });
        }
    }
    Ok(FewShotReport { rows, summary, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
