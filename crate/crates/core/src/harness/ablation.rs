use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::ExperimentConfig;
use crate::error::{DeptError, Result};
use crate::peft::{LearningRates, PeftVariant, VariantTag};
use crate::tasks::Example;

use super::{median, new_adapter, train_peft, train_spec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationSetting {
    /// One large rate for prompt and low-rank pair alike.
    SingleHigh,
    /// One small rate for prompt and low-rank pair alike.
    SingleLow,
    /// Large rate for the prompt, small rate for the low-rank pair.
    Mixed,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 3] = [Self::SingleHigh, Self::SingleLow, Self::Mixed];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SingleHigh => "single-high",
            Self::SingleLow => "single-low",
            Self::Mixed => "mixed",
        }
    }
}

/// Published average scores of the three settings on the full benchmark.
pub const PUBLISHED_SCORES: [(AblationSetting, f64); 3] = [
    (AblationSetting::SingleHigh, 40.8),
    (AblationSetting::SingleLow, 54.7),
    (AblationSetting::Mixed, 85.7),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub seed: u64,
    pub lr_prompt: f64,
    pub lr_lowrank: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Settings in the order single-high, single-low, mixed; seeds inner.
    pub rows: Vec<AblationRow>,
    /// Median final accuracy per setting, same order.
    pub medians: Vec<(AblationSetting, f64)>,
    pub published: Vec<(AblationSetting, f64)>,
    pub mixed_is_best: bool,
}

impl AblationReport {
    pub fn median_of(&self, setting: AblationSetting) -> f64 {
        self.medians
            .iter()
            .find(|(s, _)| *s == setting)
            .map_or(f64::NAN, |(_, v)| *v)
    }
}

/// Train the decomposed adapter under each rate setting for every seed.
pub fn lr_ablation(
    backbone: &Backbone,
    cfg: &ExperimentConfig,
    train: &[Example],
    eval: &[Example],
) -> Result<AblationReport> {
    let shape = cfg.peft.resolve(backbone.config())?;
    if shape.variant != VariantTag::Dept || shape.m == 0 || shape.r == 0 {
        return Err(DeptError::Config(
            "the rate ablation needs a decomposed adapter with m > 0 and r > 0".into(),
        ));
    }
    let a = &cfg.ablation;
    let mut rows = Vec::new();
    for setting in AblationSetting::ALL {
        let rates = match setting {
            AblationSetting::SingleHigh => LearningRates {
                prompt: a.high,
                low_rank: a.high,
            },
            AblationSetting::SingleLow => LearningRates {
                prompt: a.low,
                low_rank: a.low,
            },
            AblationSetting::Mixed => cfg.optim.rates(),
        };
        for &seed in &a.seeds {
            let params = new_adapter(backbone, &shape, &cfg.peft.init, seed)?;
            let spec = train_spec(cfg, seed);
            let out = train_peft(backbone, PeftVariant::new(params, rates)?, train, eval, &spec)?;
            rows.push(AblationRow {
                setting,
                seed,
                lr_prompt: rates.prompt,
                lr_lowrank: rates.low_rank,
                final_accuracy: out.report.final_accuracy,
                best_accuracy: out.report.best_accuracy,
            });
        }
    }
    let medians: Vec<(AblationSetting, f64)> = AblationSetting::ALL
        .iter()
        .map(|&s| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.setting == s).map(|r| r.final_accuracy).collect();
            (s, median(&accs))
        })
        .collect();
    let mixed = medians[2].1;
    Ok(AblationReport {
        rows,
        mixed_is_best: mixed >= medians[0].1 && mixed >= medians[1].1,
        medians,
        published: PUBLISHED_SCORES.to_vec(),
    })
}
