//! Experiment configuration: one JSON document with a section per stage.
//!
//! Every field has a default, so `{}` is a valid configuration. Fields can be
//! overridden by dotted path (`optim.alpha1=0.4`) before deserialisation.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::error::{DeptError, Result};
use crate::optim::{OptimizerConfig, Schedule};
use crate::peft::{solve_budget, InitOptions, LearningRates, VariantTag};
use crate::rng::derive_seed;
use crate::tasks::{Generator, TaskSpec, FIRST_CONTENT_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    /// Pretrained backbone to load instead of pretraining one.
    pub backbone_checkpoint: Option<PathBuf>,
    pub pretrain: PretrainConfig,
    pub task: TaskConfig,
    pub peft: PeftConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub fewshot: FewShotConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            backbone: BackboneConfig {
                vocab_size: 128,
                ..BackboneConfig::default()
            },
            backbone_checkpoint: None,
            pretrain: PretrainConfig::default(),
            task: TaskConfig::default(),
            peft: PeftConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            fewshot: FewShotConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Full-model training of the backbone on the source mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_proportion: f64,
    /// Instructed keyed-classification rules in the mixture.
    pub num_rules: usize,
    pub num_classes: usize,
    /// Base seed of the hidden class partitions.
    pub rule_seed: u64,
    pub recall_weight: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Longest filler-plus-instruction prefix; prompts up to this length
    /// resemble pretraining inputs.
    pub max_prefix: usize,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 0.01,
            warmup_proportion: 0.06,
            num_rules: 3,
            num_classes: 4,
            rule_seed: 1000,
            recall_weight: 0.25,
            min_len: 4,
            max_len: 12,
            max_prefix: 24,
            log_every: 100,
        }
    }
}

impl PretrainConfig {
    pub fn rule_seed_of(&self, rule: usize) -> u64 {
        derive_seed(self.rule_seed, rule as u64)
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            weight_decay: self.weight_decay,
            warmup_proportion: self.warmup_proportion,
            total_steps: self.steps,
            ..OptimizerConfig::default()
        }
    }
}

/// Target task: one of the pretrained rules, shown without its instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub rule: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub key_offset: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Seeds example sampling, independent of the rule.
    pub data_seed: u64,
    /// Line-delimited datasets to use instead of generated ones.
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            rule: 0,
            min_len: 4,
            max_len: 12,
            key_offset: 0,
            n_train: 2000,
            n_eval: 500,
            data_seed: 7,
            train_path: None,
            eval_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PeftConfig {
    pub variant: VariantTag,
    /// Vanilla prompt length `l`, which also fixes the parameter budget.
    pub budget_len: usize,
    /// Prompt length `m` of the decomposed variant.
    pub m: usize,
    /// Rank of the decomposed variant; solved from the budget when absent.
    pub r: Option<usize>,
    pub init: InitOptions,
    /// Adapter checkpoint: transfer initialisation when training, the
    /// adapter to score when evaluating.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            variant: VariantTag::Dept,
            budget_len: 20,
            m: 10,
            r: None,
            init: InitOptions::default(),
            checkpoint: None,
        }
    }
}

/// Resolved adapter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterShape {
    pub variant: VariantTag,
    pub m: usize,
    pub r: usize,
    pub budget_len: usize,
    /// Unused budget when the rank is solved; `None` for explicit ranks.
    pub slack: Option<usize>,
}

impl PeftConfig {
    pub fn resolve(&self, backbone: &BackboneConfig) -> Result<AdapterShape> {
        match self.variant {
            VariantTag::VanillaPt => Ok(AdapterShape {
                variant: self.variant,
                m: self.budget_len,
                r: 0,
                budget_len: self.budget_len,
                slack: None,
            }),
            VariantTag::Dept => match self.r {
                Some(r) => Ok(AdapterShape {
                    variant: self.variant,
                    m: self.m,
                    r,
                    budget_len: self.budget_len,
                    slack: None,
                }),
                None => {
                    let sol = solve_budget(self.budget_len, backbone.d_model, backbone.max_seq_len, self.m)?;
                    Ok(AdapterShape {
                        variant: self.variant,
                        m: sol.m,
                        r: sol.r,
                        budget_len: self.budget_len,
                        slack: Some(sol.slack),
                    })
                }
            },
        }
    }
}

/// Optimiser settings for adapter training. `alpha1` drives the prompt,
/// `alpha2` the low-rank pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_proportion: f64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let base = OptimizerConfig::default();
        OptimConfig {
            alpha1: 3e-1,
            alpha2: 5e-4,
            beta1: base.beta1,
            beta2: base.beta2,
            eps: base.eps,
            weight_decay: base.weight_decay,
            warmup_proportion: base.warmup_proportion,
            schedule: base.schedule,
        }
    }
}

impl OptimConfig {
    pub fn rates(&self) -> LearningRates {
        LearningRates {
            prompt: self.alpha1,
            low_rank: self.alpha2,
        }
    }

    pub fn optimizer(&self, total_steps: usize) -> OptimizerConfig {
        OptimizerConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            warmup_proportion: self.warmup_proportion,
            schedule: self.schedule,
            total_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 500,
            eval_every: 100,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 || self.eval_every == 0 || self.eval_batch_size == 0 {
            return Err(DeptError::Config(
                "train batch_size, steps, eval_every and eval_batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub budget_len: usize,
    pub m_values: Vec<usize>,
    pub batch_size: usize,
    pub repeats: usize,
    /// Examples per timed pass.
    pub examples: usize,
    pub measure: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            budget_len: 100,
            m_values: vec![0, 20, 40, 60, 80, 100],
            batch_size: 16,
            repeats: 5,
            examples: 64,
            measure: true,
        }
    }
}

/// Few-shot transfer: the target shares the source rule but draws texts
/// from a different length range and data seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotConfig {
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub eval_every: usize,
    pub target_min_len: usize,
    pub target_max_len: usize,
    pub target_data_seed: u64,
    /// Target training pool the `k` shots are sampled from.
    pub n_pool: usize,
    pub n_eval: usize,
    /// Adapter checkpoint to initialise from; trained on the source task
    /// when absent.
    pub source_checkpoint: Option<PathBuf>,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            k_values: vec![4, 16, 32],
            seeds: vec![1, 2, 3],
            steps: 100,
            eval_every: 25,
            target_min_len: 8,
            target_max_len: 12,
            target_data_seed: 77,
            n_pool: 200,
            n_eval: 400,
            source_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Single rate applied to every adapter tensor in the "high" setting.
    pub high: f64,
    /// Single rate applied to every adapter tensor in the "low" setting.
    pub low: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![1, 2, 3],
            high: 3e-1,
            low: 5e-4,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        let p = &self.pretrain;
        if p.num_rules == 0 || p.num_rules > crate::tasks::NUM_INSTRUCTIONS {
            return Err(DeptError::Config(format!(
                "pretrain.num_rules must be in 1..={}",
                crate::tasks::NUM_INSTRUCTIONS
            )));
        }
        if self.task.rule >= p.num_rules {
            return Err(DeptError::Config(format!(
                "task.rule {} is not one of the {} pretrained rules",
                self.task.rule, p.num_rules
            )));
        }
        if p.max_len > self.backbone.max_seq_len || self.task.max_len > self.backbone.max_seq_len {
            return Err(DeptError::Config("task texts exceed backbone.max_seq_len".into()));
        }
        if p.max_prefix > self.backbone.max_prompt_len {
            return Err(DeptError::Config(
                "pretrain.max_prefix exceeds backbone.max_prompt_len".into(),
            ));
        }
        if self.backbone.vocab_size <= FIRST_CONTENT_ID {
            return Err(DeptError::Config(format!(
                "vocab_size must exceed {FIRST_CONTENT_ID} reserved ids"
            )));
        }
        if self.bench.m_values.iter().any(|&m| m > self.bench.budget_len) {
            return Err(DeptError::Config("bench.m_values must not exceed bench.budget_len".into()));
        }
        if self.bench.repeats < 3 {
            return Err(DeptError::Config("bench.repeats must be >= 3".into()));
        }
        self.peft.resolve(&self.backbone)?;
        self.source_rule(self.task.rule).validate()?;
        self.target_task().validate()?;
        Ok(())
    }

    /// Instructed pretraining rule `i`.
    pub fn source_rule(&self, i: usize) -> TaskSpec {
        let p = &self.pretrain;
        TaskSpec {
            generator: Generator::KeyedClassification,
            vocab_size: self.backbone.vocab_size,
            min_len: p.min_len,
            max_len: p.max_len,
            num_classes: p.num_classes,
            rule_seed: p.rule_seed_of(i),
            seed: derive_seed(self.seed, 10 + i as u64),
            instruction: Some(i),
            key_offset: 0,
        }
    }

    pub fn recall_task(&self) -> TaskSpec {
        TaskSpec {
            generator: Generator::CopyRecall,
            instruction: None,
            ..self.source_rule(0)
        }
    }

    /// The configured target: rule `task.rule` with no instruction token.
    pub fn target_task(&self) -> TaskSpec {
        let t = &self.task;
        TaskSpec {
            min_len: t.min_len,
            max_len: t.max_len,
            seed: t.data_seed,
            instruction: None,
            key_offset: t.key_offset,
            ..self.source_rule(t.rule)
        }
    }

    /// Related few-shot target: same rule, different length range and data.
    pub fn fewshot_task(&self) -> TaskSpec {
        let f = &self.fewshot;
        TaskSpec {
            min_len: f.target_min_len,
            max_len: f.target_max_len,
            seed: f.target_data_seed,
            ..self.target_task()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text)?)
    }

    /// Accepts either a bare configuration or a run manifest carrying one
    /// under `config`.
    pub fn from_value(value: Value) -> Result<Self> {
        let value = match value {
            Value::Object(mut map) if map.contains_key("config") && map.contains_key("version") => {
                map.remove("config").expect("checked")
            }
            other => other,
        };
        serde_json::from_value(value).map_err(|e| DeptError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Value> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| DeptError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| DeptError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// JSON Schema of the configuration document.
    pub fn schema() -> Value {
        serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serialises")
    }
}

/// Set `path` (dot-separated) in `root` to `raw`, parsed as JSON when
/// possible and as a string otherwise. The path must name an existing field
/// of `schema`, the fully-defaulted configuration.
pub fn apply_override(root: &mut Value, schema: &Value, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(DeptError::Config(format!("malformed override path `{path}`")));
    }
    let mut expected = schema;
    for k in &keys {
        expected = expected
            .as_object()
            .and_then(|o| o.get(*k))
            .ok_or_else(|| DeptError::Config(format!("unknown config field `{path}`")))?;
    }
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, k) in keys.iter().enumerate() {
        let map = match node {
            Value::Object(map) => map,
            _ => return Err(DeptError::Config(format!("`{}` is not a section", keys[..i].join(".")))),
        };
        if i + 1 == keys.len() {
            map.insert(k.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(k.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one key")
}

/// Parse `root` with `overrides` applied, validating the result.
pub fn resolve(root: Value, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut root = match root {
        Value::Object(mut map) if map.contains_key("config") && map.contains_key("version") => {
            map.remove("config").expect("checked")
        }
        other => other,
    };
    let schema = ExperimentConfig::default().to_value();
    for (path, raw) in overrides {
        apply_override(&mut root, &schema, path, raw)?;
    }
    let cfg = ExperimentConfig::from_value(root)?;
    cfg.validate()?;
    Ok(cfg)
}
