//! Synthetic classification and recall tasks over a small reserved vocabulary.
//!
//! Token layout:
//!
//! | ids                | use                                   |
//! |--------------------|---------------------------------------|
//! | 0                  | padding                               |
//! | 1                  | filler (shifts text during pretraining) |
//! | 2                  | recall marker                         |
//! | 3 ..= 10           | instruction tokens, one per rule      |
//! | 11 ..= 26          | class tokens                          |
//! | 27 ..              | content tokens                        |

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PAD_ID;
use crate::error::{DeptError, Result};
use crate::rng::derive_seed;

pub const FILLER_ID: usize = 1;
pub const MARKER_ID: usize = 2;
pub const FIRST_INSTRUCTION_ID: usize = 3;
pub const NUM_INSTRUCTIONS: usize = 8;
pub const FIRST_CLASS_ID: usize = FIRST_INSTRUCTION_ID + NUM_INSTRUCTIONS;
pub const MAX_CLASSES: usize = 16;
pub const FIRST_CONTENT_ID: usize = FIRST_CLASS_ID + MAX_CLASSES;

pub fn instruction_token(rule: usize) -> usize {
    FIRST_INSTRUCTION_ID + rule
}

pub fn class_token(class: usize) -> usize {
    FIRST_CLASS_ID + class
}

pub fn content_tokens(vocab_size: usize) -> Range<usize> {
    FIRST_CONTENT_ID..vocab_size.max(FIRST_CONTENT_ID)
}

/// One labelled sequence. The label is a single next-token target read at the
/// last position of `tokens`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl Example {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(DeptError::Degenerate("example with no tokens".into()));
        }
        if self.label == PAD_ID {
            return Err(DeptError::Contract("label must not be the pad id".into()));
        }
        if let Some(&bad) = self
            .tokens
            .iter()
            .chain(std::iter::once(&self.label))
            .find(|&&t| t >= vocab_size)
        {
            return Err(DeptError::Index {
                index: bad,
                bound: vocab_size,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Label is the class of the content token `key_offset` places before the
    /// end, under a hidden partition of the content vocabulary.
    KeyedClassification,
    /// A marker is placed somewhere in the text; the label is the token right
    /// after it.
    CopyRecall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub generator: Generator,
    pub vocab_size: usize,
    /// Text length range, inclusive, excluding any instruction token.
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    /// Seeds the hidden class partition.
    pub rule_seed: u64,
    /// Seeds sampling of the examples themselves.
    pub seed: u64,
    /// Instruction token index prepended to every example, if any.
    #[serde(default)]
    pub instruction: Option<usize>,
    #[serde(default)]
    pub key_offset: usize,
}

impl TaskSpec {
    pub fn keyed(vocab_size: usize, num_classes: usize, rule_seed: u64, seed: u64) -> Self {
        TaskSpec {
            generator: Generator::KeyedClassification,
            vocab_size,
            min_len: 4,
            max_len: 12,
            num_classes,
            rule_seed,
            seed,
            instruction: None,
            key_offset: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let content = content_tokens(self.vocab_size).len();
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DeptError::Config(format!(
                "task length range {}..={} is empty",
                self.min_len, self.max_len
            )));
        }
        if let Some(i) = self.instruction {
            if i >= NUM_INSTRUCTIONS {
                return Err(DeptError::Config(format!(
                    "instruction index {i} exceeds the {NUM_INSTRUCTIONS} reserved tokens"
                )));
            }
        }
        match self.generator {
            Generator::KeyedClassification => {
                if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
                    return Err(DeptError::Config(format!(
                        "num_classes must be in 2..={MAX_CLASSES}, got {}",
                        self.num_classes
                    )));
                }
                if content < self.num_classes {
                    return Err(DeptError::Config(format!(
                        "vocab_size {} leaves {content} content tokens, fewer than {} classes",
                        self.vocab_size, self.num_classes
                    )));
                }
                if self.key_offset >= self.min_len {
                    return Err(DeptError::Config(format!(
                        "key_offset {} does not fit texts of length {}",
                        self.key_offset, self.min_len
                    )));
                }
            }
            Generator::CopyRecall => {
                if self.min_len < 2 {
                    return Err(DeptError::Config("copy-recall needs texts of length >= 2".into()));
                }
                if content < 2 {
                    return Err(DeptError::Config(format!(
                        "vocab_size {} leaves too few content tokens",
                        self.vocab_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Label token ids this task can emit, in class order. Empty for
    /// copy-recall, whose labels are content tokens.
    pub fn label_tokens(&self) -> Vec<usize> {
        match self.generator {
            Generator::KeyedClassification => (0..self.num_classes).map(class_token).collect(),
            Generator::CopyRecall => Vec::new(),
        }
    }

    /// Longest token sequence this task produces.
    pub fn max_tokens(&self) -> usize {
        self.max_len + usize::from(self.instruction.is_some())
    }

    fn partition(&self) -> Vec<usize> {
        let range = content_tokens(self.vocab_size);
        let mut order: Vec<usize> = range.clone().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.rule_seed));
        let mut classes = vec![0; range.len()];
        for (i, tok) in order.into_iter().enumerate() {
            classes[tok - range.start] = i % self.num_classes;
        }
        classes
    }

    pub fn rule(&self) -> Result<KeyedRule> {
        self.validate()?;
        Ok(KeyedRule {
            classes: self.partition(),
            key_offset: self.key_offset,
        })
    }

    fn draw<R: Rng>(&self, rng: &mut R, rule: Option<&KeyedRule>) -> Example {
        let content = content_tokens(self.vocab_size);
        let len = rng.random_range(self.min_len..=self.max_len);
        let mut text: Vec<usize> = (0..len).map(|_| rng.random_range(content.clone())).collect();
        let label = match (self.generator, rule) {
            (Generator::KeyedClassification, Some(rule)) => class_token(rule.classify(&text)),
            _ => {
                let at = rng.random_range(0..len - 1);
                text[at] = MARKER_ID;
                text[at + 1]
            }
        };
        let mut tokens = Vec::with_capacity(len + 1);
        if let Some(i) = self.instruction {
            tokens.push(instruction_token(i));
        }
        tokens.extend(text);
        Example { tokens, label }
    }
}

/// Hidden balanced partition of the content vocabulary into classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyedRule {
    classes: Vec<usize>,
    key_offset: usize,
}

impl KeyedRule {
    pub fn class_of(&self, token: usize) -> Option<usize> {
        token
            .checked_sub(FIRST_CONTENT_ID)
            .and_then(|i| self.classes.get(i).copied())
    }

    /// Class of the key token in a text without instruction prefix.
    pub fn classify(&self, text: &[usize]) -> usize {
        let key = text[text.len() - 1 - self.key_offset];
        self.class_of(key).expect("key is a content token")
    }
}

/// Draw `n_train + n_eval` distinct examples; the first `n_train` form the
/// training set.
pub fn gen_task(spec: &TaskSpec, n_train: usize, n_eval: usize) -> Result<(Vec<Example>, Vec<Example>)> {
    spec.validate()?;
    let rule = match spec.generator {
        Generator::KeyedClassification => Some(spec.rule()?),
        Generator::CopyRecall => None,
    };
    let total = n_train + n_eval;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(total);
    let mut out = Vec::with_capacity(total);
    let max_attempts = 100 * total.max(1);
    let mut attempts = 0;
    while out.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(DeptError::Config(format!(
                "could not draw {total} distinct examples; widen the length range or vocabulary"
            )));
        }
        let ex = spec.draw(&mut rng, rule.as_ref());
        if seen.insert(ex.tokens.clone()) {
            out.push(ex);
        }
    }
    let eval = out.split_off(n_train);
    Ok((out, eval))
}

/// Uniform sample of `k` training examples without replacement.
pub fn few_shot_sample(train: &[Example], k: usize, seed: u64) -> Result<Vec<Example>> {
    if k > train.len() {
        return Err(DeptError::Sample { k, n: train.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, train.len(), k)
        .into_iter()
        .map(|i| train[i].clone())
        .collect())
}

/// Mixture used to pretrain the backbone: instructed keyed-classification
/// rules plus copy-recall, each shifted right by a random run of filler
/// tokens so that later prompts of any length up to `max_prefix` look
/// familiar.
#[derive(Debug, Clone)]
pub struct SourceMixture {
    pub rules: Vec<TaskSpec>,
    pub recall: TaskSpec,
    /// Probability of drawing a copy-recall example.
    pub recall_weight: f64,
    /// Prefix length (fillers plus instruction) is at most `max_prefix`;
    /// instructed examples always carry a prefix.
    pub max_prefix: usize,
    compiled: Vec<KeyedRule>,
}

impl SourceMixture {
    pub fn new(rules: Vec<TaskSpec>, recall: TaskSpec, recall_weight: f64, max_prefix: usize) -> Result<Self> {
        if rules.is_empty() || !(0.0..1.0).contains(&recall_weight) {
            return Err(DeptError::Config(
                "source mixture needs at least one rule and recall_weight in [0, 1)".into(),
            ));
        }
        let compiled = rules
            .iter()
            .map(|r| {
                if r.instruction.is_none() || r.generator != Generator::KeyedClassification {
                    return Err(DeptError::Config(
                        "source rules must be instructed keyed-classification tasks".into(),
                    ));
                }
                r.rule()
            })
            .collect::<Result<Vec<_>>>()?;
        recall.validate()?;
        if max_prefix == 0 {
            return Err(DeptError::Config("max_prefix must be >= 1".into()));
        }
        Ok(SourceMixture {
            rules,
            recall,
            recall_weight,
            max_prefix,
            compiled,
        })
    }

    /// Longest sequence the mixture can produce.
    pub fn max_tokens(&self) -> usize {
        let text = self.rules.iter().map(|r| r.max_len).chain([self.recall.max_len]).max().unwrap_or(0);
        self.max_prefix + text
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Example {
        let (text, instruction, prefix) = if rng.random_bool(self.recall_weight) {
            let prefix = rng.random_range(0..=self.max_prefix);
            (self.recall.draw(rng, None), None, prefix)
        } else {
            let prefix = rng.random_range(1..=self.max_prefix);
            let i = rng.random_range(0..self.rules.len());
            let spec = &self.rules[i];
            let mut ex = spec.draw(rng, Some(&self.compiled[i]));
            ex.tokens.remove(0);
            (ex, spec.instruction, prefix)
        };
        let mut tokens = vec![FILLER_ID; prefix];
        if let Some(i) = instruction {
            let at = rng.random_range(0..prefix);
            tokens[at] = instruction_token(i);
        }
        tokens.extend(text.tokens);
        Example {
            tokens,
            label: text.label,
        }
    }

    pub fn batch(&self, seed: u64, step: usize, size: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step as u64));
        (0..size).map(|_| self.draw(&mut rng)).collect()
    }
}

pub fn save_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a line-delimited dataset. Blank lines are skipped.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| DeptError::Config(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| {
            DeptError::Config(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        if ex.tokens.is_empty() || ex.label == PAD_ID {
            return Err(DeptError::Config(format!(
                "{}:{}: empty tokens or pad label",
                path.display(),
                i + 1
            )));
        }
        out.push(ex);
    }
    Ok(out)
}
