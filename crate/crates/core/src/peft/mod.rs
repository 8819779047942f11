//! Soft-prompt adapters over a frozen backbone.
//!
//! * Vanilla prompt tuning prepends a trainable `[l, d]` prompt to the word
//!   embeddings.
//! * Decomposed prompt tuning prepends a shorter `[m, d]` prompt and adds a
//!   position-indexed low-rank update `Δ = A·B` (`A: [s, r]`, `B: [r, d]`) to
//!   the word embeddings of the text. Row `i` of `Δ` is added at text
//!   position `i`; sequences shorter than `s` use the first rows only.

mod budget;
mod init;

use serde::{Deserialize, Serialize};

pub use budget::{solve_budget, BudgetSolution};
pub use init::{init_prompt, PromptInit, TOP_VOCAB_ROWS};

use crate::backbone::{Backbone, BackboneConfig, TokenBatch};
use crate::checkpoint::Checkpoint;
use crate::error::{DeptError, Result};
use crate::rng::{derive_seed, normal_vec};
use crate::tensor::{Scalar, Tensor};

pub const PROMPT_TENSOR: &str = "prompt";
pub const LOWRANK_A_TENSOR: &str = "lowrank_a";
pub const LOWRANK_B_TENSOR: &str = "lowrank_b";

const PROMPT_STREAM: u64 = 1;
const LOWRANK_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum VariantTag {
    VanillaPt,
    Dept,
}

impl VariantTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            VariantTag::VanillaPt => "vanilla-pt",
            VariantTag::Dept => "dept",
        }
    }
}

/// Initialisation settings shared by both variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct InitOptions {
    pub prompt_init: PromptInit,
    /// Standard deviation for gaussian prompt rows.
    pub prompt_sigma: f64,
    /// Standard deviation of the entries of `A`.
    pub lowrank_sigma: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            prompt_init: PromptInit::SampleVocabRows,
            prompt_sigma: 0.02,
            lowrank_sigma: 0.02,
        }
    }
}

#[derive(Clone)]
pub struct PromptParams<T: Scalar = f32> {
    pub prompt: Tensor<T>,
}

impl<T: Scalar> PromptParams<T> {
    pub fn init(backbone: &Backbone<T>, l: usize, opts: &InitOptions, seed: u64) -> Result<Self> {
        if l == 0 {
            return Err(DeptError::Config("vanilla prompt needs l >= 1".into()));
        }
        check_prompt_len(backbone.config(), l)?;
        let prompt = init_prompt(
            backbone.token_embedding(),
            l,
            opts.prompt_init,
            opts.prompt_sigma,
            derive_seed(seed, PROMPT_STREAM),
        )?;
        Ok(PromptParams { prompt })
    }

    pub fn len(&self) -> usize {
        self.prompt.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone)]
pub struct LowRank<T: Scalar = f32> {
    /// `[s, r]`
    pub a: Tensor<T>,
    /// `[r, d]`
    pub b: Tensor<T>,
}

impl<T: Scalar> LowRank<T> {
    /// `Δ = A·B`, shape `[s, d]`.
    pub fn delta(&self) -> Result<Tensor<T>> {
        self.a.matmul(&self.b)
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }
}

#[derive(Clone)]
pub struct DeptParams<T: Scalar = f32> {
    /// Shorter prompt, absent when `m = 0`.
    pub prompt: Option<Tensor<T>>,
    /// Low-rank embedding update, absent when `r = 0`.
    pub low_rank: Option<LowRank<T>>,
    pub max_seq_len: usize,
    pub d_model: usize,
}

impl<T: Scalar> DeptParams<T> {
    /// `A ~ N(0, lowrank_sigma²)`, `B = 0`, so `A·B` is exactly zero at
    /// initialisation. The prompt uses the same seed stream as a vanilla
    /// prompt, so `init(m, 0)` reproduces `PromptParams::init(m)`.
    pub fn init(backbone: &Backbone<T>, m: usize, r: usize, opts: &InitOptions, seed: u64) -> Result<Self> {
        let cfg = backbone.config();
        let (s, d) = (cfg.max_seq_len, cfg.d_model);
        if m == 0 && r == 0 {
            return Err(DeptError::Config("m and r cannot both be zero".into()));
        }
        if r > s.min(d) {
            return Err(DeptError::Rank { r, max: s.min(d) });
        }
        check_prompt_len(cfg, m)?;
        let prompt = if m > 0 {
            Some(init_prompt(
                backbone.token_embedding(),
                m,
                opts.prompt_init,
                opts.prompt_sigma,
                derive_seed(seed, PROMPT_STREAM),
            )?)
        } else {
            None
        };
        let low_rank = if r > 0 {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(
                seed,
                LOWRANK_STREAM,
            ));
            let a = normal_vec(&mut rng, s * r, opts.lowrank_sigma)
                .into_iter()
                .map(T::of)
                .collect();
            Some(LowRank {
                a: Tensor::param(a, &[s, r])?,
                b: Tensor::param(vec![T::zero(); r * d], &[r, d])?,
            })
        } else {
            None
        };
        Ok(DeptParams {
            prompt,
            low_rank,
            max_seq_len: s,
            d_model: d,
        })
    }

    pub fn m(&self) -> usize {
        self.prompt.as_ref().map_or(0, |p| p.shape()[0])
    }

    pub fn r(&self) -> usize {
        self.low_rank.as_ref().map_or(0, LowRank::rank)
    }
}

fn check_prompt_len(cfg: &BackboneConfig, len: usize) -> Result<()> {
    if len > cfg.max_prompt_len {
        return Err(DeptError::Config(format!(
            "prompt length {len} exceeds max_prompt_len {}",
            cfg.max_prompt_len
        )));
    }
    Ok(())
}

#[derive(Clone)]
pub enum PeftParams<T: Scalar = f32> {
    Vanilla(PromptParams<T>),
    Dept(DeptParams<T>),
}

/// Embeddings ready for the backbone, plus bookkeeping for the loss.
pub struct Composed<T: Scalar = f32> {
    /// `[B, prompt_len + n, d]`
    pub embeds: Tensor<T>,
    pub prompt_len: usize,
    /// Attention key mask over the composed sequence; prompt rows are always
    /// attendable.
    pub key_mask: Vec<bool>,
    /// Unpadded text length of each example.
    pub lengths: Vec<usize>,
}

impl<T: Scalar> Composed<T> {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn composed_len(&self) -> usize {
        self.embeds.shape()[1]
    }

    /// Row of the flattened `[B·n, …]` hidden states holding the last text
    /// token of each example, where the next-token prediction is read.
    pub fn last_token_rows(&self) -> Vec<usize> {
        let n = self.composed_len();
        self.lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| b * n + self.prompt_len + len - 1)
            .collect()
    }
}

fn compose_parts<T: Scalar>(
    backbone: &Backbone<T>,
    batch: &TokenBatch,
    prompt: Option<&Tensor<T>>,
    low_rank: Option<&LowRank<T>>,
) -> Result<Composed<T>> {
    let mut words = backbone.embed(batch)?;
    if let Some(lr) = low_rank {
        let s = lr.a.shape()[0];
        if batch.seq_len > s {
            return Err(DeptError::Length {
                len: batch.seq_len,
                max: s,
            });
        }
        let delta = lr.delta()?.slice_rows(0, batch.seq_len)?;
        words = words.add(&delta)?;
    }
    let (embeds, prompt_len) = match prompt {
        Some(p) => (Tensor::prepend_rows(p, &words)?, p.shape()[0]),
        None => (words, 0),
    };
    let text_mask = batch.key_mask();
    let n = batch.seq_len;
    let mut key_mask = Vec::with_capacity(batch.batch * (prompt_len + n));
    for b in 0..batch.batch {
        key_mask.extend(std::iter::repeat_n(true, prompt_len));
        key_mask.extend_from_slice(&text_mask[b * n..(b + 1) * n]);
    }
    Ok(Composed {
        embeds,
        prompt_len,
        key_mask,
        lengths: batch.lengths.clone(),
    })
}

impl<T: Scalar> PeftParams<T> {
    pub fn tag(&self) -> VariantTag {
        match self {
            PeftParams::Vanilla(_) => VariantTag::VanillaPt,
            PeftParams::Dept(_) => VariantTag::Dept,
        }
    }

    /// Prompt rows prepended to the text.
    pub fn prompt_len(&self) -> usize {
        match self {
            PeftParams::Vanilla(p) => p.len(),
            PeftParams::Dept(p) => p.m(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            PeftParams::Vanilla(_) => 0,
            PeftParams::Dept(p) => p.r(),
        }
    }

    /// `[P; W]` for vanilla prompts, `[P_s; W + Δ[..n]]` for the decomposed
    /// variant. Only adapter tensors can receive gradients.
    pub fn compose(&self, backbone: &Backbone<T>, batch: &TokenBatch) -> Result<Composed<T>> {
        match self {
            PeftParams::Vanilla(p) => compose_parts(backbone, batch, Some(&p.prompt), None),
            PeftParams::Dept(p) => compose_parts(backbone, batch, p.prompt.as_ref(), p.low_rank.as_ref()),
        }
    }

    /// Exact count: `l·d`, or `m·d + s·r + r·d`.
    pub fn trainable_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, Tensor<T>)> {
        match self {
            PeftParams::Vanilla(p) => vec![(PROMPT_TENSOR, p.prompt.clone())],
            PeftParams::Dept(p) => {
                let mut out = Vec::new();
                if let Some(prompt) = &p.prompt {
                    out.push((PROMPT_TENSOR, prompt.clone()));
                }
                if let Some(lr) = &p.low_rank {
                    out.push((LOWRANK_A_TENSOR, lr.a.clone()));
                    out.push((LOWRANK_B_TENSOR, lr.b.clone()));
                }
                out
            }
        }
    }

    /// `(prompt tensors, low-rank tensors)`, the two learning-rate groups.
    pub fn param_groups(&self) -> (Vec<Tensor<T>>, Vec<Tensor<T>>) {
        let mut prompt = Vec::new();
        let mut low_rank = Vec::new();
        for (name, t) in self.named_tensors() {
            if name == PROMPT_TENSOR {
                prompt.push(t);
            } else {
                low_rank.push(t);
            }
        }
        (prompt, low_rank)
    }

    fn map_tensors(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        match self {
            PeftParams::Vanilla(p) => PeftParams::Vanilla(PromptParams { prompt: f(&p.prompt) }),
            PeftParams::Dept(p) => PeftParams::Dept(DeptParams {
                prompt: p.prompt.as_ref().map(&f),
                low_rank: p.low_rank.as_ref().map(|lr| LowRank {
                    a: f(&lr.a),
                    b: f(&lr.b),
                }),
                max_seq_len: p.max_seq_len,
                d_model: p.d_model,
            }),
        }
    }

    /// Deep copy, so training one copy leaves the other untouched.
    pub fn deep_clone(&self) -> Self {
        self.map_tensors(Tensor::deep_clone)
    }

    /// Constant copy for inference; no graph is recorded through it.
    pub fn detached(&self) -> Self {
        self.map_tensors(Tensor::detach)
    }

    pub fn cast<U: Scalar>(&self) -> PeftParams<U> {
        match self {
            PeftParams::Vanilla(p) => PeftParams::Vanilla(PromptParams {
                prompt: p.prompt.cast(),
            }),
            PeftParams::Dept(p) => PeftParams::Dept(DeptParams {
                prompt: p.prompt.as_ref().map(Tensor::cast),
                low_rank: p.low_rank.as_ref().map(|lr| LowRank {
                    a: lr.a.cast(),
                    b: lr.b.cast(),
                }),
                max_seq_len: p.max_seq_len,
                d_model: p.d_model,
            }),
        }
    }

    /// Checkpoint with tensors `prompt`, `lowrank_a`, `lowrank_b` (those
    /// present) and metadata `variant, m, r, l, d, s`. For the decomposed
    /// variant `l` is the vanilla length whose budget the adapter was sized
    /// against.
    pub fn to_checkpoint(&self, budget_len: usize) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, t) in self.named_tensors() {
            ck.push(name, &t);
        }
        let (d, s) = match self {
            PeftParams::Vanilla(p) => (p.prompt.shape()[1], 0),
            PeftParams::Dept(p) => (p.d_model, p.max_seq_len),
        };
        ck.set_meta("kind", "peft");
        ck.set_meta("variant", self.tag().as_str());
        ck.set_meta("m", self.prompt_len());
        ck.set_meta("r", self.rank());
        ck.set_meta("l", budget_len);
        ck.set_meta("d", d);
        ck.set_meta("s", s);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "peft" {
            return Err(DeptError::Checkpoint("not an adapter checkpoint".into()));
        }
        let load = |name: &str| -> Result<Option<Tensor<T>>> {
            ck.get(name)
                .map(|t| Tensor::param(t.to_values(), &t.shape))
                .transpose()
        };
        match ck.meta("variant")? {
            "vanilla-pt" => Ok(PeftParams::Vanilla(PromptParams {
                prompt: load(PROMPT_TENSOR)?
                    .ok_or_else(|| DeptError::Checkpoint("missing tensor `prompt`".into()))?,
            })),
            "dept" => {
                let low_rank = match (load(LOWRANK_A_TENSOR)?, load(LOWRANK_B_TENSOR)?) {
                    (Some(a), Some(b)) => Some(LowRank { a, b }),
                    (None, None) => None,
                    _ => return Err(DeptError::Checkpoint("incomplete low-rank pair".into())),
                };
                Ok(PeftParams::Dept(DeptParams {
                    prompt: load(PROMPT_TENSOR)?,
                    low_rank,
                    max_seq_len: ck.meta_usize("s")?,
                    d_model: ck.meta_usize("d")?,
                }))
            }
            other => Err(DeptError::Checkpoint(format!("unknown variant `{other}`"))),
        }
    }

    /// Fresh adapter with this adapter's structure and the source
    /// checkpoint's values. Every tensor must match by name and shape.
    pub fn transfer_from(&self, source: &Checkpoint) -> Result<Self> {
        let target = self.deep_clone();
        let names: Vec<&str> = target.named_tensors().iter().map(|(n, _)| *n).collect();
        if let Some(extra) = source.tensors.iter().find(|t| !names.contains(&t.name.as_str())) {
            return Err(DeptError::Transfer {
                tensor: extra.name.clone(),
                expected: Vec::new(),
                found: extra.shape.clone(),
            });
        }
        for (name, t) in target.named_tensors() {
            let src = source.get(name).ok_or_else(|| DeptError::Transfer {
                tensor: name.to_string(),
                expected: t.shape().to_vec(),
                found: Vec::new(),
            })?;
            if src.shape != t.shape() {
                return Err(DeptError::Transfer {
                    tensor: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: src.shape.clone(),
                });
            }
            t.assign(&src.to_values())?;
        }
        Ok(target)
    }
}

/// Learning rates: `prompt` (α₁) for prompt rows, `low_rank` (α₂) for `A`, `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub prompt: f64,
    pub low_rank: f64,
}

/// An adapter with its learning rates.
#[derive(Clone)]
pub struct PeftVariant<T: Scalar = f32> {
    pub params: PeftParams<T>,
    pub rates: LearningRates,
}

impl<T: Scalar> PeftVariant<T> {
    pub fn new(params: PeftParams<T>, rates: LearningRates) -> Result<Self> {
        if !(rates.prompt > 0.0) {
            return Err(DeptError::Config("prompt learning rate must be > 0".into()));
        }
        if params.tag() == VariantTag::Dept && !(rates.low_rank > 0.0) {
            return Err(DeptError::Config("low-rank learning rate must be > 0".into()));
        }
        Ok(PeftVariant { params, rates })
    }

    pub fn tag(&self) -> VariantTag {
        self.params.tag()
    }

    pub fn trainable_params(&self) -> usize {
        self.params.trainable_params()
    }

    /// Transfer initialisation: same rates, values from `source`.
    pub fn transfer_init(&self, source: &Checkpoint) -> Result<Self> {
        Ok(PeftVariant {
            params: self.params.transfer_from(source)?,
            rates: self.rates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backbone(s: usize, d: usize) -> Backbone<f32> {
        let mut b = Backbone::init(
            BackboneConfig {
                vocab_size: 16,
                d_model: d,
                n_layers: 1,
                n_heads: 1,
                d_ff: 4,
                max_seq_len: s,
                max_prompt_len: 6,
            },
            3,
        )
        .unwrap();
        b.freeze();
        b
    }

    #[test]
    fn vanilla_composition_shape_and_grad_partition() {
        let bb = backbone(4, 3);
        let p = PeftParams::Vanilla(PromptParams::init(&bb, 2, &InitOptions::default(), 1).unwrap());
        let batch = TokenBatch::new(&[vec![1, 2, 3]]).unwrap();
        let c = p.compose(&bb, &batch).unwrap();
        assert_eq!(c.embeds.shape(), &[1, 5, 3]);
        assert_eq!(c.prompt_len, 2);
        c.embeds.sum().backward().unwrap();
        assert!(bb.token_embedding().grad().is_none());
        assert!(p.named_tensors()[0].1.grad().is_some());
    }

    #[test]
    fn lowrank_update_by_hand() {
        let bb = backbone(4, 3);
        let lr = LowRank {
            a: Tensor::<f32>::from_f64(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0], &[4, 2]).unwrap(),
            b: Tensor::<f32>::from_f64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap(),
        };
        assert_eq!(
            lr.delta().unwrap().to_vec(),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 5.0, 7.0, 9.0, 0.0, 0.0, 0.0]
        );
        let p = PeftParams::Dept(DeptParams {
            prompt: None,
            low_rank: Some(lr),
            max_seq_len: 4,
            d_model: 3,
        });
        let ids = vec![5, 6, 7, 8];
        let batch = TokenBatch::new(&[ids.clone()]).unwrap();
        let composed = p.compose(&bb, &batch).unwrap().embeds.to_vec();
        let words = bb.embed(&batch).unwrap().to_vec();
        let delta = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 5.0, 7.0, 9.0, 0.0, 0.0, 0.0];
        for i in 0..12 {
            assert_eq!(composed[i], words[i] + delta[i]);
        }
    }

    #[test]
    fn zero_update_at_init_matches_vanilla() {
        let bb = backbone(4, 3);
        let opts = InitOptions::default();
        let dept = PeftParams::Dept(DeptParams::init(&bb, 2, 2, &opts, 5).unwrap());
        let vanilla = PeftParams::Vanilla(PromptParams::init(&bb, 2, &opts, 5).unwrap());
        let batch = TokenBatch::new(&[vec![1, 2, 3], vec![4, 5]]).unwrap();
        assert_eq!(
            dept.compose(&bb, &batch).unwrap().embeds.to_vec(),
            vanilla.compose(&bb, &batch).unwrap().embeds.to_vec()
        );
        if let PeftParams::Dept(p) = &dept {
            let lr = p.low_rank.as_ref().unwrap();
            assert!(lr.b.to_vec().iter().all(|&v| v == 0.0));
            assert!(lr.delta().unwrap().to_vec().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn prompt_free_variant_is_just_updated_words() {
        let bb = backbone(4, 3);
        let p = PeftParams::Dept(DeptParams::init(&bb, 0, 1, &InitOptions::default(), 0).unwrap());
        let batch = TokenBatch::new(&[vec![1, 2]]).unwrap();
        let c = p.compose(&bb, &batch).unwrap();
        assert_eq!(c.prompt_len, 0);
        assert_eq!(c.embeds.to_vec(), bb.embed(&batch).unwrap().to_vec());
    }

    #[test]
    fn init_contract_errors() {
        let bb = backbone(4, 3);
        let opts = InitOptions::default();
        assert!(matches!(DeptParams::init(&bb, 1, 4, &opts, 0), Err(DeptError::Rank { r: 4, max: 3 })));
        assert!(DeptParams::init(&bb, 0, 0, &opts, 0).is_err());
        assert!(DeptParams::init(&bb, 7, 1, &opts, 0).is_err());
    }

    #[test]
    fn text_longer_than_update_rows_is_rejected() {
        let bb = backbone(4, 3);
        let p = PeftParams::Dept(DeptParams::init(&bb, 1, 1, &InitOptions::default(), 0).unwrap());
        let batch = TokenBatch::new(&[vec![1; 5]]).unwrap();
        assert!(matches!(p.compose(&bb, &batch), Err(DeptError::Length { .. })));
    }

    #[test]
    fn trainable_counts() {
        let bb = backbone(4, 3);
        let opts = InitOptions::default();
        let v = PeftParams::Vanilla(PromptParams::init(&bb, 5, &opts, 0).unwrap());
        assert_eq!(v.trainable_params(), 15);
        let d = PeftParams::Dept(DeptParams::init(&bb, 2, 1, &opts, 0).unwrap());
        assert_eq!(d.trainable_params(), 2 * 3 + 4 + 3);
    }

    #[test]
    fn transfer_rejects_mismatched_prompt() {
        let bb = backbone(4, 3);
        let opts = InitOptions::default();
        let source = PeftParams::Dept(DeptParams::init(&bb, 2, 1, &opts, 0).unwrap());
        let target = PeftParams::Dept(DeptParams::init(&bb, 4, 1, &opts, 1).unwrap());
        let err = target.transfer_from(&source.to_checkpoint(6)).err().unwrap();
        assert!(matches!(err, DeptError::Transfer { ref tensor, .. } if tensor == "prompt"), "{err}");
        let same = PeftParams::Dept(DeptParams::init(&bb, 2, 1, &opts, 9).unwrap());
        let moved = same.transfer_from(&source.to_checkpoint(6)).unwrap();
        assert_eq!(moved.to_checkpoint(6).to_bytes(), source.to_checkpoint(6).to_bytes());
    }
}
