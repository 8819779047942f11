//! Small decoder-only transformer used as the frozen base model.
//!
//! Pre-norm residual blocks, GELU feed-forward, learned absolute positions
//! covering `max_prompt_len + max_seq_len` slots, and an output head tied to
//! the token embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{DeptError, Result};
use crate::rng::normal_vec;
use crate::tensor::{Scalar, Tensor};

/// Reserved padding token id.
pub const PAD_ID: usize = 0;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub max_prompt_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            max_prompt_len: 100,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DeptError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(DeptError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Rows of the position table.
    pub fn max_positions(&self) -> usize {
        self.max_prompt_len + self.max_seq_len
    }

    /// Parameters in one block: four `d×d` projections with biases, two
    /// layer norms, and the two feed-forward matrices with biases,
    /// i.e. `4d² + 2·d·d_ff + 9d + d_ff`.
    pub fn params_per_layer(&self) -> usize {
        let d = self.d_model;
        4 * d * d + 2 * d * self.d_ff + 9 * d + self.d_ff
    }

    /// `V·d + (max_prompt_len + max_seq_len)·d + n_layers·per_layer + 2d`.
    pub fn total_params(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d + self.max_positions() * d + self.n_layers * self.params_per_layer() + 2 * d
    }
}

/// Right-padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(DeptError::Degenerate("empty batch".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        let seq_len = *lengths.iter().max().unwrap();
        if lengths.contains(&0) {
            return Err(DeptError::Degenerate("empty sequence in batch".into()));
        }
        let mut ids = vec![PAD_ID; seqs.len() * seq_len];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * seq_len..b * seq_len + s.as_ref().len()].copy_from_slice(s.as_ref());
        }
        Ok(TokenBatch {
            ids,
            batch: seqs.len(),
            seq_len,
            lengths,
        })
    }

    /// True where the token is not padding.
    pub fn key_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD_ID).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }
}

#[derive(Clone)]
struct Block<T: Scalar> {
    ln1_gamma: Tensor<T>,
    ln1_beta: Tensor<T>,
    w_q: Tensor<T>,
    b_q: Tensor<T>,
    w_k: Tensor<T>,
    b_k: Tensor<T>,
    w_v: Tensor<T>,
    b_v: Tensor<T>,
    w_o: Tensor<T>,
    b_o: Tensor<T>,
    ln2_gamma: Tensor<T>,
    ln2_beta: Tensor<T>,
    w_ff1: Tensor<T>,
    b_ff1: Tensor<T>,
    w_ff2: Tensor<T>,
    b_ff2: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    fn named(&self) -> [(&'static str, &Tensor<T>); 16] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.w_q", &self.w_q),
            ("attn.b_q", &self.b_q),
            ("attn.w_k", &self.w_k),
            ("attn.b_k", &self.b_k),
            ("attn.w_v", &self.w_v),
            ("attn.b_v", &self.b_v),
            ("attn.w_o", &self.w_o),
            ("attn.b_o", &self.b_o),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("ff.w_1", &self.w_ff1),
            ("ff.b_1", &self.b_ff1),
            ("ff.w_2", &self.w_ff2),
            ("ff.b_2", &self.b_ff2),
        ]
    }

    fn forward(&self, x: &Tensor<T>, heads: usize, key_mask: Option<&[bool]>) -> Result<Tensor<T>> {
        let h = x.layer_norm(&self.ln1_gamma, &self.ln1_beta, LN_EPS)?;
        let q = h.matmul(&self.w_q)?.add(&self.b_q)?;
        let k = h.matmul(&self.w_k)?.add(&self.b_k)?;
        let v = h.matmul(&self.w_v)?.add(&self.b_v)?;
        let a = Tensor::attention(&q, &k, &v, heads, key_mask)?;
        let x = x.add(&a.matmul(&self.w_o)?.add(&self.b_o)?)?;
        let h = x.layer_norm(&self.ln2_gamma, &self.ln2_beta, LN_EPS)?;
        let f = h.matmul(&self.w_ff1)?.add(&self.b_ff1)?.gelu();
        x.add(&f.matmul(&self.w_ff2)?.add(&self.b_ff2)?)
    }
}

/// The transformer. Generic over precision so the same model can run in
/// 64-bit mode for gradient checks.
#[derive(Clone)]
pub struct Backbone<T: Scalar = f32> {
    config: BackboneConfig,
    token_embedding: Tensor<T>,
    position_embedding: Tensor<T>,
    layers: Vec<Block<T>>,
    final_gamma: Tensor<T>,
    final_beta: Tensor<T>,
    frozen: bool,
}

impl<T: Scalar> Backbone<T> {
    /// Randomly initialised, trainable model.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut normal = |shape: &[usize]| {
            Tensor::param(
                normal_vec(&mut rng, shape.iter().product(), INIT_STD)
                    .into_iter()
                    .map(T::of)
                    .collect(),
                shape,
            )
        };
        let token_embedding = normal(&[config.vocab_size, d])?;
        let position_embedding = normal(&[config.max_positions(), d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(Block {
                ln1_gamma: ones(d)?,
                ln1_beta: zeros(d)?,
                w_q: normal(&[d, d])?,
                b_q: zeros(d)?,
                w_k: normal(&[d, d])?,
                b_k: zeros(d)?,
                w_v: normal(&[d, d])?,
                b_v: zeros(d)?,
                w_o: normal(&[d, d])?,
                b_o: zeros(d)?,
                ln2_gamma: ones(d)?,
                ln2_beta: zeros(d)?,
                w_ff1: normal(&[d, config.d_ff])?,
                b_ff1: zeros(config.d_ff)?,
                w_ff2: normal(&[config.d_ff, d])?,
                b_ff2: zeros(d)?,
            });
        }
        Ok(Backbone {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_gamma: ones(d)?,
            final_beta: zeros(d)?,
            frozen: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> &Tensor<T> {
        &self.token_embedding
    }

    pub fn position_embedding(&self) -> &Tensor<T> {
        &self.position_embedding
    }

    /// Every weight tensor with its checkpoint name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.clone()),
            ("position_embedding".to_string(), self.position_embedding.clone()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layers.{i}.{name}"), t.clone()));
            }
        }
        out.push(("final_ln.gamma".into(), self.final_gamma.clone()));
        out.push(("final_ln.beta".into(), self.final_beta.clone()));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// Stop gradient tracking on every weight.
    pub fn freeze(&mut self) {
        for t in self.parameters() {
            t.set_requires_grad(false).expect("parameters are leaves");
        }
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        for t in self.parameters() {
            t.set_requires_grad(true).expect("parameters are leaves");
        }
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn count_params(&self) -> ParamCount {
        let mut count = ParamCount {
            trainable: 0,
            frozen: 0,
        };
        for t in self.parameters() {
            if t.requires_grad() {
                count.trainable += t.numel();
            } else {
                count.frozen += t.numel();
            }
        }
        count
    }

    /// Word embeddings `[B, n, d]` for a batch, checked against the text length limit.
    pub fn embed(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        if batch.seq_len > self.config.max_seq_len {
            return Err(DeptError::Length {
                len: batch.seq_len,
                max: self.config.max_seq_len,
            });
        }
        self.embed_unchecked(batch)
    }

    /// Word embeddings without the text length limit; the composed length is
    /// still bounded by the position table in [`Self::forward_hidden`].
    pub(crate) fn embed_unchecked(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        Tensor::embedding_lookup(&self.token_embedding, &batch.ids)?.reshape(&[
            batch.batch,
            batch.seq_len,
            self.config.d_model,
        ])
    }

    /// Hidden states after the final layer norm, `[B, n, d]`.
    pub fn forward_hidden(&self, embeds: &Tensor<T>, key_mask: Option<&[bool]>) -> Result<Tensor<T>> {
        let s = embeds.shape();
        if s.len() != 3 || s[2] != self.config.d_model {
            return Err(DeptError::shape(
                "forward_embeds",
                s,
                &[self.config.max_positions(), self.config.d_model],
            ));
        }
        let n = s[1];
        if n > self.config.max_positions() {
            return Err(DeptError::Length {
                len: n,
                max: self.config.max_positions(),
            });
        }
        let mut x = embeds.add(&self.position_embedding.slice_rows(0, n)?)?;
        for layer in &self.layers {
            x = layer.forward(&x, self.config.n_heads, key_mask)?;
        }
        x.layer_norm(&self.final_gamma, &self.final_beta, LN_EPS)
    }

    /// Project hidden states `[..., d]` onto the vocabulary through the tied
    /// embedding.
    pub fn logits(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        hidden.matmul_t(&self.token_embedding)
    }

    /// Next-token logits `[B, n, V]` for pre-composed embeddings whose first
    /// `prompt_len` rows are virtual tokens.
    pub fn forward_embeds(
        &self,
        embeds: &Tensor<T>,
        prompt_len: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Tensor<T>> {
        if embeds.rank() == 3 && prompt_len > embeds.shape()[1] {
            return Err(DeptError::Length {
                len: prompt_len,
                max: embeds.shape()[1],
            });
        }
        self.logits(&self.forward_hidden(embeds, key_mask)?)
    }

    /// Next-token logits `[B, n, V]` for token ids without any prompt.
    pub fn forward_ids(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        let embeds = self.embed(batch)?;
        self.forward_embeds(&embeds, 0, Some(&batch.key_mask()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, t) in self.named_parameters() {
            ck.push(&name, &t);
        }
        let c = &self.config;
        ck.set_meta("kind", "backbone");
        ck.set_meta("vocab_size", c.vocab_size);
        ck.set_meta("d_model", c.d_model);
        ck.set_meta("n_layers", c.n_layers);
        ck.set_meta("n_heads", c.n_heads);
        ck.set_meta("d_ff", c.d_ff);
        ck.set_meta("max_seq_len", c.max_seq_len);
        ck.set_meta("max_prompt_len", c.max_prompt_len);
        ck.set_meta("frozen", self.frozen);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "backbone" {
            return Err(DeptError::Checkpoint("not a backbone checkpoint".into()));
        }
        let config = BackboneConfig {
            vocab_size: ck.meta_usize("vocab_size")?,
            d_model: ck.meta_usize("d_model")?,
            n_layers: ck.meta_usize("n_layers")?,
            n_heads: ck.meta_usize("n_heads")?,
            d_ff: ck.meta_usize("d_ff")?,
            max_seq_len: ck.meta_usize("max_seq_len")?,
            max_prompt_len: ck.meta_usize("max_prompt_len")?,
        };
        let mut model = Self::init(config, 0)?;
        for (name, t) in model.named_parameters() {
            let stored = ck.require(&name)?;
            if stored.shape != t.shape() {
                return Err(DeptError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    stored.shape,
                    t.shape()
                )));
            }
            t.assign(&stored.to_values())?;
        }
        if ck.meta("frozen")? == "true" {
            model.freeze();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Same weights in another precision, with the same frozen state.
    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        let cast_block = |b: &Block<T>| Block {
            ln1_gamma: b.ln1_gamma.cast(),
            ln1_beta: b.ln1_beta.cast(),
            w_q: b.w_q.cast(),
            b_q: b.b_q.cast(),
            w_k: b.w_k.cast(),
            b_k: b.b_k.cast(),
            w_v: b.w_v.cast(),
            b_v: b.b_v.cast(),
            w_o: b.w_o.cast(),
            b_o: b.b_o.cast(),
            ln2_gamma: b.ln2_gamma.cast(),
            ln2_beta: b.ln2_beta.cast(),
            w_ff1: b.w_ff1.cast(),
            b_ff1: b.b_ff1.cast(),
            w_ff2: b.w_ff2.cast(),
            b_ff2: b.b_ff2.cast(),
        };
        Backbone {
            config: self.config,
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self.layers.iter().map(cast_block).collect(),
            final_gamma: self.final_gamma.cast(),
            final_beta: self.final_beta.cast(),
            frozen: self.frozen,
        }
    }

    /// Independent copy of every weight (the derived `Clone` shares them).
    pub fn deep_clone(&self) -> Self {
        self.cast::<T>()
    }
}

fn ones<T: Scalar>(d: usize) -> Result<Tensor<T>> {
    Tensor::param(vec![T::one(); d], &[d])
}

fn zeros<T: Scalar>(d: usize) -> Result<Tensor<T>> {
    Tensor::param(vec![T::zero(); d], &[d])
}
