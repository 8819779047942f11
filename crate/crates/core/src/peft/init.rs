use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DeptError, Result};
use crate::rng::normal_vec;
use crate::tensor::{Scalar, Tensor};

/// Rows eligible for vocabulary-sampled prompt initialisation.
pub const TOP_VOCAB_ROWS: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum PromptInit {
    RandomGaussian,
    SampleVocabRows,
}

/// Trainable `[len, d]` prompt. `sample-vocab-rows` copies distinct rows
/// drawn from the first `min(V, 5000)` rows of the embedding table.
pub fn init_prompt<T: Scalar>(
    table: &Tensor<T>,
    len: usize,
    policy: PromptInit,
    sigma: f64,
    seed: u64,
) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(DeptError::shape("init_prompt", table.shape(), &[len]));
    }
    let d = table.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = match policy {
        PromptInit::RandomGaussian => normal_vec(&mut rng, len * d, sigma)
            .into_iter()
            .map(T::of)
            .collect(),
        PromptInit::SampleVocabRows => {
            let pool = table.shape()[0].min(TOP_VOCAB_ROWS);
            if len > pool {
                return Err(DeptError::Config(format!(
                    "cannot sample {len} distinct rows from {pool} vocabulary rows"
                )));
            }
            let rows = table.values();
            let mut out = Vec::with_capacity(len * d);
            for idx in sample(&mut rng, pool, len) {
                out.extend_from_slice(&rows[idx * d..(idx + 1) * d]);
            }
            out
        }
    };
    Tensor::param(values, &[len, d])
}
