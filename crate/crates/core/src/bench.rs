//! Analytic cost model and measured inference throughput as functions of the
//! composed sequence length.
//!
//! Per layer, for composed length `n`:
//!
//! - attention scores and mixing: `4·n²·d`
//! - q/k/v/o projections: `8·n·d²`
//! - feed-forward: `4·n·d·d_ff`
//! - activation elements: `n_heads·n² + 12·n·d`
//!
//! Softmax, layer norm, and embedding lookups are left out; at these shapes
//! they are well under one percent of the total.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::BenchConfig;
use crate::error::{DeptError, Result};
use crate::harness::label_logits;
use crate::peft::{solve_budget, DeptParams, InitOptions, PeftParams, PromptParams, VariantTag};
use crate::tasks::{content_tokens, Example};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub attention: u64,
    pub projection: u64,
    pub feed_forward: u64,
    /// `projection + feed_forward`
    pub linear: u64,
    pub total: u64,
}

pub fn flop_count(cfg: &BackboneConfig, n: usize) -> FlopCount {
    let (n, d, ff, layers) = (n as u64, cfg.d_model as u64, cfg.d_ff as u64, cfg.n_layers as u64);
    let attention = layers * 4 * n * n * d;
    let projection = layers * 8 * n * d * d;
    let feed_forward = layers * 4 * n * d * ff;
    FlopCount {
        attention,
        projection,
        feed_forward,
        linear: projection + feed_forward,
        total: attention + projection + feed_forward,
    }
}

/// Activation elements held for a batch of `batch` sequences of length `n`.
pub fn memory_estimate(cfg: &BackboneConfig, n: usize, batch: usize) -> u64 {
    let (n, d) = (n as u64, cfg.d_model as u64);
    batch as u64 * cfg.n_layers as u64 * (cfg.n_heads as u64 * n * n + 12 * n * d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Median samples per second over the repeats.
    pub samples_per_sec: f64,
    pub repeats: Vec<f64>,
    /// Set when two consecutive repeats differ by 10% or more.
    pub noisy: bool,
}

/// Forward passes over a fixed example set, ready to be timed.
struct TimedPass<'a> {
    backbone: &'a Backbone,
    peft: PeftParams,
    batches: Vec<crate::backbone::TokenBatch>,
    samples: usize,
}

impl<'a> TimedPass<'a> {
    fn new(backbone: &'a Backbone, peft: &PeftParams, examples: &[Example], batch: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(DeptError::Degenerate("no examples to time".into()));
        }
        let seqs: Vec<Vec<usize>> = examples.iter().map(|e| e.tokens.clone()).collect();
        let batches = seqs
            .chunks(batch.max(1))
            .map(crate::backbone::TokenBatch::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(TimedPass {
            backbone,
            peft: peft.detached(),
            batches,
            samples: examples.len(),
        })
    }

    fn run(&self) -> Result<()> {
        for b in &self.batches {
            std::hint::black_box(label_logits(self.backbone, &self.peft, b)?);
        }
        Ok(())
    }

    /// Samples per second of one pass.
    fn rate(&self) -> Result<f64> {
        let start = Instant::now();
        self.run()?;
        Ok(self.samples as f64 / start.elapsed().as_secs_f64())
    }
}

fn summarise(rates: Vec<f64>) -> Throughput {
    let noisy = rates
        .windows(2)
        .any(|w| (w[0] - w[1]).abs() >= 0.1 * w[0].min(w[1]));
    Throughput {
        samples_per_sec: crate::harness::median(&rates),
        repeats: rates,
        noisy,
    }
}

fn check_repeats(repeats: usize) -> Result<()> {
    if repeats < 3 {
        return Err(DeptError::Config(format!("need at least 3 repeats, got {repeats}")));
    }
    Ok(())
}

/// Samples per second of full forward passes over `examples`, median of
/// `repeats` timed passes after one untimed warm-up pass.
pub fn measure_throughput(
    backbone: &Backbone,
    peft: &PeftParams,
    examples: &[Example],
    batch: usize,
    repeats: usize,
) -> Result<Throughput> {
    check_repeats(repeats)?;
    let pass = TimedPass::new(backbone, peft, examples, batch)?;
    pass.run()?;
    let rates = (0..repeats).map(|_| pass.rate()).collect::<Result<Vec<_>>>()?;
    Ok(summarise(rates))
}

/// Like [`measure_throughput`] for several adapters at once. Repeats are
/// taken round-robin, so slow drift in machine load affects every adapter
/// alike instead of whichever happened to be timed at the time.
pub fn measure_throughputs(
    backbone: &Backbone,
    pefts: &[PeftParams],
    examples: &[Example],
    batch: usize,
    repeats: usize,
) -> Result<Vec<Throughput>> {
    check_repeats(repeats)?;
    let passes = pefts
        .iter()
        .map(|p| TimedPass::new(backbone, p, examples, batch))
        .collect::<Result<Vec<_>>>()?;
    for pass in &passes {
        pass.run()?;
    }
    let mut rates = vec![Vec::with_capacity(repeats); passes.len()];
    for _ in 0..repeats {
        for (pass, r) in passes.iter().zip(&mut rates) {
            r.push(pass.rate()?);
        }
    }
    Ok(rates.into_iter().map(summarise).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: VariantTag,
    pub m: usize,
    pub r: usize,
    pub composed_len: usize,
    pub trainable_params: usize,
    pub attn_flops: u64,
    pub linear_flops: u64,
    pub total_flops: u64,
    pub act_elems: u64,
    pub throughput_sps: Option<f64>,
    /// Time relative to the vanilla row: measured when throughput is
    /// available, from total FLOPs otherwise.
    pub rel_time_pct: f64,
    pub rel_mem_pct: f64,
    pub rel_flops_pct: f64,
    pub noisy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub budget_len: usize,
    pub text_len: usize,
    pub rows: Vec<CostReport>,
    /// Rank correlation of measured throughput with analytic cheapness
    /// (negated total FLOPs); 1.0 means identical orderings.
    pub spearman: Option<f64>,
    /// Published inference speeds, samples per second, for orientation only:
    /// `(model, vanilla, decomposed with m = 20)`.
    pub published: Vec<(String, f64, f64)>,
}

impl SweepReport {
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "variant",
            "m",
            "r",
            "composed_len",
            "trainable_params",
            "attn_flops",
            "linear_flops",
            "total_flops",
            "act_elems",
            "throughput_sps",
            "rel_time_pct",
            "rel_mem_pct",
        ])?;
        for row in &self.rows {
            w.write_record([
                row.variant.as_str().to_string(),
                row.m.to_string(),
                row.r.to_string(),
                row.composed_len.to_string(),
                row.trainable_params.to_string(),
                row.attn_flops.to_string(),
                row.linear_flops.to_string(),
                row.total_flops.to_string(),
                row.act_elems.to_string(),
                row.throughput_sps.map_or(String::new(), |v| v.to_string()),
                row.rel_time_pct.to_string(),
                row.rel_mem_pct.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Timing inputs: `count` random content sequences of exactly `len` tokens,
/// so the analytic composed length is exact.
pub fn bench_examples(vocab_size: usize, len: usize, count: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = content_tokens(vocab_size);
    (0..count)
        .map(|_| Example {
            tokens: (0..len).map(|_| rng.random_range(content.clone())).collect(),
            label: content.start,
        })
        .collect()
}

/// Adapter for sweep point `m`: the vanilla prompt when `m == budget_len`,
/// otherwise the decomposed variant at the solved rank.
pub fn sweep_adapter(backbone: &Backbone, budget_len: usize, m: usize, seed: u64) -> Result<PeftParams> {
    let cfg = backbone.config();
    let opts = InitOptions::default();
    if m == budget_len {
        return Ok(PeftParams::Vanilla(PromptParams::init(backbone, m, &opts, seed)?));
    }
    let sol = solve_budget(budget_len, cfg.d_model, cfg.max_seq_len, m)?;
    Ok(PeftParams::Dept(DeptParams::init(backbone, sol.m, sol.r, &opts, seed)?))
}

/// Cost of every `m` in the grid at a fixed budget, relative to the
/// vanilla row `m == budget_len`, which is added when missing.
pub fn sweep(backbone: &Backbone, cfg: &BenchConfig, seed: u64) -> Result<SweepReport> {
    let bc = *backbone.config();
    let l = cfg.budget_len;
    if let Some(&m) = cfg.m_values.iter().find(|&&m| m > l) {
        return Err(DeptError::Config(format!("sweep point m={m} exceeds budget {l}")));
    }
    let mut ms = cfg.m_values.clone();
    if !ms.contains(&l) {
        ms.push(l);
    }
    let text_len = bc.max_seq_len;
    let examples = bench_examples(bc.vocab_size, text_len, cfg.examples, seed);
    let adapters = ms
        .iter()
        .map(|&m| sweep_adapter(backbone, l, m, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut throughputs: Vec<Option<Throughput>> = if cfg.measure {
        measure_throughputs(backbone, &adapters, &examples, cfg.batch_size, cfg.repeats)?
            .into_iter()
            .map(Some)
            .collect()
    } else {
        vec![None; ms.len()]
    };
    let mut raw = Vec::with_capacity(ms.len());
    for (i, (&m, adapter)) in ms.iter().zip(&adapters).enumerate() {
        let n = m + text_len;
        let flops = flop_count(&bc, n);
        raw.push((m, adapter.tag(), adapter.rank(), adapter.trainable_params(), n, flops, throughputs[i].take()));
    }
    let base = raw.iter().find(|r| r.0 == l).expect("baseline added above");
    let base_flops = base.5.total as f64;
    let base_mem = memory_estimate(&bc, base.4, cfg.batch_size) as f64;
    let base_sps = base.6.as_ref().map(|t| t.samples_per_sec);
    let rows: Vec<CostReport> = raw
        .iter()
        .map(|(m, tag, r, params, n, flops, tp)| {
            let act = memory_estimate(&bc, *n, cfg.batch_size);
            let rel_flops = 100.0 * flops.total as f64 / base_flops;
            let sps = tp.as_ref().map(|t| t.samples_per_sec);
            CostReport {
                variant: *tag,
                m: *m,
                r: *r,
                composed_len: *n,
                trainable_params: *params,
                attn_flops: flops.attention,
                linear_flops: flops.linear,
                total_flops: flops.total,
                act_elems: act,
                throughput_sps: sps,
                rel_time_pct: match (sps, base_sps) {
                    (Some(s), Some(b)) => 100.0 * b / s,
                    _ => rel_flops,
                },
                rel_mem_pct: 100.0 * act as f64 / base_mem,
                rel_flops_pct: rel_flops,
                noisy: tp.as_ref().is_some_and(|t| t.noisy),
            }
        })
        .collect();
    let spearman = if cfg.measure && rows.len() >= 2 {
        let sps: Vec<f64> = rows.iter().map(|r| r.throughput_sps.unwrap_or(0.0)).collect();
        let cheap: Vec<f64> = rows.iter().map(|r| -(r.total_flops as f64)).collect();
        Some(spearman(&sps, &cheap))
    } else {
        None
    };
    Ok(SweepReport {
        budget_len: l,
        text_len,
        rows,
        spearman,
        published: vec![
            ("t5-small".into(), 167.3, 178.3),
            ("t5-large".into(), 21.0, 24.8),
        ],
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            vocab_size: 8,
            d_model: 2,
            n_layers: 1,
            n_heads: 1,
            d_ff: 4,
            max_seq_len: 4,
            max_prompt_len: 4,
        }
    }

    #[test]
    fn flop_example() {
        let f = flop_count(&tiny(), 4);
        assert_eq!((f.attention, f.projection, f.feed_forward, f.total), (128, 128, 128, 384));
        assert_eq!(f.linear, 256);
    }

    #[test]
    fn doubling_n_scales_terms_by_degree() {
        let cfg = BackboneConfig::default();
        let (a, b) = (flop_count(&cfg, 37), flop_count(&cfg, 74));
        assert_eq!(b.attention, 4 * a.attention);
        assert_eq!(b.linear, 2 * a.linear);
    }

    #[test]
    fn memory_is_linear_in_batch() {
        let cfg = BackboneConfig::default();
        assert_eq!(memory_estimate(&cfg, 50, 6), 2 * memory_estimate(&cfg, 50, 3));
        let one = memory_estimate(&cfg, 1, 1);
        assert_eq!(one, (cfg.n_layers * (cfg.n_heads + 12 * cfg.d_model)) as u64);
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    }
}
