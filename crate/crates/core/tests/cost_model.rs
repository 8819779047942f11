use dept_core::bench::{average_ranks, flop_count, memory_estimate, spearman, sweep};
use dept_core::config::BenchConfig;
use dept_core::{solve_budget, Backbone, BackboneConfig};
use proptest::prelude::*;

fn cfg(d: usize, d_ff: usize, heads: usize, layers: usize) -> BackboneConfig {
    BackboneConfig {
        vocab_size: 64,
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        d_ff,
        max_seq_len: 256,
        max_prompt_len: 100,
    }
}

/// Multiply-add count of a forward pass, tallied over the individual matrix
/// products of one layer: four `[n,d]x[d,d]` projections, per head a
/// `[n,dh]x[dh,n]` score product and a `[n,n]x[n,dh]` mixing product, and
/// the two feed-forward products.
fn matmul_oracle(c: &BackboneConfig, n: usize) -> (u64, u64) {
    let mm = |a: usize, b: usize, k: usize| 2 * (a * b * k) as u64;
    let (d, dh) = (c.d_model, c.d_model / c.n_heads);
    let mut attention = 0;
    for _ in 0..c.n_heads {
        attention += mm(n, dh, n) + mm(n, n, dh);
    }
    let linear = 4 * mm(n, d, d) + mm(n, d, c.d_ff) + mm(n, c.d_ff, d);
    (c.n_layers as u64 * attention, c.n_layers as u64 * linear)
}

proptest! {
    #[test]
    fn flops_match_per_product_tally(
        heads in 1usize..5, dh in 1usize..9, d_ff in 1usize..64, layers in 1usize..4, n in 1usize..300,
    ) {
        let c = cfg(heads * dh, d_ff, heads, layers);
        let f = flop_count(&c, n);
        let (attention, linear) = matmul_oracle(&c, n);
        prop_assert_eq!(f.attention, attention);
        prop_assert_eq!(f.linear, linear);
        prop_assert_eq!(f.total, attention + linear);
        prop_assert_eq!(f.linear, f.projection + f.feed_forward);
    }

    #[test]
    fn shorter_composition_is_strictly_cheaper(l in 1usize..120, m in 0usize..120, s in 1usize..300) {
        prop_assume!(m < l);
        let c = cfg(64, 256, 4, 2);
        prop_assert!(flop_count(&c, m + s).total < flop_count(&c, l + s).total);
        prop_assert!(memory_estimate(&c, m + s, 8) < memory_estimate(&c, l + s, 8));
    }

    #[test]
    fn memory_is_linear_in_batch(n in 1usize..200, batch in 1usize..32) {
        let c = cfg(64, 256, 4, 2);
        prop_assert_eq!(memory_estimate(&c, n, batch), batch as u64 * memory_estimate(&c, n, 1));
    }

    #[test]
    fn matched_budgets_never_exceed_the_vanilla_count(
        l in 1usize..200, m in 0usize..200, d in 1usize..1024, s in 1usize..512,
    ) {
        prop_assume!(m <= l);
        let sol = solve_budget(l, d, s, m).unwrap();
        prop_assert!(sol.trainable_params <= l * d);
        prop_assert_eq!(sol.trainable_params + sol.slack, l * d);
        // one more rank would overflow the budget
        prop_assert!(m * d + (s + d) * (sol.r + 1) > l * d);
    }

    #[test]
    fn spearman_is_one_for_any_increasing_map(xs in prop::collection::hash_set(-1000i32..1000, 2..20)) {
        let x: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) + 5.0).collect();
        prop_assert!((spearman(&x, &y) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        prop_assert!((spearman(&x, &neg) + 1.0).abs() < 1e-12);
    }
}

#[test]
fn reference_shape_attention_and_total_reductions() {
    let c = cfg(768, 3072, 12, 12);
    let full = flop_count(&c, 100 + 256);
    let short = flop_count(&c, 20 + 256);
    let attn = 100.0 * (1.0 - short.attention as f64 / full.attention as f64);
    let total = 100.0 * (1.0 - short.total as f64 / full.total as f64);
    // 1 − (276/356)²
    assert!((attn - 39.894).abs() < 0.01, "{attn}");
    assert!(total >= 22.0, "{total}");
}

#[test]
fn ties_share_average_ranks() {
    assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
}

#[test]
fn analytic_sweep_is_relative_to_the_vanilla_row() {
    let c = BackboneConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        max_prompt_len: 24,
    };
    let backbone = Backbone::init(c, 3).unwrap();
    let bench = BenchConfig {
        budget_len: 8,
        m_values: vec![0, 2, 4, 6],
        measure: false,
        ..BenchConfig::default()
    };
    let report = sweep(&backbone, &bench, 0).unwrap();
    let ms: Vec<usize> = report.rows.iter().map(|r| r.m).collect();
    assert_eq!(ms, vec![0, 2, 4, 6, 8]);
    let base = report.rows.last().unwrap();
    assert_eq!((base.rel_time_pct, base.rel_mem_pct, base.rel_flops_pct), (100.0, 100.0, 100.0));
    for pair in report.rows.windows(2) {
        assert!(pair[0].rel_flops_pct < pair[1].rel_flops_pct);
        assert!(pair[0].composed_len < pair[1].composed_len);
    }
    // (8 − m)·16 / 32 is exact for every even m
    assert!(report.rows.iter().all(|r| r.trainable_params == 8 * 16));
    assert!(report.spearman.is_none());
}
