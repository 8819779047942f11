use dept_core::harness::label_logits;
use dept_core::peft::{InitOptions, PromptParams};
use dept_core::{Backbone, BackboneConfig, Checkpoint, DeptError, DeptParams, PeftParams, TokenBatch};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(d: usize, s: usize) -> BackboneConfig {
    BackboneConfig {
        vocab_size: 40,
        d_model: d,
        n_layers: 2,
        n_heads: 2,
        d_ff: 2 * d,
        max_seq_len: s,
        max_prompt_len: 24,
    }
}

fn frozen<T: dept_core::Scalar>(cfg: BackboneConfig, seed: u64) -> Backbone<T> {
    let mut b = Backbone::init(cfg, seed).unwrap();
    b.freeze();
    b
}

fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize, count: usize) -> TokenBatch {
    let seqs: Vec<Vec<usize>> = (0..count)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(1..vocab)).collect()
        })
        .collect();
    TokenBatch::new(&seqs).unwrap()
}

fn gaussian_prompts() -> InitOptions {
    InitOptions {
        prompt_init: dept_core::peft::PromptInit::RandomGaussian,
        ..InitOptions::default()
    }
}

#[test]
fn zero_initialised_update_leaves_logits_unchanged() {
    let backbone: Backbone = frozen(config(16, 12), 5);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, 40, 12, 4);
        let opts = InitOptions::default();
        let dept = PeftParams::Dept(DeptParams::init(&backbone, 3, 4, &opts, seed).unwrap());
        let vanilla = PeftParams::Vanilla(PromptParams::init(&backbone, 3, &opts, seed).unwrap());
        let a = label_logits(&backbone, &dept, &batch).unwrap().to_vec();
        let b = label_logits(&backbone, &vanilla, &batch).unwrap().to_vec();
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 1e-6, "seed {seed}: {worst}");
    }
}

/// Word embedding plus position-indexed low-rank rows, computed entry by
/// entry.
#[test]
fn composed_text_rows_are_word_plus_lowrank_rows() {
    let cfg = config(6, 5);
    let backbone: Backbone<f64> = frozen(cfg, 1);
    let params = DeptParams::init(&backbone, 2, 3, &gaussian_prompts(), 4).unwrap();
    let lr = params.low_rank.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b: Vec<f64> = (0..3 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    lr.b.assign(&b).unwrap();
    let a = lr.a.to_vec();
    let prompt = params.prompt.as_ref().unwrap().to_vec();
    let peft = PeftParams::Dept(params.clone());

    let batch = TokenBatch::new(&[vec![3usize, 7, 9, 11]]).unwrap();
    let composed = peft.compose(&backbone, &batch).unwrap();
    assert_eq!(composed.embeds.shape(), &[1, 2 + 4, 6]);
    let out = composed.embeds.to_vec();
    let words = backbone.embed(&batch).unwrap().to_vec();
    for row in 0..2 {
        for j in 0..6 {
            assert_eq!(out[row * 6 + j], prompt[row * 6 + j]);
        }
    }
    for i in 0..4 {
        for j in 0..6 {
            let delta: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 6 + j]).sum();
            let expected = words[i * 6 + j] + delta;
            assert!((out[(2 + i) * 6 + j] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn gradients_reach_adapter_tensors_only() {
    let backbone: Backbone = frozen(config(8, 6), 2);
    let peft = PeftParams::Dept(DeptParams::init(&backbone, 2, 2, &InitOptions::default(), 0).unwrap());
    let examples = [dept_core::tasks::Example {
        tokens: vec![3, 4, 5],
        label: 6,
    }];
    let refs: Vec<&dept_core::tasks::Example> = examples.iter().collect();
    let loss = dept_core::harness::label_loss(&backbone, &peft, &refs).unwrap();
    loss.backward().unwrap();
    for (name, t) in peft.named_tensors() {
        assert!(t.has_grad(), "{name} has no gradient");
    }
    assert!(backbone.parameters().iter().all(|p| !p.has_grad()));
}

#[test]
fn transfer_needs_matching_shapes() {
    let backbone: Backbone = frozen(config(8, 6), 2);
    let opts = InitOptions::default();
    let source = PeftParams::Dept(DeptParams::init(&backbone, 2, 3, &opts, 0).unwrap()).to_checkpoint(4);
    let same = PeftParams::Dept(DeptParams::init(&backbone, 2, 3, &opts, 1).unwrap());
    let moved = same.transfer_from(&source).unwrap();
    for ((_, a), (_, b)) in moved.named_tensors().iter().zip(PeftParams::<f32>::from_checkpoint(&source).unwrap().named_tensors().iter()) {
        assert_eq!(a.to_vec(), b.to_vec());
    }
    let other_rank = PeftParams::Dept(DeptParams::init(&backbone, 2, 2, &opts, 1).unwrap());
    assert!(matches!(other_rank.transfer_from(&source), Err(DeptError::Transfer { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matched_budget_shortens_the_composition(l in 2usize..24, m in 0usize..24, seed in 0u64..1000) {
        prop_assume!(m < l);
        let cfg = config(8, 12);
        let backbone: Backbone = frozen(cfg, seed);
        let sol = dept_core::solve_budget(l, 8, 12, m).unwrap();
        prop_assume!(m > 0 || sol.r > 0);
        let opts = InitOptions::default();
        let dept = PeftParams::Dept(DeptParams::init(&backbone, m, sol.r, &opts, seed).unwrap());
        let vanilla = PeftParams::Vanilla(PromptParams::init(&backbone, l, &opts, seed).unwrap());
        prop_assert_eq!(dept.trainable_params(), sol.trainable_params);
        prop_assert!(dept.trainable_params() <= vanilla.trainable_params());
        let batch = TokenBatch::new(&[vec![3usize, 4, 5]]).unwrap();
        let short = dept.compose(&backbone, &batch).unwrap().composed_len();
        let long = vanilla.compose(&backbone, &batch).unwrap().composed_len();
        prop_assert!(short < long);
    }

    #[test]
    fn adapter_checkpoints_round_trip_byte_exactly(m in 0usize..6, r in 0usize..5, seed in 0u64..1000) {
        prop_assume!(m + r > 0);
        let backbone: Backbone = frozen(config(8, 6), seed);
        let peft = PeftParams::Dept(DeptParams::init(&backbone, m, r, &gaussian_prompts(), seed).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        peft.to_checkpoint(10).save(&p1).unwrap();
        let loaded: PeftParams = PeftParams::from_checkpoint(&Checkpoint::load(&p1).unwrap()).unwrap();
        loaded.to_checkpoint(10).save(&p2).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        prop_assert_eq!((loaded.prompt_len(), loaded.rank()), (m, r));
    }

    #[test]
    fn backbone_checkpoints_round_trip_byte_exactly(seed in 0u64..1000, layers in 1usize..3) {
        let cfg = BackboneConfig { n_layers: layers, ..config(8, 6) };
        let backbone: Backbone = Backbone::init(cfg, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        backbone.save(&p1).unwrap();
        Backbone::<f32>::load(&p1).unwrap().save(&p2).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
