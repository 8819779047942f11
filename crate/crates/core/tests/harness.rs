use dept_core::config::ExperimentConfig;
use dept_core::harness::{evaluate, new_adapter, task_data, train_peft, train_spec};
use dept_core::peft::{InitOptions, PromptParams};
use dept_core::tasks::{few_shot_sample, gen_task};
use dept_core::{Backbone, BackboneConfig, DeptError, DeptParams, PeftParams, PeftVariant, VariantTag};
use serde_json::json;

fn small_config() -> ExperimentConfig {
    let mut cfg: ExperimentConfig = serde_json::from_value(json!({
        "backbone": {"vocab_size": 64, "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32,
                     "max_seq_len": 16, "max_prompt_len": 24},
        "pretrain": {"max_prefix": 8},
        "task": {"n_train": 64, "n_eval": 48},
        "peft": {"budget_len": 8, "m": 4},
        "train": {"steps": 30, "eval_every": 10, "batch_size": 8}
    }))
    .unwrap();
    cfg.validate().unwrap();
    cfg.seed = 3;
    cfg
}

fn frozen(cfg: &ExperimentConfig) -> Backbone {
    let mut b = Backbone::init(cfg.backbone, 11).unwrap();
    b.freeze();
    b
}

fn variant(backbone: &Backbone, cfg: &ExperimentConfig, seed: u64) -> PeftVariant {
    let shape = cfg.peft.resolve(backbone.config()).unwrap();
    PeftVariant::new(new_adapter(backbone, &shape, &cfg.peft.init, seed).unwrap(), cfg.optim.rates()).unwrap()
}

#[test]
fn untrained_adapter_on_random_backbone_scores_chance() {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone = BackboneConfig::default();
    assert_eq!(cfg.backbone.vocab_size, 512);
    let mut backbone = Backbone::init(cfg.backbone, 0).unwrap();
    backbone.freeze();
    let (_, eval) = gen_task(&cfg.target_task(), 0, 2000).unwrap();
    let shape = cfg.peft.resolve(backbone.config()).unwrap();
    let peft = new_adapter(&backbone, &shape, &cfg.peft.init, 0).unwrap();
    let metric = evaluate(&backbone, &peft, &eval, &cfg.target_task().label_tokens(), 256).unwrap();
    let chance = 1.0 / cfg.pretrain.num_classes as f64;
    assert!((metric.accuracy - chance).abs() <= 0.05, "{}", metric.accuracy);
}

#[test]
fn runs_are_reproducible_and_leave_the_backbone_untouched() {
    let cfg = small_config();
    let backbone = frozen(&cfg);
    let before = backbone.to_checkpoint().to_bytes();
    let (train, eval) = task_data(&cfg).unwrap();
    let spec = train_spec(&cfg, 5);
    let a = train_peft(&backbone, variant(&backbone, &cfg, 5), &train, &eval, &spec).unwrap();
    let b = train_peft(&backbone, variant(&backbone, &cfg, 5), &train, &eval, &spec).unwrap();
    assert_eq!(a.report.numeric_fields(), b.report.numeric_fields());
    assert_eq!(a.best.to_checkpoint(8).to_bytes(), b.best.to_checkpoint(8).to_bytes());
    assert_eq!(a.last.to_checkpoint(8).to_bytes(), b.last.to_checkpoint(8).to_bytes());
    assert_eq!(backbone.to_checkpoint().to_bytes(), before);

    let r = &a.report;
    assert_eq!(r.curve.len(), cfg.train.steps / cfg.train.eval_every);
    assert_eq!(r.initial.step, 0);
    assert_eq!((r.variant, r.m, r.r, r.trainable_params), (VariantTag::Dept, 4, 2, 8 * 16));
    assert!(r.best_accuracy >= r.initial.accuracy);
    assert!(r.curve.iter().all(|p| p.accuracy <= r.best_accuracy));
    assert!(r.curve.last().unwrap().lr_prompt < r.curve[0].lr_prompt);

    let other = train_peft(&backbone, variant(&backbone, &cfg, 6), &train, &eval, &train_spec(&cfg, 6)).unwrap();
    assert_ne!(other.report.numeric_fields().curve, r.curve);
}

#[test]
fn training_lowers_the_evaluation_loss() {
    let mut cfg = small_config();
    cfg.train.steps = 60;
    let backbone = frozen(&cfg);
    let (train, eval) = task_data(&cfg).unwrap();
    let out = train_peft(&backbone, variant(&backbone, &cfg, 1), &train, &eval, &train_spec(&cfg, 1)).unwrap();
    assert!(out.report.final_loss < out.report.initial.loss);
}

#[test]
fn rank_zero_decomposition_follows_the_vanilla_trajectory() {
    let mut cfg = small_config();
    cfg.train.steps = 40;
    cfg.train.eval_every = 5;
    let backbone = frozen(&cfg);
    let (train, eval) = task_data(&cfg).unwrap();
    let l = cfg.peft.budget_len;
    let opts = InitOptions::default();
    let rates = cfg.optim.rates();
    let dept = PeftParams::Dept(DeptParams::init(&backbone, l, 0, &opts, 2).unwrap());
    let vanilla = PeftParams::Vanilla(PromptParams::init(&backbone, l, &opts, 2).unwrap());
    let spec = train_spec(&cfg, 2);
    let a = train_peft(&backbone, PeftVariant::new(dept, rates).unwrap(), &train, &eval, &spec).unwrap();
    let b = train_peft(&backbone, PeftVariant::new(vanilla, rates).unwrap(), &train, &eval, &spec).unwrap();
    assert_eq!(a.report.initial, b.report.initial);
    assert_eq!(a.report.curve, b.report.curve);
    let (pa, pb) = (&a.last.named_tensors()[0].1, &b.last.named_tensors()[0].1);
    assert_eq!(pa.to_vec(), pb.to_vec());
}

#[test]
fn trainable_backbone_is_a_contract_error() {
    let cfg = small_config();
    let backbone = Backbone::init(cfg.backbone, 1).unwrap();
    let (train, eval) = task_data(&cfg).unwrap();
    let v = variant(&backbone, &cfg, 0);
    let res = train_peft(&backbone, v, &train, &eval, &train_spec(&cfg, 0));
    assert!(matches!(res, Err(DeptError::Contract(_))));
}

#[test]
fn divergence_reports_the_step() {
    let mut cfg = small_config();
    cfg.optim.alpha1 = 1e30;
    cfg.optim.alpha2 = 1e30;
    cfg.optim.schedule = dept_core::Schedule::Constant;
    let backbone = frozen(&cfg);
    let (train, eval) = task_data(&cfg).unwrap();
    let res = train_peft(&backbone, variant(&backbone, &cfg, 0), &train, &eval, &train_spec(&cfg, 0));
    assert!(matches!(res, Err(DeptError::Training { .. })), "{:?}", res.err());
}

#[test]
fn oversized_shot_count_is_rejected() {
    let cfg = small_config();
    let (train, _) = task_data(&cfg).unwrap();
    assert!(matches!(few_shot_sample(&train, 65, 0), Err(DeptError::Sample { k: 65, n: 64 })));
    let shots = few_shot_sample(&train, 16, 0).unwrap();
    assert_eq!(shots.len(), 16);
    assert!(shots.iter().all(|s| train.contains(s)));
}
