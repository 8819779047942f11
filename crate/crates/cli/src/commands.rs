use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dept_core::bench::{sweep, SweepReport};
use dept_core::config::{resolve, AdapterShape, ExperimentConfig};
use dept_core::harness::{
    evaluate, few_shot, fewshot_data, load_or_pretrain, lr_ablation, new_adapter, pretrain_backbone, task_data,
    train_peft, train_source, train_spec, AblationRow, PretrainReport,
};
use dept_core::{Backbone, Checkpoint, PeftParams, PeftVariant};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::args::Verb;
use crate::Failure;

/// Collects the files a command writes into its output directory.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
    extra: Map<String, Value>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let path = self.path(name);
        std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        let path = self.path(name);
        std::fs::write(path, text)?;
        Ok(())
    }
}

pub fn execute(verb: &Verb, overrides: Vec<(String, String)>) -> Result<(), Failure> {
    let common = verb.common();
    let root = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => json!({}),
    };
    let cfg = resolve(root, &overrides)?;
    check_inputs(&cfg)?;
    if matches!(verb, Verb::Eval { .. }) && cfg.peft.checkpoint.is_none() {
        return Err(Failure::Config("eval needs an adapter (--adapter or peft.checkpoint)".into()));
    }
    let shape = cfg.peft.resolve(&cfg.backbone)?;

    let dir = match &common.out {
        Some(dir) => dir.clone(),
        None => default_out(verb.name(), cfg.seed),
    };
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let mut out = Outputs {
        dir,
        files: Vec::new(),
        extra: Map::new(),
    };
    eprintln!("dept {}: writing to {}", verb.name(), out.dir.display());

    match verb {
        Verb::Pretrain(_) => pretrain(&cfg, &mut out)?,
        Verb::Train { .. } => train(&cfg, &shape, &mut out)?,
        Verb::Eval { .. } => eval(&cfg, &mut out)?,
        Verb::Bench { .. } => cost(&cfg, "bench", &mut out)?,
        Verb::Sweep { .. } => cost(&cfg, "sweep", &mut out)?,
        Verb::AblateLr(_) => ablate(&cfg, &mut out)?,
        Verb::Fewshot { .. } => fewshot(&cfg, &mut out)?,
    }

    let mut manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "verb": verb.name(),
        "seed": cfg.seed,
        "config": cfg.to_value(),
        "overrides": overrides.iter().map(|(k, v)| json!([k, v])).collect::<Vec<_>>(),
        "adapter": shape,
        "outputs": out.files,
    });
    manifest.as_object_mut().expect("object").extend(out.extra);
    let path = out.dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn default_out(verb: &str, seed: u64) -> PathBuf {
    let root = std::env::var_os("DEPT_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis());
    root.join(format!("{verb}-seed{seed}-{stamp}"))
}

fn check_inputs(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let paths = [
        ("backbone_checkpoint", &cfg.backbone_checkpoint),
        ("peft.checkpoint", &cfg.peft.checkpoint),
        ("fewshot.source_checkpoint", &cfg.fewshot.source_checkpoint),
        ("task.train_path", &cfg.task.train_path),
        ("task.eval_path", &cfg.task.eval_path),
    ];
    for (field, path) in paths {
        if let Some(p) = path {
            if !p.is_file() {
                return Err(Failure::Config(format!("{field}: no such file {}", p.display())));
            }
        }
    }
    Ok(())
}

fn record_pretrain(
    backbone: &Backbone,
    report: Option<PretrainReport>,
    out: &mut Outputs,
) -> Result<(), Failure> {
    if let Some(report) = report {
        eprintln!(
            "pretrained {} steps: probe loss {:.4} -> {:.4}, accuracy {:.3}",
            report.steps, report.initial_loss, report.final_loss, report.final_accuracy
        );
        backbone.save(out.path("backbone.ckpt"))?;
        out.json("pretrain.json", &report)?;
    }
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), Failure> {
    let (backbone, report) = pretrain_backbone(cfg)?;
    record_pretrain(&backbone, Some(report), out)
}

fn train(cfg: &ExperimentConfig, shape: &AdapterShape, out: &mut Outputs) -> Result<(), Failure> {
    let (backbone, pre) = load_or_pretrain(cfg)?;
    record_pretrain(&backbone, pre, out)?;
    let (train, eval) = task_data(cfg)?;
    let params = new_adapter(&backbone, shape, &cfg.peft.init, cfg.seed)?;
    let mut variant = PeftVariant::new(params, cfg.optim.rates())?;
    if let Some(path) = &cfg.peft.checkpoint {
        variant = variant.transfer_init(&Checkpoint::load(path)?)?;
    }
    let mut outcome = train_peft(&backbone, variant, &train, &eval, &train_spec(cfg, cfg.seed))?;
    outcome.report.config = cfg.to_value();
    let r = &outcome.report;
    println!(
        "{} m={} r={} params={} final_accuracy={:.4} best_accuracy={:.4} (step {})",
        r.variant.as_str(),
        r.m,
        r.r,
        r.trainable_params,
        r.final_accuracy,
        r.best_accuracy,
        r.best_step
    );
    outcome.best.to_checkpoint(cfg.peft.budget_len).save(out.path("adapter.ckpt"))?;
    outcome.last.to_checkpoint(cfg.peft.budget_len).save(out.path("adapter_last.ckpt"))?;
    out.json("report.json", &outcome.report)?;
    outcome.report.write_curve_csv(out.path("curve.csv"))?;
    Ok(())
}

fn eval(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), Failure> {
    let path = cfg.peft.checkpoint.as_ref().expect("checked before dispatch");
    let adapter = PeftParams::from_checkpoint(&Checkpoint::load(path)?)?;
    let (backbone, pre) = load_or_pretrain(cfg)?;
    record_pretrain(&backbone, pre, out)?;
    let (_, eval) = task_data(cfg)?;
    let candidates = cfg.target_task().label_tokens();
    let metric = evaluate(&backbone, &adapter, &eval, &candidates, cfg.train.eval_batch_size)?;
    println!("accuracy={:.4} loss={:.4} n={}", metric.accuracy, metric.loss, metric.count);
    out.json("eval.json", &metric)
}

fn cost_backbone(cfg: &ExperimentConfig) -> Result<Backbone, Failure> {
    match &cfg.backbone_checkpoint {
        Some(_) => Ok(load_or_pretrain(cfg)?.0),
        None => {
            let mut b = Backbone::init(cfg.backbone, cfg.seed)?;
            b.freeze();
            Ok(b)
        }
    }
}

fn print_sweep(report: &SweepReport) {
    println!("m\tr\tn\tparams\trel_time%\trel_mem%\trel_flops%\tsamples/s");
    for row in &report.rows {
        let sps = row.throughput_sps.map_or("-".to_string(), |s| format!("{s:.1}"));
        println!(
            "{}\t{}\t{}\t{}\t{:.1}\t{:.1}\t{:.1}\t{sps}{}",
            row.m,
            row.r,
            row.composed_len,
            row.trainable_params,
            row.rel_time_pct,
            row.rel_mem_pct,
            row.rel_flops_pct,
            if row.noisy { " (noisy)" } else { "" }
        );
    }
    if let Some(rho) = report.spearman {
        println!("spearman(throughput, -flops) = {rho:.3}");
    }
}

fn cost(cfg: &ExperimentConfig, name: &str, out: &mut Outputs) -> Result<(), Failure> {
    let backbone = cost_backbone(cfg)?;
    let report = sweep(&backbone, &cfg.bench, cfg.seed)?;
    print_sweep(&report);
    report.write_csv(out.path(&format!("{name}.csv")))?;
    out.json(&format!("{name}.json"), &report)?;
    if name == "sweep" {
        out.json("sweep_plot.json", &report.rows)?;
    }
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), Failure> {
    let (backbone, pre) = load_or_pretrain(cfg)?;
    record_pretrain(&backbone, pre, out)?;
    let (train, eval) = task_data(cfg)?;
    let report = lr_ablation(&backbone, cfg, &train, &eval)?;
    println!("setting\tmedian_final_accuracy_pct\tpublished_average");
    for (setting, median) in &report.medians {
        let published = report
            .published
            .iter()
            .find(|(s, _)| s == setting)
            .map_or(f64::NAN, |(_, v)| *v);
        println!("{}\t{:.1}\t{published}", setting.as_str(), 100.0 * median);
    }
    println!("mixed is best: {}", report.mixed_is_best);
    let path = out.path("ablation.csv");
    write_ablation_csv(&path, &report.rows)?;
    out.json("ablation.json", &report)
}

fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<(), Failure> {
    let mut text = String::from("setting,seed,lr_prompt,lr_lowrank,final_accuracy,best_accuracy\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.setting.as_str(),
            r.seed,
            r.lr_prompt,
            r.lr_lowrank,
            r.final_accuracy,
            r.best_accuracy
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn fewshot(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), Failure> {
    let (backbone, pre) = load_or_pretrain(cfg)?;
    record_pretrain(&backbone, pre, out)?;
    let source = match &cfg.fewshot.source_checkpoint {
        Some(path) => Checkpoint::load(path)?,
        None => {
            let outcome = train_source(&backbone, cfg)?;
            eprintln!("source adapter: best accuracy {:.4}", outcome.report.best_accuracy);
            let ck = outcome.best.to_checkpoint(cfg.peft.budget_len);
            ck.save(out.path("source_adapter.ckpt"))?;
            out.extra
                .insert("source_accuracy".into(), json!(outcome.report.best_accuracy));
            ck
        }
    };
    let (pool, eval) = fewshot_data(cfg)?;
    let report = few_shot(&backbone, cfg, &source, &pool, &eval)?;
    let table = report.table();
    print!("{table}");
    std::fs::create_dir_all(out.dir.join("runs"))?;
    for (row, run) in report.rows.iter().zip(&report.runs) {
        let name = format!("runs/k{}-seed{}-{}.json", row.k, row.seed, row.init.as_str());
        out.json(&name, run)?;
    }
    let mut csv = String::from("k,seed,init,accuracy,final_accuracy\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.k,
            r.seed,
            r.init.as_str(),
            r.accuracy,
            r.final_accuracy
        ));
    }
    out.text("fewshot.csv", &csv)?;
    out.text("fewshot_table.txt", &table)?;
    out.json("fewshot.json", &report)
}
