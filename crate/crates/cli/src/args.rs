use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "dept",
    version,
    about = "Prompt tuning and decomposed prompt tuning experiments",
    after_help = "Any config field can be set with a dotted flag, e.g. `--optim.alpha1 0.4`."
)]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file (a run manifest is accepted too).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to a fresh directory under $DEPT_OUT or ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pretrained backbone checkpoint.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Config override `path=value`; repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Train a backbone on the source mixture.
    Pretrain(Common),
    /// Train one adapter on the target task.
    Train {
        #[command(flatten)]
        common: Common,
        /// Adapter checkpoint to initialise from.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Score an adapter checkpoint on the target evaluation set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
    /// Cost of selected prompt lengths against the vanilla baseline.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
    },
    /// Full prompt-length sweep with plot data.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
    },
    /// Single-rate versus mixed-rate ablation.
    AblateLr(Common),
    /// Few-shot training from random and transferred initialisation.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Source adapter checkpoint.
        #[arg(long)]
        source: Option<PathBuf>,
    },
}

impl Verb {
    pub fn name(&self) -> &'static str {
        match self {
            Verb::Pretrain(_) => "pretrain",
            Verb::Train { .. } => "train",
            Verb::Eval { .. } => "eval",
            Verb::Bench { .. } => "bench",
            Verb::Sweep { .. } => "sweep",
            Verb::AblateLr(_) => "ablate-lr",
            Verb::Fewshot { .. } => "fewshot",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Verb::Pretrain(c) | Verb::AblateLr(c) => c,
            Verb::Train { common, .. }
            | Verb::Eval { common, .. }
            | Verb::Bench { common, .. }
            | Verb::Sweep { common, .. }
            | Verb::Fewshot { common, .. } => common,
        }
    }

    /// Verb-specific flags expressed as config overrides.
    pub fn flag_overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let c = self.common();
        if let Some(seed) = c.seed {
            out.push(("seed".into(), seed.to_string()));
        }
        if let Some(path) = &c.backbone {
            out.push(("backbone_checkpoint".into(), json_string(path)));
        }
        let list = |v: &[String]| format!("[{}]", v.join(","));
        match self {
            Verb::Train { init_from: Some(p), .. } | Verb::Eval { adapter: Some(p), .. } => {
                out.push(("peft.checkpoint".into(), json_string(p)));
            }
            Verb::Bench { m, .. } | Verb::Sweep { m, .. } if !m.is_empty() => {
                let ms: Vec<String> = m.iter().map(ToString::to_string).collect();
                out.push(("bench.m_values".into(), list(&ms)));
            }
            Verb::Fewshot { k, seeds, source, .. } => {
                if !k.is_empty() {
                    let ks: Vec<String> = k.iter().map(ToString::to_string).collect();
                    out.push(("fewshot.k_values".into(), list(&ks)));
                }
                if !seeds.is_empty() {
                    let ss: Vec<String> = seeds.iter().map(ToString::to_string).collect();
                    out.push(("fewshot.seeds".into(), list(&ss)));
                }
                if let Some(p) = source {
                    out.push(("fewshot.source_checkpoint".into(), json_string(p)));
                }
            }
            _ => {}
        }
        out
    }
}

fn json_string(path: &std::path::Path) -> String {
    serde_json::Value::String(path.display().to_string()).to_string()
}

/// Split `--section.field value` and `--section.field=value` flags out of
/// `argv`, leaving the rest for the parser.
pub fn split_dotted(argv: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("missing value for --{name}"))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}

/// Parse `--set path=value` entries.
pub fn parse_set(entries: &[String]) -> Result<Vec<(String, String)>, String> {
    entries
        .iter()
        .map(|e| {
            e.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format!("--set expects PATH=VALUE, got `{e}`"))
        })
        .collect()
}
