mod args;
mod commands;

use std::fmt;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use dept_core::DeptError;

use args::{parse_set, split_dotted, Cli};

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<DeptError> for Failure {
    fn from(e: DeptError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn run(argv: Vec<String>) -> Result<(), Failure> {
    let (argv, dotted) = split_dotted(argv).map_err(Failure::Config)?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => {
            let text = e.render().to_string();
            let text = text.trim_end();
            return Err(Failure::Config(text.strip_prefix("error: ").unwrap_or(text).to_string()));
        }
    };
    let mut overrides = cli.verb.flag_overrides();
    overrides.extend(parse_set(&cli.verb.common().set).map_err(Failure::Config)?);
    overrides.extend(dotted);
    commands::execute(&cli.verb, overrides)
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dept: {f}");
            ExitCode::from(f.code())
        }
    }
}
