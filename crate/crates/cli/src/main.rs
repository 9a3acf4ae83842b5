mod args;
mod commands;
mod lists;

use std::ffi::OsString;
use std::fmt;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use rfsim::exec::Execution;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use args::{Cli, Command, Common};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// Bad flags, missing inputs or invalid configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Layers the flags over a `--config` file: keys given on the command line
/// win, then keys in the file, then flag defaults. The file may be a bare
/// config object or a whole provenance document.
fn resolve<T: Serialize + DeserializeOwned>(
    args: T,
    matches: &ArgMatches,
    common: &Common,
    command: &str,
) -> Result<T> {
    let Some(path) = &common.config else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
    let mut file: Value = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
    if let Some(cmd) = file.get("command").and_then(Value::as_str) {
        if cmd != command {
            return Err(UsageError(format!(
                "config {} is for `{cmd}`, not `{command}`",
                path.display()
            ))
            .into());
        }
        file = file.get("config").cloned().unwrap_or(Value::Null);
    }
    let Value::Object(mut merged) = file else {
        return Err(
            UsageError(format!("config {} must hold a JSON object", path.display())).into(),
        );
    };
    let Value::Object(flags) = serde_json::to_value(&args)? else {
        unreachable!("argument structs serialize to objects");
    };
    for (key, value) in flags {
        let from_cli = matches!(matches.value_source(&key), Some(ValueSource::CommandLine));
        if from_cli || !merged.contains_key(&key) {
            merged.insert(key, value);
        }
    }
    Ok(serde_json::from_value(Value::Object(merged))
        .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?)
}

fn announce(common: &Common) -> Result<Execution> {
    eprintln!("seed: {}", common.seed);
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(UsageError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(Execution::Parallel)
}

fn run(argv: Vec<OsString>) -> Result<()> {
    let matches = Cli::command().try_get_matches_from(argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let name = cli.command.name();
    let sub = matches
        .subcommand_matches(name)
        .expect("subcommand matched");
    match cli.command {
        Command::Train(a) => {
            let a = resolve(a.clone(), sub, &a.common, name)?;
            announce(&a.common)?;
            commands::train(&a)
        }
        Command::Prune(a) => {
            let a = resolve(a.clone(), sub, &a.common, name)?;
            announce(&a.common)?;
            commands::prune(&a)
        }
        Command::Search(a) => {
            let a = resolve(a.clone(), sub, &a.common, name)?;
            let exec = announce(&a.common)?;
            commands::search(&a, exec)
        }
        Command::Inject(a) => {
            let a = resolve(a.clone(), sub, &a.common, name)?;
            let exec = announce(&a.common)?;
            commands::inject(&a, exec)
        }
        Command::Sweep(a) => {
            let a = resolve(a.clone(), sub, &a.common, name)?;
            let exec = announce(&a.common)?;
            commands::sweep_cmd(&a, exec)
        }
        Command::VerifyExpectation(a) => {
            let a = resolve(a.clone(), sub, &a.common, name)?;
            let exec = announce(&a.common)?;
            commands::verify(&a, exec)
        }
        Command::Inspect(a) => commands::inspect(&a),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                return ExitCode::from(clap_err.exit_code() as u8);
            }
            let usage = e.downcast_ref::<UsageError>().is_some();
            let report = serde_json::json!({
                "status": "error",
                "kind": if usage { "usage" } else { "runtime" },
                "message": format!("{e:#}"),
            });
            eprintln!("{report}");
            ExitCode::from(if usage { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
