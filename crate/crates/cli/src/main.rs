//! `imlabel`: synthetic data, rate estimation, sampling plans, training,
//! evaluation and gradient checks from the command line.

mod commands;
mod config;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use imlabel::{Error, ErrorCategory, Result};

use config::{parse_file, RunConfig, COMMANDS};

fn cli() -> Command {
    let mut app = Command::new("imlabel")
        .about("Concurrent softmax, soft-balance sampling and mAP on synthetic long-tailed data")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for cmd in COMMANDS {
        let mut sub = Command::new(cmd.name).about(cmd.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key=value file; flags override it"),
        );
        for key in cmd.keys {
            let help = match key.default {
                Some("") | None => key.help.to_string(),
                Some(d) => format!("{} [default: {d}]", key.help),
            };
            sub = sub.arg(Arg::new(key.name).long(key.name).value_name("VALUE").help(help));
        }
        app = app.subcommand(sub);
    }
    app
}

fn resolve(name: &str, m: &ArgMatches) -> Result<RunConfig> {
    let cmd = config::command(name).ok_or_else(|| Error::Config(format!("unknown command {name}")))?;
    let file = match m.get_one::<String>("config") {
        Some(p) => {
            let path = Path::new(p);
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_file(&text, path)?
        }
        None => Vec::new(),
    };
    let flags: Vec<(String, String)> = cmd
        .keys
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    RunConfig::resolve(cmd, &file, &flags)
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match resolve(name, sub).and_then(|cfg| commands::run(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("imlabel {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
