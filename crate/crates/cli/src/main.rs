mod args;
mod pipeline;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

/// Why a run failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data { kind: &'static str, message: String },
}

impl Failure {
    pub fn data(kind: &'static str, message: impl Into<String>) -> Self {
        Failure::Data {
            kind,
            message: message.into(),
        }
    }

    fn report(&self) -> (String, u8) {
        match self {
            Failure::Usage(msg) => (format!("error: usage: {msg}"), 2),
            Failure::Data { kind, message } => (format!("error: {kind}: {message}"), 3),
        }
    }
}

impl From<fastref::Error> for Failure {
    fn from(e: fastref::Error) -> Self {
        let kind = e.kind();
        let text = e.to_string();
        // Messages already lead with the kind in words ("invalid input: ...").
        let prefix = format!("{}: ", kind.replace('-', " "));
        let message = text.strip_prefix(&prefix).unwrap_or(&text).to_string();
        Failure::Data { kind, message }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::data("io", e.to_string())
    }
}

fn one_line(text: &str) -> String {
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or(text);
    first.trim().trim_start_matches("error: ").to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&Failure::Usage(one_line(&e.to_string()))),
    };
    let result = match cli.command {
        Command::Synth(a) => pipeline::synth(&a),
        Command::BuildPrototypes(a) => pipeline::build_prototypes(&a),
        Command::Score(a) => pipeline::score(&a, false),
        Command::Baseline(a) => pipeline::score(&a, true),
        Command::Eval(a) => pipeline::eval(&a),
        Command::Bench(a) => pipeline::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}

fn fail(f: &Failure) -> ExitCode {
    let (line, code) = f.report();
    eprintln!("{line}");
    ExitCode::from(code)
}
