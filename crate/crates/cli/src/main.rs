// Validation uses negated comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// A command failure and the exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    /// Bad flags, config file or missing inputs: exit 2.
    #[error("{0}")]
    Config(String),
    /// A stage failed on valid inputs: exit 1.
    #[error("{0}")]
    Run(String),
}

impl Failure {
    pub fn run(e: impl std::fmt::Display) -> Self {
        Failure::Run(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();

    let result = config::load(cli.config.as_deref()).and_then(|mut cfg| {
        config::apply_global(&mut cfg, &cli);
        match &cli.command {
            Command::Ingest(a) => commands::ingest(cfg, a),
            Command::Prune(a) => commands::prune(cfg, a),
            Command::Describe(a) => commands::describe(cfg, a),
            Command::Render(a) => commands::render(cfg, a),
            Command::Features(a) => commands::features(cfg, a),
            Command::Hier(a) => commands::hier(cfg, a),
            Command::Assemble(a) => commands::assemble(cfg, a),
            Command::Ask(a) => commands::ask(cfg, a),
            Command::Eval(a) => commands::eval(a),
            Command::Pipeline(a) => commands::pipeline(cfg, a),
        }
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
