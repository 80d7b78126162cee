//! `bws`: command-line front end. Exit codes: 0 success, 2 usage or
//! configuration error, 3 I/O or parse error, 4 numeric failure.

mod args;
mod commands;
mod settings;

use std::process::ExitCode;

use bws_core::Error;
use clap::Parser;

use crate::args::{Cli, Command};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Io { .. } => ("io", EXIT_IO),
        Error::Parse { .. } => ("parse", EXIT_IO),
        Error::NonFinite { .. } => ("numeric", EXIT_NUMERIC),
        Error::Config(_) => ("config", EXIT_USAGE),
        Error::Contract(_) => ("contract", EXIT_USAGE),
        Error::Resource(_) => ("resource", EXIT_USAGE),
        Error::Tensor(_) => ("tensor", EXIT_USAGE),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::TrainGen(a) => commands::train_gen(a),
        Command::PseudoLabel(a) => commands::pseudo_label(a),
        Command::TrainSeg(a) => commands::train_seg(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let (kind, code) = classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("bws: error: {kind}: {msg}");
            ExitCode::from(code)
        }
    }
}
