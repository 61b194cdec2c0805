//! Deterministic stand-in for the Python model runner, speaking the same
//! file protocol: `export` writes a bundle, `infer` answers a requests file.

use std::path::PathBuf;

use advise_core::numfmt::{read_json, write_json};
use advise_core::runner::stub::StubModel;
use advise_core::runner::{ClassTarget, ExportRequest, InferRequest, ModelRunner};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advise-stub-runner", about = "Synthetic model runner for tests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Export {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "stub")]
        model: String,
        #[arg(long, default_value = "cells")]
        layer: String,
        #[arg(long, default_value = "top1")]
        class: ClassTarget,
        #[arg(long)]
        out: PathBuf,
    },
    Infer {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let model = StubModel::new();
    let outcome = match cli.command {
        Command::Export {
            image,
            model: id,
            layer,
            class,
            out,
        } => model
            .export(&ExportRequest {
                image,
                model: id,
                layer,
                class,
                out,
            })
            .map(drop),
        Command::Infer { manifest, out } => {
            read_json::<InferRequest>(&manifest).and_then(|req| write_json(&out, &model.respond(&req)))
        }
    };
    if let Err(e) = outcome {
        eprintln!("advise-stub-runner: {e}");
        std::process::exit(1);
    }
}
