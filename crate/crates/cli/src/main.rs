//! `ulip`: batch driver for dataset generation, rendering, anchor tables,
//! pre-training and every evaluation protocol.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 when a run
//! fails.

use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};

mod commands;
mod config;
mod error;

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "ulip", version, about = "Tri-modal contrastive pre-training of point-cloud encoders")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand accepts.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON file of flat dotted config keys.
    #[arg(long, global = true)]
    pub(crate) config: Option<PathBuf>,
    /// Override one config key; repeatable. Values parse as JSON when they can.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub(crate) overrides: Vec<String>,
    /// Output directory. Defaults to `$ULIP_OUT/<subcommand>`.
    #[arg(long, global = true)]
    pub(crate) out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub(crate) seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic shape dataset: a manifest plus one point-cloud file per object.
    GenSynthetic(commands::GenSyntheticArgs),
    /// Render depth maps of dataset objects and export them as 16-bit PGM.
    Render(commands::RenderArgs),
    /// Build text and image anchor tables (oracle, stand-in, or ingested).
    EmbedAnchors(commands::EmbedAnchorsArgs),
    /// Align the point encoder to frozen anchors.
    Pretrain(commands::PretrainArgs),
    /// Zero-shot classification against text anchors.
    Zeroshot(commands::ZeroshotArgs),
    /// Fine-tune an encoder with a classification head.
    Finetune(commands::FinetuneArgs),
    /// Retrieve point clouds for a text or image query.
    Retrieve(commands::RetrieveArgs),
    /// Compare P+T, P+I and P+I+T pre-training by zero-shot accuracy.
    AblateModalities(commands::AblateArgs),
    /// Fine-tune from pre-trained and random initializations at several training fractions.
    SweepDataEfficiency(commands::SweepArgs),
    /// Check every autodiff gradient against finite differences.
    Gradcheck(commands::GradcheckArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::Render(_) => "render",
            Command::EmbedAnchors(_) => "embed-anchors",
            Command::Pretrain(_) => "pretrain",
            Command::Zeroshot(_) => "zeroshot",
            Command::Finetune(_) => "finetune",
            Command::Retrieve(_) => "retrieve",
            Command::AblateModalities(_) => "ablate-modalities",
            Command::SweepDataEfficiency(_) => "sweep-data-efficiency",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

fn dispatch(inv: Cli) -> Result<(), CliError> {
    let c = &inv.common;
    match inv.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&a, c),
        Command::Render(a) => commands::render(&a, c),
        Command::EmbedAnchors(a) => commands::embed_anchors(&a, c),
        Command::Pretrain(a) => commands::pretrain(&a, c),
        Command::Zeroshot(a) => commands::zeroshot(&a, c),
        Command::Finetune(a) => commands::finetune(&a, c),
        Command::Retrieve(a) => commands::retrieve(&a, c),
        Command::AblateModalities(a) => commands::ablate(&a, c),
        Command::SweepDataEfficiency(a) => commands::sweep(&a, c),
        Command::Gradcheck(a) => commands::gradcheck(&a, c),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let inv = match Cli::try_parse() {
        Ok(inv) => inv,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let name = inv.command.name();
    if let Err(e) = dispatch(inv) {
        eprintln!("error: {e}");
        if matches!(e, CliError::Usage(_)) {
            let mut cmd = Cli::command();
            cmd.build();
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("\n{}", sub.render_usage());
            }
        }
        std::process::exit(e.exit_code());
    }
}
