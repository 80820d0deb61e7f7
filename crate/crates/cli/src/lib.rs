//! Command-line front end: one config file, ten pipeline steps, each writing
//! its artifacts and a `run.json` under `{out}/{step}/`.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod provenance;

use config::{RunConfig, SirModeName};
use segnbdt::tree::InferenceMode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{op} failed: {source}")]
    Runtime {
        op: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Runtime { .. } => 2,
        }
    }

    pub fn runtime(op: &str, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Self::Runtime {
            op: op.to_string(),
            source: source.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Hard,
    Soft,
}

impl From<ModeArg> for InferenceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Hard => InferenceMode::Hard,
            ModeArg::Soft => InferenceMode::Soft,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "segnbdt", version, about = "Decision-tree segmentation on synthetic scenes, with context, saliency and part-removal diagnostics")]
pub struct Cli {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root, overrides `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed, overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Tree inference mode.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// Part removal mode for `sir`; both when absent.
    #[arg(long = "sir-mode", global = true, value_enum)]
    pub sir_mode: Option<SirModeName>,
    /// Monotone UMRC scan.
    #[arg(long, global = true)]
    pub monotone: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Render the train and test datasets.
    GenerateData,
    /// Train the base network.
    Train,
    /// Build the class hierarchy from the trained classifier.
    Induce,
    /// Fine-tune with the tree supervision loss.
    Finetune,
    /// Pixel accuracy and mIoU of the network and the trees.
    Eval,
    /// Minimum required context maps and per-class statistics.
    Mrc,
    /// Grad-CAM and Grad-PAM maps.
    Saliency,
    /// Coarse visual decision rules for every inner node.
    Vdr,
    /// Part removal rankings for inner nodes.
    Sir,
    /// Composite figures along each decision path.
    Report,
    /// Every step above, in order.
    Pipeline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::GenerateData => "generate-data",
            Self::Train => "train",
            Self::Induce => "induce",
            Self::Finetune => "finetune",
            Self::Eval => "eval",
            Self::Mrc => "mrc",
            Self::Saliency => "saliency",
            Self::Vdr => "vdr",
            Self::Sir => "sir",
            Self::Report => "report",
            Self::Pipeline => "pipeline",
        }
    }

    pub const STEPS: [Command; 10] = [
        Self::GenerateData,
        Self::Train,
        Self::Induce,
        Self::Finetune,
        Self::Eval,
        Self::Mrc,
        Self::Saliency,
        Self::Vdr,
        Self::Sir,
        Self::Report,
    ];
}

/// The configuration file with command-line overrides applied, validated.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.mode = Some(mode.into());
    }
    if let Some(m) = cli.sir_mode {
        cfg.sir.mode = Some(m);
    }
    if cli.monotone {
        cfg.mrc.monotone = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli, args: Vec<String>) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        // Fails only if a pool already exists, e.g. a second call in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let ctx = commands::Ctx { cfg, args };
    match cli.command {
        Command::Pipeline => {
            for step in Command::STEPS {
                commands::run_step(&ctx, step)?;
            }
            Ok(())
        }
        step => commands::run_step(&ctx, step),
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .try_init();
    match run(&cli, args.into_iter().skip(1).collect()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("segnbdt").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 3, "out": "a", "sir": {"mode": "zero"}}"#).unwrap();
        let p = path.to_str().unwrap();
        let cfg = resolve_config(&parse(&["--config", p, "eval"])).unwrap();
        assert_eq!((cfg.seed, cfg.out.clone()), (3, PathBuf::from("a")));
        let cfg = resolve_config(&parse(&[
            "--config", p, "--seed", "9", "--out", "b", "--sir-mode", "shuffle", "--mode", "hard", "--monotone", "mrc",
        ]))
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.out, PathBuf::from("b"));
        assert_eq!(cfg.sir.mode, Some(SirModeName::Shuffle));
        assert_eq!(cfg.mode, Some(InferenceMode::Hard));
        assert!(cfg.mrc.monotone);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(main_with_args(vec!["segnbdt".into(), "--bogus".into()]), 1);
        assert_eq!(main_with_args(vec!["segnbdt".into(), "--help".into()]), 0);
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"mrc": {"beta": 0}}"#).unwrap();
        let code = main_with_args(vec![
            "segnbdt".into(),
            "--config".into(),
            bad.to_string_lossy().into_owned(),
            "eval".into(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn report_without_finetune_names_the_dependency() {
        let dir = tempfile::tempdir().unwrap();
        let cli = parse(&["--out", dir.path().to_str().unwrap(), "report"]);
        match run(&cli, vec![]) {
            Err(CliError::Config(msg)) => assert!(msg.contains("finetune"), "{msg}"),
            other => panic!("expected a config error, got {other:?}"),
        }
        assert!(!dir.path().join("report").exists());
    }
}
