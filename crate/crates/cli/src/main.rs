mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Failure;
use config::{Overrides, RunConfig};

/// Few-shot multi-domain text classification: ingest domains, meta-train
/// prototype learners and run the K-shot evaluation protocol.
#[derive(Parser, Debug)]
#[command(name = "protofuse", version)]
struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate and preprocess a manifest + records pair into a dataset file.
    Ingest,
    /// Masked-language-model pretraining on the training domains.
    Pretrain,
    /// Episodic meta-training; writes a checkpoint and a JSON-lines loss log.
    MetaTrain,
    /// K-shot fine-tuning and macro-F1 over every (K, seed) cell of a recipe.
    Evaluate,
    /// Summarise report files and redraw their CSV and plot.
    Report {
        /// Report JSON files written by `evaluate`.
        inputs: Vec<PathBuf>,
    },
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides).map_err(Failure::Usage)?;
    match &cli.command {
        Command::Ingest => commands::ingest(&cfg),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::MetaTrain => commands::meta_train(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Report { inputs } => commands::report(&cfg, inputs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use std::collections::BTreeSet;

    fn leaf_keys(prefix: &str, v: &serde_json::Value, out: &mut BTreeSet<String>) {
        match v.as_object() {
            // fusion strategy and section tables recurse; everything else is a leaf
            Some(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    leaf_keys(&key, child, out);
                }
            }
            None => {
                out.insert(prefix.to_string());
            }
        }
    }

    #[test]
    fn flags_and_keys_are_bijective() {
        let mut keys = BTreeSet::new();
        leaf_keys("", &serde_json::to_value(RunConfig::default()).unwrap(), &mut keys);
        let mapped: BTreeSet<String> = config::FLAG_KEYS.iter().map(|(_, k)| k.to_string()).collect();
        assert_eq!(mapped.len(), config::FLAG_KEYS.len(), "a key is mapped twice");
        assert_eq!(keys, mapped);

        let cmd = Cli::command();
        let flags: BTreeSet<String> = cmd
            .get_arguments()
            .filter_map(|a| a.get_long().map(str::to_string))
            .filter(|f| f != "config" && f != "help" && f != "version")
            .collect();
        let declared: BTreeSet<String> = config::FLAG_KEYS.iter().map(|(f, _)| f.replace('_', "-")).collect();
        assert_eq!(flags, declared);
    }

    #[test]
    fn flag_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\n[meta]\nepochs = 2\ntasks = 7\n").unwrap();
        let cli = Cli::try_parse_from([
            "protofuse",
            "--config",
            path.to_str().unwrap(),
            "meta-train",
            "--epochs",
            "4",
            "--fusion",
            "joint",
            "--joint-heads",
            "4",
        ])
        .unwrap();
        let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides).unwrap();
        assert_eq!((cfg.seed, cfg.meta.epochs, cfg.meta.tasks), (3, 4, 7));
        assert_eq!(cfg.fusion.kind.to_string(), "joint");
    }

    #[test]
    fn list_flags_split_on_commas() {
        let cli = Cli::try_parse_from(["protofuse", "evaluate", "--k", "16,64", "--seeds", "1,2,3"]).unwrap();
        let cfg = RunConfig::resolve(None, &cli.overrides).unwrap();
        assert_eq!(cfg.evaluate.k, vec![16, 64]);
        assert_eq!(cfg.evaluate.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn bare_binary_flag_sets_true() {
        let cli = Cli::try_parse_from(["protofuse", "ingest", "--binary", "--neutral", "Normal"]).unwrap();
        let cfg = RunConfig::resolve(None, &cli.overrides).unwrap();
        assert!(cfg.ingest.binary);
        assert_eq!(cfg.binary.neutral, vec!["Normal".to_string()]);
    }
}
