use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};

use protofuse::corpus::{collapse_binary, load_domain, Dataset};
use protofuse::encoder::build_vocab;
use protofuse::encoder::mlm::mlm_pretrain;
use protofuse::evaluate::{
    build_recipe_model, emit_report, load_report, run_protocol, EvaluationReport, Recipe, RecipeRunner,
};
use protofuse::fusion::{definition_text, FusionStrategy};
use protofuse::metalearn::LearnerState;
use protofuse::Model;

use crate::config::RunConfig;

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, configuration or input data (exit 2).
    Usage(anyhow::Error),
    /// The pipeline itself failed (exit 3).
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

pub type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    path.as_deref()
        .ok_or_else(|| usage(anyhow!("missing --{flag} (or the matching config key)")))
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load(path).map_err(usage)
}

fn load_train(cfg: &RunConfig) -> Result<Vec<Dataset>, Failure> {
    cfg.paths.train.iter().map(|p| load_dataset(p)).collect()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let body = serde_json::to_string(value).map_err(runtime)?;
    fs::write(path, body)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn create_out(cfg: &RunConfig) -> Result<&Path, Failure> {
    let out = cfg.paths.out.as_path();
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(runtime)?;
    Ok(out)
}

/// The pretrained model from `paths.model`, or a fresh one whose vocabulary
/// covers the texts and definitions of `datasets`.
fn base_model(cfg: &RunConfig, datasets: &[&Dataset]) -> Result<Model, Failure> {
    if let Some(path) = &cfg.paths.model {
        let body = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(usage)?;
        return serde_json::from_str(&body)
            .with_context(|| format!("parsing model {}", path.display()))
            .map_err(usage);
    }
    let mut corpus = Vec::new();
    for d in datasets {
        corpus.extend(d.examples.iter().map(|e| e.text.clone()));
        corpus.extend(d.manifest.labels.iter().map(definition_text));
    }
    let vocab = build_vocab(&corpus, cfg.encoder.vocab_size);
    Model::init(cfg.encoder_config(), vocab, FusionStrategy::default(), cfg.seed).map_err(usage)
}

fn class_summary(d: &Dataset) -> String {
    d.manifest
        .labels
        .iter()
        .zip(d.class_counts())
        .map(|(l, n)| format!("{}={n}", l.name))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn ingest(cfg: &RunConfig) -> Outcome {
    let manifest = required(&cfg.paths.manifest, "manifest")?;
    let records = required(&cfg.paths.records, "records")?;
    let mut data = load_domain(manifest, records).map_err(usage)?;
    let mut name = data.domain_id().to_string();
    if cfg.ingest.binary {
        let neutral: Vec<&str> = cfg.binary.neutral.iter().map(String::as_str).collect();
        data = collapse_binary(&data, &neutral).map_err(usage)?;
        name.push_str("_binary");
    }
    let out = create_out(cfg)?;
    let path = out.join(format!("{name}.json"));
    data.save(&path).map_err(runtime)?;
    println!(
        "{} examples of {} -> {} ({})",
        data.len(),
        data.domain_id(),
        path.display(),
        class_summary(&data)
    );
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Outcome {
    let train = load_train(cfg)?;
    if train.is_empty() {
        return Err(usage(anyhow!("pretrain needs at least one --train dataset")));
    }
    let test = cfg.paths.test.as_deref().map(load_dataset).transpose()?;
    let all: Vec<&Dataset> = train.iter().chain(test.as_ref()).collect();
    let mut model = base_model(cfg, &all)?;
    let mlm = cfg.mlm_config();
    for d in &train {
        let report =
            mlm_pretrain(&model.arch.encoder, &model.arch.vocab, &mut model.params, d, &mlm).map_err(runtime)?;
        println!("mlm on {}: final loss {:.4}", d.domain_id(), report.final_loss);
    }
    let out = create_out(cfg)?;
    let path = out.join("model.json");
    write_json(&path, &model)?;
    println!("model -> {}", path.display());
    Ok(())
}

pub fn meta_train(cfg: &RunConfig) -> Outcome {
    let train = load_train(cfg)?;
    if train.is_empty() {
        return Err(usage(anyhow!("meta-train needs at least one --train dataset")));
    }
    let mut state = match &cfg.paths.checkpoint {
        Some(path) if path.exists() => {
            let state = LearnerState::load(path).map_err(usage)?;
            log::info!("resuming {} after {} epochs", state.algorithm, state.epochs_done);
            state
        }
        _ => {
            let test = cfg.paths.test.as_deref().map(load_dataset).transpose()?;
            let all: Vec<&Dataset> = train.iter().chain(test.as_ref()).collect();
            let mut model = base_model(cfg, &all)?;
            model.set_fusion(cfg.fusion, cfg.seed).map_err(usage)?;
            LearnerState::new(cfg.meta.algo, model, cfg.meta_config()).map_err(usage)?
        }
    };
    let out = create_out(cfg)?;
    let log_path = out.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))
        .map_err(runtime)?;
    let mut write_error = None;
    let result = state.train(&train, &mut |event| {
        if write_error.is_none() {
            let line = serde_json::to_string(event).expect("event serializes");
            if let Err(e) = writeln!(log_file, "{line}") {
                write_error = Some(e);
            }
        }
    });
    result.map_err(runtime)?;
    if let Some(e) = write_error {
        return Err(runtime(anyhow!(e).context(format!("writing {}", log_path.display()))));
    }
    let path = out.join("checkpoint.json");
    state.save(&path).map_err(runtime)?;
    let losses: Vec<String> = state.epoch_losses.iter().map(|l| format!("{l:.4}")).collect();
    println!(
        "{} / {} fusion: epoch losses [{}], {} skipped -> {}",
        state.algorithm,
        state.model.arch.fusion.kind,
        losses.join(", "),
        state.skipped,
        path.display()
    );
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Outcome {
    let recipe: Recipe = cfg.evaluate.recipe.parse().map_err(usage)?;
    let test = load_dataset(required(&cfg.paths.test, "test")?)?;
    let train = load_train(cfg)?;
    let checkpoint = match (&cfg.paths.checkpoint, recipe.meta_algorithm()) {
        (Some(path), Some(_)) => Some(LearnerState::load(path).map_err(usage)?),
        _ => None,
    };
    let needs_train = (recipe.meta_algorithm().is_some() && checkpoint.is_none()) || recipe == Recipe::Binary;
    if needs_train && train.is_empty() {
        return Err(usage(anyhow!(
            "recipe {recipe} needs training domains (--train) or a matching --checkpoint"
        )));
    }
    let all: Vec<&Dataset> = train.iter().chain(std::iter::once(&test)).collect();
    let base = base_model(cfg, &all)?;
    let settings = cfg.recipe_settings();
    let model = build_recipe_model(recipe, base, &train, &settings, checkpoint.as_ref()).map_err(runtime)?;
    let mut runner = RecipeRunner {
        recipe,
        model,
        settings,
    };
    let report = run_protocol(
        &cfg.protocol(),
        &test,
        &mut runner,
        recipe.name(),
        cfg.report_echo(),
        cfg.jobs,
    )
    .map_err(runtime)?;
    let files = emit_report(&report, &cfg.paths.out).map_err(runtime)?;
    print_summary(&report);
    println!("report -> {}", files.json.display());
    Ok(())
}

fn print_summary(report: &EvaluationReport) {
    println!(
        "{} on {} (config {})",
        report.recipe,
        report.domain,
        &report.config_hash[..12]
    );
    println!("{:>6} {:>8} {:>8} {:>5}", "K", "mean", "std", "n");
    for s in &report.summary {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let flag = if s.missing > 0 {
            format!("  ({} missing)", s.missing)
        } else {
            String::new()
        };
        println!(
            "{:>6} {:>8} {:>8} {:>5}{flag}",
            s.k,
            fmt(s.mean),
            fmt(s.std),
            s.completed
        );
    }
}

/// Prints each report and rewrites its CSV and plot into the output directory.
pub fn report(cfg: &RunConfig, inputs: &[PathBuf]) -> Outcome {
    if inputs.is_empty() {
        return Err(usage(anyhow!("report needs at least one report file")));
    }
    let out = create_out(cfg)?;
    for path in inputs {
        let report = load_report(path).map_err(usage)?;
        print_summary(&report);
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{}_{}", report.domain, report.recipe));
        fs::write(out.join(format!("{stem}.csv")), report.to_csv()).map_err(runtime)?;
        fs::write(out.join(format!("{stem}.svg")), report.to_svg()).map_err(runtime)?;
    }
    Ok(())
}
