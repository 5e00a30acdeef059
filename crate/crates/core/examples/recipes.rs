//! Runs the K-shot protocol for several recipes on generated domains and
//! prints mean macro-F1 per K.
//!
//! `RECIPES=untrained,mldg K=16,32,64,128 cargo run --release --example recipes`

use std::time::Instant;

use protofuse::encoder::{build_vocab, EncoderConfig};
use protofuse::evaluate::{build_recipe_model, run_protocol, ProtocolSpec, Recipe, RecipeRunner, RecipeSettings};
use protofuse::metalearn::MetaConfig;
use protofuse::synthetic::{generate, SyntheticConfig};
use protofuse::Model;

fn knob<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn list<T: std::str::FromStr>(name: &str, default: &str) -> Vec<T> {
    std::env::var(name)
        .unwrap_or_else(|_| default.into())
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect()
}

fn main() -> protofuse::Result<()> {
    let synth = SyntheticConfig {
        fresh_test_markers: knob("FRESH", false),
        ..Default::default()
    };
    let suite = generate(&synth, knob("DATA_SEED", 7))?;
    let vocab = build_vocab(&suite.corpus(), 1000);
    let enc = EncoderConfig {
        d_model: 24,
        n_layers: 1,
        n_heads: 2,
        max_len: 20,
        dropout: 0.0,
        seed: 0,
    };
    let mut settings = RecipeSettings {
        meta: MetaConfig {
            meta_epochs: knob("EPOCHS", 5),
            tasks_per_epoch: knob("TASKS", 300),
            k_choices: vec![4, 8, 16],
            outer_lr: knob("LR", 3e-3),
            ..Default::default()
        },
        ..Default::default()
    };
    settings.finetune.epochs = knob("FT_EPOCHS", 3);
    settings.finetune.rates.head = knob("FT_HEAD_LR", settings.finetune.rates.head);
    settings.mlm.epochs = knob("MLM_EPOCHS", 5);
    let spec = ProtocolSpec {
        k_values: list("K", "16,32,64,128"),
        seeds: list("SEEDS", "1,2,3,4,5"),
        ..Default::default()
    };
    for recipe in list::<Recipe>("RECIPES", "untrained") {
        let t = Instant::now();
        let base = Model::init(enc.clone(), vocab.clone(), Default::default(), 11)?;
        let model = build_recipe_model(recipe, base, &suite.train, &settings, None)?;
        let mut runner = RecipeRunner {
            recipe,
            model,
            settings: settings.clone(),
        };
        let report = run_protocol(&spec, &suite.test, &mut runner, recipe.name(), serde_json::json!({}), 1)?;
        let means: Vec<String> = report
            .summary
            .iter()
            .map(|s| {
                format!(
                    "K={} {:.3}±{:.3}",
                    s.k,
                    s.mean.unwrap_or(f64::NAN),
                    s.std.unwrap_or(f64::NAN)
                )
            })
            .collect();
        println!(
            "{:>22} ({:.0}s): {}",
            recipe.name(),
            t.elapsed().as_secs_f64(),
            means.join("  ")
        );
    }
    Ok(())
}
