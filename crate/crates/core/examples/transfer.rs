//! Few-shot transfer on generated domains: meta-trained prototypes against an
//! untrained encoder, with and without joint definition fusion.
//!
//! Knobs are read from environment variables (see `knob` calls below).

use std::time::Instant;

use protofuse::corpus::{holdout_split, kshot_sample};
use protofuse::encoder::{build_vocab, EncoderConfig};
use protofuse::evaluate::macro_f1;
use protofuse::fusion::{FusionKind, FusionStrategy, JointVariant};
use protofuse::metalearn::{meta_train, predict, supervised_finetune, Algorithm, FineTuneConfig, HeadKind, MetaConfig};
use protofuse::params::ComponentRates;
use protofuse::synthetic::{generate, SyntheticConfig};
use protofuse::Model;

fn knob<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> protofuse::Result<()> {
    let synth = SyntheticConfig {
        fresh_test_markers: knob("FRESH", false),
        markers_per_text: knob("MARKERS", 1),
        marker_pool: knob("MARKER_POOL", 24),
        topic_tokens_per_text: knob("TOPIC_TOKENS", 5),
        test_classes: knob("TEST_CLASSES", 2),
        neutral_label: knob("NEUTRAL", false).then(|| "none".to_string()),
        ..Default::default()
    };
    let suite = generate(&synth, knob("DATA_SEED", 7))?;
    let vocab = build_vocab(&suite.corpus(), 1000);
    let enc = EncoderConfig {
        d_model: knob("D", 24),
        n_layers: knob("LAYERS", 1),
        n_heads: 2,
        max_len: knob("MAX_LEN", 20),
        dropout: 0.0,
        seed: 0,
    };
    let (train_side, holdout) = holdout_split(&suite.test, 0.2, 0)?;
    let k = knob("K", 16);
    let seeds: Vec<u64> = (1..=knob("SEEDS", 3)).collect();
    let meta = MetaConfig {
        meta_epochs: knob("EPOCHS", 2),
        tasks_per_epoch: knob("TASKS", 100),
        k_choices: vec![4, 8, 16],
        outer_lr: knob("LR", 3e-3),
        ..Default::default()
    };
    let ft_epochs = knob("FT_EPOCHS", 0);
    let eval = |model: &Model, label: &str| -> protofuse::Result<()> {
        let mut scores = Vec::new();
        for &s in &seeds {
            let (kshot, _) = kshot_sample(&train_side, k, s)?;
            let cfg = FineTuneConfig {
                epochs: ft_epochs,
                seed: s,
                rates: ComponentRates::uniform(knob("FT_LR", 1e-3)),
                ..Default::default()
            };
            let ft = supervised_finetune(model.clone(), &kshot, HeadKind::Prototype, &cfg)?;
            let preds = predict(&ft, &holdout.texts())?;
            scores.push(macro_f1(&preds, &holdout.labels(), holdout.n_classes())?);
        }
        println!(
            "{label:>28} K={k}: {:?} mean {:.3}",
            scores,
            scores.iter().sum::<f64>() / scores.len() as f64
        );
        Ok(())
    };
    let kinds: Vec<String> = std::env::var("KINDS")
        .unwrap_or_else(|_| "none,joint".into())
        .split(',')
        .map(String::from)
        .collect();
    for kind in kinds {
        let (kind, variant) = match kind.as_str() {
            "joint_standard" => (FusionKind::Joint, JointVariant::Standard),
            other => (other.parse()?, JointVariant::Literal),
        };
        let fusion = FusionStrategy {
            kind,
            joint_variant: variant,
            ..Default::default()
        };
        let joint_seeds: Vec<u64> = std::env::var("JOINT_SEEDS")
            .map(|v| v.split(',').filter_map(|s| s.parse().ok()).collect())
            .unwrap_or_default();
        let models = if joint_seeds.is_empty() {
            vec![(
                "shared".to_string(),
                Model::init(enc.clone(), vocab.clone(), fusion, 11)?,
            )]
        } else {
            let mut out = Vec::new();
            for s in joint_seeds {
                let mut m = Model::init(enc.clone(), vocab.clone(), Default::default(), 11)?;
                m.set_fusion(fusion, s)?;
                out.push((format!("joint seed {s}"), m));
            }
            out
        };
        for (tag, model) in models {
            if knob("EVAL_UNTRAINED", true) {
                eval(&model, &format!("untrained {kind}/{variant} {tag}"))?;
            }
            let t = Instant::now();
            let state = meta_train(Algorithm::Protonet, &suite.train, model, meta.clone(), &mut |_| {})?;
            println!(
                "  meta-trained in {:.1}s, epoch losses {:?} acc {:?}",
                t.elapsed().as_secs_f64(),
                state.epoch_losses,
                state.epoch_accuracies
            );
            eval(&state.best_model(), &format!("protonet {kind}/{variant} {tag}"))?;
        }
    }
    Ok(())
}
