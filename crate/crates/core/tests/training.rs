//! End-to-end behaviour of meta-training, checkpoints, fine-tuning and selection
//! on small generated domains.

use protofuse::corpus::Dataset;
use protofuse::encoder::{build_vocab, EncoderConfig};
use protofuse::evaluate::{select_hyperparams, Selection};
use protofuse::fusion::{FusionKind, FusionStrategy};
use protofuse::metalearn::finetune::dataset_accuracy;
use protofuse::metalearn::{
    meta_train, predict, supervised_finetune, Algorithm, FineTuneConfig, HeadKind, MetaConfig, TrainEvent,
};
use protofuse::params::ComponentRates;
use protofuse::synthetic::{generate, SyntheticConfig, SyntheticSuite};
use protofuse::{LearnerState, Model};

fn suite() -> SyntheticSuite {
    let cfg = SyntheticConfig {
        train_domains: 3,
        train_per_class: 24,
        test_per_class: 40,
        ..Default::default()
    };
    generate(&cfg, 3).unwrap()
}

fn model(suite: &SyntheticSuite, fusion: FusionKind) -> Model {
    let enc = EncoderConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_len: 16,
        dropout: 0.1,
        seed: 0,
    };
    let fusion = FusionStrategy {
        joint_heads: 2,
        ..FusionStrategy::of(fusion)
    };
    Model::init(enc, build_vocab(&suite.corpus(), 1000), fusion, 5).unwrap()
}

fn meta_config() -> MetaConfig {
    MetaConfig {
        meta_epochs: 2,
        tasks_per_epoch: 4,
        k_choices: vec![2, 4],
        inner_steps: 2,
        outer_lr: 3e-3,
        seed: 9,
        ..Default::default()
    }
}

fn run(algorithm: Algorithm, fusion: FusionKind, s: &SyntheticSuite) -> (LearnerState, Vec<TrainEvent>) {
    let mut events = Vec::new();
    let state = meta_train(algorithm, &s.train, model(s, fusion), meta_config(), &mut |e| {
        events.push(e.clone())
    })
    .unwrap();
    (state, events)
}

#[test]
fn meta_training_is_deterministic_and_accounts_for_every_task() {
    let s = suite();
    for (algorithm, fusion) in [
        (Algorithm::Protonet, FusionKind::Joint),
        (Algorithm::Protomaml, FusionKind::Label),
        (Algorithm::Mldg, FusionKind::None),
    ] {
        let (a, events) = run(algorithm, fusion, &s);
        let (b, again) = run(algorithm, fusion, &s);
        assert_eq!(a, b, "{algorithm} is not reproducible");
        assert_eq!(events, again);
        assert_eq!(a.epochs_done, 2);
        assert_eq!(events.len() + a.skipped, 8);
        let per_task = if algorithm == Algorithm::Mldg { 2 } else { 1 };
        assert_eq!(a.episodes_drawn, 8 * per_task);
        assert!(events.iter().all(|e| e.loss.is_finite() && [2, 4].contains(&e.k)));
        assert_eq!(a.epoch_losses.len(), 2);
        let best = a.best.as_ref().unwrap();
        assert_eq!(best.loss, a.epoch_losses.iter().cloned().fold(f64::INFINITY, f64::min));
    }
}

#[test]
fn checkpoints_round_trip_bitwise_and_resume_exactly() {
    let s = suite();
    let dir = tempfile::tempdir().unwrap();
    let (full, _) = run(Algorithm::Protonet, FusionKind::Joint, &s);

    let mut half = LearnerState::new(
        Algorithm::Protonet,
        model(&s, FusionKind::Joint),
        MetaConfig {
            meta_epochs: 1,
            ..meta_config()
        },
    )
    .unwrap();
    half.train(&s.train, &mut |_| {}).unwrap();
    let path = dir.path().join("half.json");
    half.save(&path).unwrap();
    let mut resumed = LearnerState::load(&path).unwrap();
    assert_eq!(resumed, half);
    let saved = std::fs::read(&path).unwrap();
    resumed.save(&dir.path().join("again.json")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("again.json")).unwrap(), saved);

    resumed.config.meta_epochs = 2;
    resumed.train(&s.train, &mut |_| {}).unwrap();
    let mut full_cfg = full.clone();
    full_cfg.config.meta_epochs = 2;
    assert_eq!(resumed, full_cfg);
}

#[test]
fn mldg_needs_two_domains() {
    let s = suite();
    let err = meta_train(
        Algorithm::Mldg,
        &s.train[..1],
        model(&s, FusionKind::None),
        meta_config(),
        &mut |_| {},
    );
    assert!(err.is_err());
}

#[test]
fn zero_epoch_finetuning_leaves_the_encoder_alone() {
    let s = suite();
    let m = model(&s, FusionKind::None);
    let (kshot, _) = protofuse::corpus::kshot_sample(&s.test, 4, 1).unwrap();
    let cfg = FineTuneConfig {
        epochs: 0,
        ..Default::default()
    };
    let ft = supervised_finetune(m.clone(), &kshot, HeadKind::Prototype, &cfg).unwrap();
    assert_eq!(ft.model.params, m.params);
    assert!(ft.lr_trace.is_empty() && ft.epoch_losses.is_empty());

    let ft = supervised_finetune(m.clone(), &kshot, HeadKind::Softmax, &cfg).unwrap();
    assert_eq!(ft.model.params.restrict_to(&m.params), m.params);
}

#[test]
fn finetuning_fits_a_separable_toy_set_and_anneals_its_rate() {
    let s = suite();
    let (kshot, _) = protofuse::corpus::kshot_sample(&s.test, 8, 2).unwrap();
    let cfg = FineTuneConfig {
        epochs: 30,
        rates: ComponentRates::uniform(3e-3),
        batch_size: 8,
        ..Default::default()
    };
    let ft = supervised_finetune(model(&s, FusionKind::None), &kshot, HeadKind::Softmax, &cfg).unwrap();
    assert_eq!(dataset_accuracy(&ft, &kshot).unwrap(), 1.0);

    let steps = 30 * 2;
    assert_eq!(ft.lr_trace.len(), steps);
    for (t, &r) in ft.lr_trace.iter().enumerate() {
        let oracle = 1e-5 + (3e-3 - 1e-5) * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / steps as f64).cos());
        assert!((r - oracle).abs() < 1e-15, "step {t}: {r} vs {oracle}");
    }
    let losses = &ft.epoch_losses;
    assert!(losses.last().unwrap() < &losses[0]);
}

fn constant_runner(label: usize) -> impl Fn(&usize, &Dataset, &Dataset) -> protofuse::Result<Vec<usize>> {
    move |c: &usize, _train: &Dataset, val: &Dataset| Ok(if *c == label { val.labels() } else { vec![0; val.len()] })
}

#[test]
fn hyperparameter_selection_picks_the_best_and_breaks_ties_early() {
    let s = suite();
    let Selection { index, scores } =
        select_hyperparams(&[0usize, 1, 2], &s.test, 4, 8, 3, constant_runner(1)).unwrap();
    assert_eq!(index, 1);
    assert_eq!(scores[1], 1.0);
    assert!(scores[0] < 1.0 && scores[0] == scores[2]);

    let tie = select_hyperparams(&[5usize, 6], &s.test, 4, 8, 3, constant_runner(9)).unwrap();
    assert_eq!(tie.index, 0);
    assert!(select_hyperparams::<usize>(&[], &s.test, 4, 8, 3, constant_runner(0)).is_err());

    // the selection slice never overlaps the fine-tuning sample
    let seen = std::cell::RefCell::new(None);
    select_hyperparams(&[0usize], &s.test, 4, 8, 3, |_, train, val| {
        let a: std::collections::BTreeSet<usize> = train.examples.iter().map(|e| e.ordinal).collect();
        *seen.borrow_mut() = Some(val.examples.iter().all(|e| !a.contains(&e.ordinal)) && val.len() == 16);
        predict(
            &supervised_finetune(
                model(&s, FusionKind::None),
                train,
                HeadKind::Prototype,
                &FineTuneConfig {
                    epochs: 0,
                    ..Default::default()
                },
            )?,
            &val.texts(),
        )
    })
    .unwrap();
    assert_eq!(*seen.borrow(), Some(true));
}
