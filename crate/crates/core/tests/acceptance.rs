//! Acceptance gate. One test per criterion; each prints a single
//! `criterion N: PASS|FAIL ...` line with the measured quantities
//! (run with `--nocapture` to see them alongside the harness verdicts).

use std::time::Instant;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protofuse::autodiff::Tape;
use protofuse::corpus::{preprocess_text, Dataset};
use protofuse::encoder::{build_vocab, encode, encode_on_tape, tokenize, EncoderConfig};
use protofuse::evaluate::{
    build_recipe_model, emit_report, macro_f1, macro_f1_in, run_protocol, CellRunner, EvaluationReport, ProtocolSpec,
    Recipe, RecipeRunner, RecipeSettings,
};
use protofuse::fusion::{FusionKind, FusionStrategy, JOINT_PREFIX};
use protofuse::metalearn::episode::Episode;
use protofuse::metalearn::protomaml::ProtoMamlConfig;
use protofuse::metalearn::{
    compute_prototypes, fo_protomaml_step, mldg_update, predict, proto_classify, proto_episode_loss,
    protomaml_head_init, supervised_finetune, Distance, EpisodeSampler, FineTuneConfig, HeadKind, MetaConfig,
};
use protofuse::synthetic::{generate, SyntheticConfig, SyntheticSuite};
use protofuse::{Matrix, Model, ParamSet, Prototypes};

fn report(n: u32, ok: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Softmax over `-d(q, v_c)` evaluated one class at a time.
fn scalar_distribution(q: &[f64], protos: &Matrix, squared: bool) -> Vec<f64> {
    let neg: Vec<f64> = (0..protos.rows())
        .map(|c| {
            let mut s = 0.0;
            for j in 0..q.len() {
                let diff = q[j] - protos.get(c, j);
                s += diff * diff;
            }
            if squared {
                -s
            } else {
                -s.sqrt()
            }
        })
        .collect();
    let m = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = neg.iter().map(|v| (v - m).exp()).sum();
    neg.iter().map(|v| (v - m).exp() / z).collect()
}

#[test]
fn criterion_01_prototype_means() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(1..=32);
        let d = rng.random_range(1..=64);
        let mut classes: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
        classes.shuffle(&mut rng);
        let vectors = random_matrix(&mut rng, classes.len(), d, 10.0);
        let protos = compute_prototypes(&vectors, &classes, n).unwrap();
        for c in 0..n {
            for j in 0..d {
                let mut sum = 0.0;
                let mut count = 0;
                for (i, &ci) in classes.iter().enumerate() {
                    if ci == c {
                        sum += vectors.get(i, j);
                        count += 1;
                    }
                }
                worst = worst.max((protos.vectors.get(c, j) - sum / count as f64).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst < 1e-9 && secs < 10.0,
        format!("max abs error {worst:.2e} over 1000 supports in {secs:.2}s"),
    );
}

#[test]
fn criterion_02_distance_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut argmax_mismatch = 0;
    for case in 0..1000 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=32);
        let protos = Prototypes {
            vectors: random_matrix(&mut rng, n, d, 3.0),
        };
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (distance, squared) = if case % 2 == 0 {
            (Distance::Euclidean, false)
        } else {
            (Distance::SquaredEuclidean, true)
        };
        let got = proto_classify(&q, &protos, distance).unwrap();
        let want = scalar_distribution(&q, &protos.vectors, squared);
        for (a, b) in got.probs.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        let mut nearest = 0;
        let mut best = f64::INFINITY;
        for c in 0..n {
            let dist: f64 = (0..d).map(|j| (q[j] - protos.vectors.get(c, j)).powi(2)).sum();
            if dist < best {
                best = dist;
                nearest = c;
            }
        }
        let argmax = (0..n).fold(0, |b, c| if got.probs[c] > got.probs[b] { c } else { b });
        if got.predicted != nearest || argmax != nearest {
            argmax_mismatch += 1;
        }
    }
    report(
        2,
        worst < 1e-9 && argmax_mismatch == 0,
        format!("max abs prob error {worst:.2e}, {argmax_mismatch} argmax mismatches over 1000 instances"),
    );
}

#[test]
fn criterion_03_protomaml_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=6);
        let d = rng.random_range(2..=24);
        let protos = Prototypes {
            vectors: random_matrix(&mut rng, n, d, 1.0),
        };
        let head = protomaml_head_init(&protos);
        for _ in 0..100 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = head.softmax(&x);
            let want = scalar_distribution(&x, &protos.vectors, true);
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    report(
        3,
        worst < 1e-6,
        format!("max abs diff {worst:.2e} over 100 x 100 queries"),
    );
}

fn tiny_encoder(d: usize, layers: usize, max_len: usize) -> EncoderConfig {
    EncoderConfig {
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        max_len,
        dropout: 0.0,
        seed: 0,
    }
}

fn small_suite(seed: u64) -> SyntheticSuite {
    let cfg = SyntheticConfig {
        train_domains: 3,
        train_per_class: 20,
        test_per_class: 20,
        ..Default::default()
    };
    generate(&cfg, seed).unwrap()
}

#[test]
fn criterion_04_protomaml_without_inner_steps() {
    let suite = small_suite(4);
    let vocab = build_vocab(&suite.corpus(), 500);
    let model = Model::init(tiny_encoder(8, 1, 16), vocab, FusionStrategy::default(), 4).unwrap();
    let domains: Vec<&Dataset> = suite.train.iter().collect();
    let mut sampler = EpisodeSampler::new(domains, vec![2, 3, 4], 44);
    let cfg = ProtoMamlConfig {
        inner_steps: 0,
        inner_lr: 1e-2,
    };
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for _ in 0..50 {
        let ep = sampler.draw().unwrap();
        let reference = proto_episode_loss(&model, &ep, Distance::SquaredEuclidean, None).unwrap();
        match fo_protomaml_step(&model, &ep, &cfg, None).unwrap() {
            Some(step) => worst = worst.max((step.query_loss - reference.loss).abs()),
            None => skipped += 1,
        }
    }
    report(
        4,
        worst < 1e-6 && skipped == 0,
        format!("max loss difference {worst:.2e} over 50 episodes ({skipped} skipped)"),
    );
}

#[test]
fn criterion_05_mldg_quadratic() {
    let mut theta = ParamSet::new();
    theta.insert("theta", Matrix::filled(1, 1, 1.0));
    let quadratic = |centre: f64| {
        move |p: &ParamSet| {
            let t = p.get("theta")?.get(0, 0);
            let mut g = ParamSet::new();
            g.insert("theta", Matrix::filled(1, 1, 2.0 * (t - centre)));
            Ok(((t - centre).powi(2), g))
        }
    };
    let updated = mldg_update(&theta, 0.1, 1.0, 0.1, quadratic(0.0), quadratic(1.0)).unwrap();
    let got = updated.get("theta").unwrap().get(0, 0);
    // θ' = θ − α·2θ, then θ − γ(2θ + β·2(θ' − 1))
    let (t, a, b, g) = (1.0f64, 0.1, 1.0, 0.1);
    let virt = t - a * 2.0 * t;
    let closed = t - g * (2.0 * t + b * 2.0 * (virt - 1.0));
    let err = (got - 0.84).abs().max((got - closed).abs());
    report(
        5,
        err < 1e-10,
        format!("theta_new = {got:.12} (closed form {closed:.12})"),
    );
}

/// Central differences on sampled coordinates; returns the worst relative
/// error `|a − n| / max(|a|, |n|, 1e-6)` and how many coordinates were checked.
fn check_gradient(
    params: &ParamSet,
    analytic: &ParamSet,
    names: &[String],
    coords: usize,
    seed: u64,
    loss: impl Fn(&ParamSet) -> f64,
) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let name = &names[rng.random_range(0..names.len())];
        let m = params.get(name).unwrap();
        let idx = rng.random_range(0..m.data().len());
        let mut plus = params.clone();
        plus.get_mut(name).unwrap().data_mut()[idx] += h;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().data_mut()[idx] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let a = analytic.get(name).map(|g| g.data()[idx]).unwrap_or(0.0);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    (worst, coords)
}

fn gradient_episode(suite: &SyntheticSuite, seed: u64) -> Episode {
    EpisodeSampler::new(vec![&suite.train[0]], vec![2], seed)
        .draw()
        .unwrap()
}

#[test]
fn criterion_06_gradient_checks() {
    let start = Instant::now();
    let suite = small_suite(6);
    let vocab = build_vocab(&suite.corpus(), 500);

    // (a) sum of the [CLS] state of a two-layer encoder
    let cfg = tiny_encoder(16, 2, 12);
    let model = Model::init(cfg.clone(), vocab.clone(), FusionStrategy::default(), 6).unwrap();
    let seq = tokenize(&suite.train[0].examples[0].text, &vocab, cfg.max_len);
    let mut tape = Tape::new();
    let states = encode_on_tape(&mut tape, &cfg, &model.params, &seq, None, None).unwrap();
    let cls = tape.select_rows(states, &[0]);
    let total = tape.sum_all(cls);
    tape.backward(total);
    let grads = tape.param_grads();
    let names: Vec<String> = model.params.names().cloned().collect();
    let (enc_err, enc_n) = check_gradient(&model.params, &grads, &names, 150, 61, |p| {
        encode(&cfg, p, &seq).unwrap().cls().iter().sum()
    });

    // (b) prototype episode loss, Euclidean distance
    let proto_cfg = tiny_encoder(8, 1, 12);
    let model = Model::init(proto_cfg, vocab.clone(), FusionStrategy::default(), 7).unwrap();
    let ep = gradient_episode(&suite, 62);
    let analytic = proto_episode_loss(&model, &ep, Distance::Euclidean, None)
        .unwrap()
        .grads;
    let names: Vec<String> = model.params.names().cloned().collect();
    let probe = |p: &ParamSet| {
        let mut m = model.clone();
        m.params = p.clone();
        proto_episode_loss(&m, &ep, Distance::Euclidean, None).unwrap().loss
    };
    let (proto_err, proto_n) = check_gradient(&model.params, &analytic, &names, 120, 62, probe);

    // (c) joint attention parameters under definition fusion
    let joint = FusionStrategy {
        kind: FusionKind::Joint,
        joint_heads: 2,
        ..Default::default()
    };
    let model = Model::init(tiny_encoder(8, 1, 12), vocab, joint, 8).unwrap();
    let analytic = proto_episode_loss(&model, &ep, Distance::Euclidean, None)
        .unwrap()
        .grads;
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| n.starts_with(JOINT_PREFIX))
        .cloned()
        .collect();
    let probe = |p: &ParamSet| {
        let mut m = model.clone();
        m.params = p.clone();
        proto_episode_loss(&m, &ep, Distance::Euclidean, None).unwrap().loss
    };
    let (joint_err, joint_n) = check_gradient(&model.params, &analytic, &names, 120, 63, probe);

    let secs = start.elapsed().as_secs_f64();
    report(
        6,
        enc_err < 1e-3 && proto_err < 1e-3 && joint_err < 1e-3 && secs < 120.0,
        format!(
            "max rel error encoder {enc_err:.2e} ({enc_n} coords), episode {proto_err:.2e} ({proto_n}), \
             joint {joint_err:.2e} ({joint_n}) in {secs:.1}s"
        ),
    );
}

/// Per-class F1 from an explicit confusion matrix, in exact arithmetic.
fn confusion_oracle(preds: &[usize], golds: &[usize], n: usize) -> Ratio<i64> {
    let mut confusion = vec![vec![0i64; n]; n];
    for (&p, &g) in preds.iter().zip(golds) {
        confusion[g][p] += 1;
    }
    let mut total = Ratio::from_integer(0);
    for c in 0..n {
        let tp = confusion[c][c];
        let predicted: i64 = (0..n).map(|g| confusion[g][c]).sum();
        let actual: i64 = confusion[c].iter().sum();
        if tp == 0 {
            continue;
        }
        let p = Ratio::new(tp, predicted);
        let r = Ratio::new(tp, actual);
        total += Ratio::from_integer(2) * p * r / (p + r);
    }
    total / Ratio::from_integer(n as i64)
}

#[test]
fn criterion_07_macro_f1() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut mismatches = 0;
    let mut worst_float = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=7);
        let len = rng.random_range(1..=60);
        let golds: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
        let preds: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
        let want = confusion_oracle(&preds, &golds, n);
        let exact: Ratio<i64> = macro_f1_in(&preds, &golds, n).unwrap();
        if exact != want {
            mismatches += 1;
        }
        let float = macro_f1(&preds, &golds, n).unwrap();
        worst_float = worst_float.max((float - *want.numer() as f64 / *want.denom() as f64).abs());
    }
    let worked = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    let worked_ok = (worked - 0.7333).abs() < 1e-4 && (worked - 11.0 / 15.0).abs() < 1e-12;
    report(
        7,
        mismatches == 0 && worst_float < 1e-12 && worked_ok,
        format!(
            "{mismatches} exact mismatches over 1000 cases (float error {worst_float:.1e}); worked example {worked:.6}"
        ),
    );
}

#[test]
fn criterion_08_episode_sampler() {
    let suite = generate(&SyntheticConfig::default(), 8).unwrap();
    let domains: Vec<&Dataset> = suite.train.iter().collect();
    let mut sampler = EpisodeSampler::new(domains, vec![4, 16, 32, 64], 88);
    let mut violations = 0;
    for _ in 0..1000 {
        let ep = sampler.draw().unwrap();
        if ep.validate().is_err() {
            violations += 1;
        }
        let source = suite.train.iter().find(|d| d.domain_id() == ep.domain_id).unwrap();
        let mut support_ids = std::collections::HashSet::new();
        let mut counts = vec![(0usize, 0usize); ep.n_way];
        for (ex, c) in &ep.support {
            support_ids.insert(ex.ordinal);
            counts[*c].0 += 1;
        }
        for (ex, c) in &ep.query {
            if support_ids.contains(&ex.ordinal) {
                violations += 1;
            }
            counts[*c].1 += 1;
        }
        if counts.iter().any(|&(s, q)| s != ep.k_shot || q != ep.k_shot) || ep.n_way != source.n_classes() {
            violations += 1;
        }
        for (ex, c) in ep.support.iter().chain(&ep.query) {
            let original = source.examples.iter().find(|o| o.ordinal == ex.ordinal);
            if ex.domain_id != ep.domain_id || original.is_none_or(|o| o.text != ex.text || o.label_index != *c) {
                violations += 1;
            }
        }
    }
    report(
        8,
        violations == 0,
        format!("{violations} violations over 1000 episodes"),
    );
}

#[test]
fn criterion_09_preprocessing() {
    let goldens = [
        ("Check http://a.b NOW", "check <url> now"),
        ("b b b ", "b"),
        ("@john hi", "<user> hi"),
    ];
    let golden_failures: Vec<_> = goldens
        .iter()
        .filter(|(raw, want)| preprocess_text(raw) != *want)
        .map(|(raw, _)| (*raw, preprocess_text(raw)))
        .collect();
    let alphabet: Vec<char> = "ab B@#:/._-x 1\tÅé😀www.http".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut non_idempotent = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(0..40);
        let raw: String = (0..len)
            .map(|_| alphabet[rng.random_range(0..alphabet.len())])
            .collect();
        let once = preprocess_text(&raw);
        if preprocess_text(&once) != once {
            non_idempotent += 1;
        }
    }
    report(
        9,
        golden_failures.is_empty() && non_idempotent == 0,
        format!("golden failures {golden_failures:?}, {non_idempotent} non-idempotent of 10000"),
    );
}

/// Prototype-head cells on an arbitrary model (used for the untrained baseline).
struct PrototypeRunner {
    model: Model,
    finetune: FineTuneConfig,
}

impl CellRunner for PrototypeRunner {
    fn run_cell(&self, kshot: &Dataset, holdout: &Dataset, seed: u64) -> protofuse::Result<Vec<usize>> {
        let cfg = FineTuneConfig {
            seed,
            ..self.finetune.clone()
        };
        let ft = supervised_finetune(self.model.clone(), kshot, HeadKind::Prototype, &cfg)?;
        predict(&ft, &holdout.texts())
    }
}

fn transfer_settings() -> RecipeSettings {
    let mut settings = RecipeSettings {
        meta: MetaConfig {
            meta_epochs: 5,
            tasks_per_epoch: 300,
            k_choices: vec![4, 8, 16],
            outer_lr: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    settings.finetune.epochs = 3;
    settings
}

fn transfer_base(suite: &SyntheticSuite) -> Model {
    let enc = tiny_encoder(24, 1, 20);
    Model::init(enc, build_vocab(&suite.corpus(), 1000), FusionStrategy::default(), 11).unwrap()
}

fn mean_at(report: &EvaluationReport, k: usize) -> f64 {
    report
        .summary
        .iter()
        .find(|s| s.k == k)
        .and_then(|s| s.mean)
        .unwrap_or(f64::NAN)
}

fn run_recipe(
    recipe: Recipe,
    suite: &SyntheticSuite,
    spec: &ProtocolSpec,
    settings: &RecipeSettings,
) -> EvaluationReport {
    let model = build_recipe_model(recipe, transfer_base(suite), &suite.train, settings, None).unwrap();
    let mut runner = RecipeRunner {
        recipe,
        model,
        settings: settings.clone(),
    };
    run_protocol(spec, &suite.test, &mut runner, recipe.name(), serde_json::json!({}), 1).unwrap()
}

#[test]
fn criterion_10_synthetic_transfer() {
    let start = Instant::now();
    let suite = generate(&SyntheticConfig::default(), 7).unwrap();
    let settings = transfer_settings();
    let at_16 = ProtocolSpec {
        k_values: vec![16],
        ..Default::default()
    };

    // (a) meta-trained prototypes against a random encoder, same fine-tuning
    let mut untrained = PrototypeRunner {
        model: transfer_base(&suite),
        finetune: settings.finetune.clone(),
    };
    let untrained = run_protocol(
        &at_16,
        &suite.test,
        &mut untrained,
        "untrained_prototypes",
        serde_json::json!({}),
        1,
    )
    .unwrap();
    let untrained_f1 = mean_at(&untrained, 16);
    let protonet_f1 = mean_at(&run_recipe(Recipe::Protonet, &suite, &at_16, &settings), 16);
    let a_ok = protonet_f1 >= 0.85 && untrained_f1 <= 0.60;

    // (b) supervised-head recipes over growing K
    let ladder = ProtocolSpec {
        k_values: vec![16, 32, 64, 128],
        ..Default::default()
    };
    let mut b_ok = true;
    let mut b_detail = Vec::new();
    for recipe in [
        Recipe::Untrained,
        Recipe::Retrained,
        Recipe::Binary,
        Recipe::Mldg,
        Recipe::JeProtonetCls,
    ] {
        let rep = run_recipe(recipe, &suite, &ladder, &settings);
        let means: Vec<f64> = ladder.k_values.iter().map(|&k| mean_at(&rep, k)).collect();
        let drops: Vec<f64> = means.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
        let ok = drops.len() <= 1 && drops.iter().all(|&d| d <= 0.02) && means.iter().all(|m| m.is_finite());
        b_ok &= ok;
        let shown: Vec<String> = means.iter().map(|m| format!("{m:.3}")).collect();
        b_detail.push(format!("{}=[{}]", recipe.name(), shown.join(",")));
    }

    // (c) definition fusion over plain prototypes
    let joint_f1 = mean_at(&run_recipe(Recipe::JeProtonet, &suite, &at_16, &settings), 16);
    let c_ok = joint_f1 >= protonet_f1 + 0.05;

    let secs = start.elapsed().as_secs_f64();
    report(
        10,
        a_ok && b_ok && c_ok && secs < 900.0,
        format!(
            "(a) {} protonet {protonet_f1:.3} untrained {untrained_f1:.3}; (b) {} {}; (c) {} je_protonet {joint_f1:.3} \
             vs protonet {protonet_f1:.3}; {secs:.0}s",
            if a_ok { "ok" } else { "fail" },
            if b_ok { "ok" } else { "fail" },
            b_detail.join(" "),
            if c_ok { "ok" } else { "fail" },
        ),
    );
}

fn small_evaluation(out: &std::path::Path) -> Vec<u8> {
    let suite = small_suite(11);
    let mut settings = RecipeSettings::default();
    settings.meta.meta_epochs = 1;
    settings.meta.tasks_per_epoch = 10;
    settings.meta.k_choices = vec![2, 4];
    settings.finetune.epochs = 1;
    let base = Model::init(
        tiny_encoder(8, 1, 16),
        build_vocab(&suite.corpus(), 500),
        FusionStrategy::default(),
        3,
    )
    .unwrap();
    let model = build_recipe_model(Recipe::Protonet, base, &suite.train, &settings, None).unwrap();
    let mut runner = RecipeRunner {
        recipe: Recipe::Protonet,
        model,
        settings: settings.clone(),
    };
    let spec = ProtocolSpec {
        k_values: vec![2, 4],
        seeds: vec![1, 2, 3],
        ..Default::default()
    };
    let config = serde_json::to_value(&settings.meta).unwrap();
    let report = run_protocol(&spec, &suite.test, &mut runner, "protonet", config, 1).unwrap();
    let files = emit_report(&report, out).unwrap();
    std::fs::read(files.json).unwrap()
}

#[test]
fn criterion_11_determinism() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let a = small_evaluation(first.path());
    let b = small_evaluation(second.path());
    report(
        11,
        a == b && !a.is_empty(),
        format!("report json {} bytes, identical: {}", a.len(), a == b),
    );
}
