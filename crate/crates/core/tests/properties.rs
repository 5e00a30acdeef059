//! Property checks of the data handling, metrics and attention invariants.

use std::collections::BTreeSet;

use proptest::prelude::*;

use protofuse::corpus::{
    collapse_binary, holdout_split, kshot_sample, preprocess_text, water_fill, Dataset, DomainManifest, Example,
    LabelDef, SplitTag,
};
use protofuse::evaluate::{macro_f1, mean_std};
use protofuse::fusion::{joint_attention_weights, joint_embed, JointVariant};
use protofuse::metalearn::schedule::CosineSchedule;
use protofuse::metalearn::{compute_prototypes, proto_classify, Distance};
use protofuse::tensor::masked_softmax_rows;
use protofuse::{HiddenStates, Matrix, ParamSet};

fn dataset(counts: &[usize]) -> Dataset {
    let labels = (0..counts.len())
        .map(|c| LabelDef::new(format!("c{c}"), format!("class {c}")))
        .collect();
    let manifest = DomainManifest::new("prop", labels).unwrap();
    let mut examples = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let ordinal = examples.len();
            examples.push(Example {
                text: format!("text {ordinal}"),
                label_index: c,
                domain_id: "prop".into(),
                id: None,
                ordinal,
            });
        }
    }
    Dataset::new(manifest, examples, SplitTag::Full).unwrap()
}

fn ordinals(d: &Dataset) -> BTreeSet<usize> {
    d.examples.iter().map(|e| e.ordinal).collect()
}

fn matrix(rows: usize, cols: usize, values: &[f64]) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| values[(i * cols + j) % values.len()])
}

/// Joint-block parameters with zero query/key maps and identity value/output maps.
fn uniform_joint_params(d: usize) -> ParamSet {
    let mut p = ParamSet::new();
    for w in ["wq", "wk"] {
        p.insert(format!("joint.{w}"), Matrix::zeros(d, d));
    }
    for w in ["wv", "wo"] {
        p.insert(format!("joint.{w}"), Matrix::identity(d));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        p.insert(format!("joint.{b}"), Matrix::zeros(1, d));
    }
    p
}

fn text_strategy() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        "[a-zA-Z]{1,8}",
        "@[a-z_]{1,6}",
        "#[A-Za-z]{1,10}",
        "https?://[a-z]{1,5}\\.[a-z]{2,3}(/[a-z]{0,4})?",
        "[ \t\n]{1,3}",
        "[!?.,:;'\"]",
        "<(url|user)>",
        "[0-9]{1,3}",
        "\\PC",
    ];
    prop::collection::vec(piece, 0..16).prop_map(|parts| parts.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn preprocessing_is_idempotent(raw in text_strategy()) {
        let once = preprocess_text(&raw);
        prop_assert_eq!(preprocess_text(&once), once.clone());
        prop_assert_eq!(once.to_lowercase(), once);
    }

    #[test]
    fn kshot_split_is_deterministic_and_exact(
        counts in prop::collection::vec(1usize..30, 2..5),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let d = dataset(&counts);
        let drawn = kshot_sample(&d, k, seed);
        if counts.iter().any(|&n| n < k) {
            prop_assert!(drawn.is_err());
            return Ok(());
        }
        let (kshot, rest) = drawn.unwrap();
        prop_assert_eq!(kshot_sample(&d, k, seed).unwrap(), (kshot.clone(), rest.clone()));
        prop_assert!(kshot.class_counts().iter().all(|&n| n == k));
        let (a, b) = (ordinals(&kshot), ordinals(&rest));
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), d.len());
    }

    #[test]
    fn holdout_split_partitions_every_class(
        counts in prop::collection::vec(4usize..40, 2..5),
        fraction in 0.15f64..0.6,
        seed in any::<u64>(),
    ) {
        let d = dataset(&counts);
        let (train, held) = holdout_split(&d, fraction, seed).unwrap();
        prop_assert_eq!(holdout_split(&d, fraction, seed).unwrap(), (train.clone(), held.clone()));
        prop_assert!(ordinals(&train).is_disjoint(&ordinals(&held)));
        for (c, &n) in counts.iter().enumerate() {
            let expected = (fraction * n as f64).round() as usize;
            prop_assert_eq!(held.class_counts()[c], expected);
            prop_assert_eq!(train.class_counts()[c] + expected, n);
        }
    }

    #[test]
    fn binary_collapse_keeps_examples_and_splits_on_neutral(
        counts in prop::collection::vec(1usize..10, 2..6),
        neutral_mask in prop::collection::vec(any::<bool>(), 6),
    ) {
        let d = dataset(&counts);
        let names: Vec<String> = (0..counts.len()).filter(|&c| neutral_mask[c]).map(|c| format!("c{c}")).collect();
        let neutral: Vec<&str> = names.iter().map(String::as_str).collect();
        let b = collapse_binary(&d, &neutral).unwrap();
        prop_assert_eq!(b.len(), d.len());
        prop_assert_eq!(b.n_classes(), 2);
        for (orig, new) in d.examples.iter().zip(&b.examples) {
            prop_assert_eq!(&orig.text, &new.text);
            prop_assert_eq!(new.label_index == 1, neutral_mask[orig.label_index]);
        }
    }

    #[test]
    fn water_fill_respects_availability(
        available in prop::collection::vec(0usize..50, 1..7),
        target in 0usize..200,
    ) {
        let alloc = water_fill(&available, target);
        let total: usize = available.iter().sum();
        prop_assert_eq!(alloc.iter().sum::<usize>(), target.min(total));
        prop_assert!(alloc.iter().zip(&available).all(|(a, v)| a <= v));
        // a class left short of its supply is never below a class that got more
        for i in 0..alloc.len() {
            for j in 0..alloc.len() {
                if alloc[i] < available[i] {
                    prop_assert!(alloc[j] <= alloc[i] + 1);
                }
            }
        }
    }

    #[test]
    fn macro_f1_ignores_example_order_and_label_names(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        rotation in 0usize..60,
        shift in 1usize..4,
    ) {
        let (preds, golds): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let base = macro_f1(&preds, &golds, 4).unwrap();
        let mut rotated = pairs.clone();
        rotated.rotate_left(rotation % pairs.len());
        let (rp, rg): (Vec<usize>, Vec<usize>) = rotated.into_iter().unzip();
        prop_assert!((macro_f1(&rp, &rg, 4).unwrap() - base).abs() < 1e-12);
        let relabel = |v: &[usize]| v.iter().map(|&c| (c + shift) % 4).collect::<Vec<_>>();
        prop_assert!((macro_f1(&relabel(&preds), &relabel(&golds), 4).unwrap() - base).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn mean_std_matches_population_formula(values in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let (mean, std) = mean_std(&values).unwrap();
        let n = values.len() as f64;
        let m: f64 = values.iter().sum::<f64>() / n;
        let var: f64 = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        prop_assert!((mean - m).abs() < 1e-12);
        prop_assert!((std - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_is_shift_invariant(
        values in prop::collection::vec(-20.0f64..20.0, 12),
        mask in prop::collection::vec(any::<bool>(), 4),
        shift in -50.0f64..50.0,
    ) {
        prop_assume!(mask.iter().any(|&m| m));
        let x = matrix(3, 4, &values);
        let p = masked_softmax_rows(&x, &mask);
        let q = masked_softmax_rows(&x.map(|v| v + shift), &mask);
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
        for i in 0..3 {
            let row = p.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, &m) in mask.iter().enumerate() {
                if !m {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn prototype_argmax_is_nearest_prototype(
        values in prop::collection::vec(-5.0f64..5.0, 30),
        query in prop::collection::vec(-5.0f64..5.0, 5),
        squared in any::<bool>(),
    ) {
        let vectors = matrix(6, 5, &values);
        let protos = compute_prototypes(&vectors, &[0, 1, 2, 0, 1, 2], 3).unwrap();
        let distance = if squared { Distance::SquaredEuclidean } else { Distance::Euclidean };
        let out = proto_classify(&query, &protos, distance).unwrap();
        let argmax = (0..3).fold(0, |best, c| if out.probs[c] > out.probs[best] { c } else { best });
        prop_assert_eq!(out.predicted, protos.nearest(&query, distance));
        prop_assert!((out.probs[argmax] - out.probs[out.predicted]).abs() < 1e-12);
        prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn joint_attention_ignores_padded_definition_positions(
        text in prop::collection::vec(-2.0f64..2.0, 24),
        def in prop::collection::vec(-2.0f64..2.0, 24),
        valid in 1usize..=6,
        junk in -100.0f64..100.0,
        heads in prop::sample::select(vec![1usize, 2, 4]),
        standard in any::<bool>(),
    ) {
        let (len, d) = (6, 4);
        let variant = if standard { JointVariant::Standard } else { JointVariant::Literal };
        let mask: Vec<bool> = (0..len).map(|i| i < valid).collect();
        let h_text = HiddenStates { states: matrix(len, d, &text), mask: vec![true; len] };
        let h_def = HiddenStates { states: matrix(len, d, &def), mask: mask.clone() };
        let mut noisy = h_def.clone();
        for i in valid..len {
            noisy.states.row_mut(i).iter_mut().for_each(|v| *v = junk);
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
        let params = protofuse::fusion::init_joint_params(d, &mut rng);

        let weights = joint_attention_weights(&h_text, &h_def, &params, heads, variant).unwrap();
        prop_assert_eq!(weights.len(), heads);
        for w in &weights {
            prop_assert_eq!(w.shape(), (len, len));
            for i in 0..len {
                prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(w.row(i)[valid..].iter().all(|&v| v == 0.0));
            }
        }
        if variant == JointVariant::Literal {
            // keys at padded positions are ignored and the values come from the text
            let a = joint_embed(&h_text, &h_def, &params, heads, variant).unwrap();
            let b = joint_embed(&h_text, &noisy, &params, heads, variant).unwrap();
            prop_assert!(a.states.max_abs_diff(&b.states) < 1e-9);
        }
    }

    #[test]
    fn uniform_standard_attention_averages_the_definition(
        text in prop::collection::vec(-2.0f64..2.0, 24),
        def in prop::collection::vec(-2.0f64..2.0, 24),
        valid in 1usize..=6,
    ) {
        let (len, d) = (6, 4);
        let h_text = HiddenStates { states: matrix(len, d, &text), mask: vec![true; len] };
        let h_def = HiddenStates { states: matrix(len, d, &def), mask: (0..len).map(|i| i < valid).collect() };
        let out = joint_embed(&h_text, &h_def, &uniform_joint_params(d), 2, JointVariant::Standard).unwrap();
        for j in 0..d {
            let mean = (0..valid).map(|i| h_def.states.get(i, j)).sum::<f64>() / valid as f64;
            for i in 0..len {
                prop_assert!((out.states.get(i, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_schedule_decays_from_peak_to_floor(
        peak in 1e-4f64..1e-1,
        total in 1usize..400,
    ) {
        let floor = 1e-5;
        let s = CosineSchedule::new(peak, floor, total);
        let trace = s.trace();
        prop_assert_eq!(trace.len(), total);
        prop_assert!((trace[0] - peak).abs() < 1e-15);
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-18));
        prop_assert!(trace.iter().all(|&r| r >= floor - 1e-18));
        prop_assert_eq!(s.rate(total), floor);
        for (t, &r) in trace.iter().enumerate() {
            let oracle = floor + (peak - floor) * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0;
            prop_assert!((r - oracle).abs() < 1e-15);
        }
    }
}
