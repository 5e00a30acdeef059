//! Generator of multi-domain token-sequence classification data.
//!
//! Every sentence mixes a few class-marking tokens with a larger number of
//! nuisance tokens: a per-sentence topic cluster that is independent of the
//! class, plus uniform filler. Each domain assigns its own subset of the
//! shared marker pool to each class, and every label's definition lists the
//! markers of its class.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, DomainManifest, Example, LabelDef, SplitTag};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train_domains: usize,
    /// Class count of each training domain, cycled.
    pub train_classes: Vec<usize>,
    pub test_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Size of the marker pool shared by all domains.
    pub marker_pool: usize,
    pub markers_per_class: usize,
    /// Markers drawn into each sentence.
    pub markers_per_text: usize,
    pub topics: usize,
    pub topic_size: usize,
    pub topic_tokens_per_text: usize,
    pub filler_pool: usize,
    pub filler_per_text: usize,
    /// Test-domain markers come from a part of the pool no training domain uses.
    pub fresh_test_markers: bool,
    /// Name given to the first class of every training domain, so the
    /// domains have a neutral class to collapse against.
    pub neutral_label: Option<String>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_domains: 5,
            train_classes: vec![2, 3],
            test_classes: 2,
            train_per_class: 160,
            test_per_class: 260,
            marker_pool: 24,
            markers_per_class: 3,
            markers_per_text: 1,
            topics: 6,
            topic_size: 8,
            topic_tokens_per_text: 5,
            filler_pool: 40,
            filler_per_text: 3,
            fresh_test_markers: false,
            neutral_label: None,
        }
    }
}

/// Training domains plus one target domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSuite {
    pub train: Vec<Dataset>,
    pub test: Dataset,
}

impl SyntheticSuite {
    /// Every text and definition string, for building a vocabulary.
    pub fn corpus(&self) -> Vec<String> {
        let mut out = Vec::new();
        for d in self.train.iter().chain(std::iter::once(&self.test)) {
            out.extend(d.examples.iter().map(|e| e.text.clone()));
            out.extend(d.manifest.labels.iter().map(crate::fusion::definition_text));
        }
        out
    }
}

fn marker(i: usize) -> String {
    format!("m{i:02}")
}

fn topic_token(t: usize, i: usize) -> String {
    format!("t{t}w{i}")
}

fn filler(i: usize) -> String {
    format!("f{i:02}")
}

/// Pronounceable label names, unique per domain.
const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "xu", "ze", "po", "da"];

fn label_name(rng: &mut ChaCha8Rng, taken: &[LabelDef]) -> String {
    loop {
        let name: String = (0..3).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        if taken.iter().all(|l| l.name != name) {
            return name;
        }
    }
}

fn domain(
    cfg: &SyntheticConfig,
    id: &str,
    n_classes: usize,
    per_class: usize,
    pool: &[usize],
    neutral: Option<&str>,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let need = n_classes * cfg.markers_per_class;
    if pool.len() < need {
        return Err(Error::InvalidArgument(format!(
            "marker pool of {} cannot give {n_classes} classes {} markers each",
            pool.len(),
            cfg.markers_per_class
        )));
    }
    let mut pool = pool.to_vec();
    pool.shuffle(rng);
    let class_markers: Vec<Vec<String>> = (0..n_classes)
        .map(|c| {
            pool[c * cfg.markers_per_class..(c + 1) * cfg.markers_per_class]
                .iter()
                .map(|&m| marker(m))
                .collect()
        })
        .collect();
    let mut labels = Vec::with_capacity(n_classes);
    for (c, markers) in class_markers.iter().enumerate() {
        let mut name = label_name(rng, &labels);
        if let (0, Some(n)) = (c, neutral) {
            name = n.to_string();
        }
        labels.push(LabelDef::new(name, format!("posts that mention {}", markers.join(" "))));
    }
    let manifest = DomainManifest::new(id, labels)?;

    let mut examples = Vec::with_capacity(n_classes * per_class);
    for i in 0..per_class {
        for (c, markers) in class_markers.iter().enumerate() {
            let mut words: Vec<String> = (0..cfg.markers_per_text)
                .map(|_| markers.choose(rng).expect("non-empty").clone())
                .collect();
            let topic = rng.random_range(0..cfg.topics);
            words.extend(
                (0..cfg.topic_tokens_per_text).map(|_| topic_token(topic, rng.random_range(0..cfg.topic_size))),
            );
            words.extend((0..cfg.filler_per_text).map(|_| filler(rng.random_range(0..cfg.filler_pool))));
            words.shuffle(rng);
            let ordinal = examples.len();
            examples.push(Example {
                text: words.join(" "),
                label_index: c,
                domain_id: id.to_string(),
                id: Some(format!("{id}-{c}-{i}")),
                ordinal,
            });
        }
    }
    Dataset::new(manifest, examples, SplitTag::Full)
}

pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticSuite> {
    if cfg.train_classes.is_empty()
        || cfg.markers_per_class == 0
        || cfg.topics == 0
        || cfg.topic_size == 0
        || cfg.filler_pool == 0
    {
        return Err(Error::InvalidArgument(
            "synthetic configuration has an empty pool".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_train = cfg.train_classes.iter().copied().max().unwrap_or(0);
    let (train_pool, test_pool): (Vec<usize>, Vec<usize>) = if cfg.fresh_test_markers {
        let reserved = cfg.test_classes * cfg.markers_per_class;
        let split = cfg.marker_pool.saturating_sub(reserved);
        ((0..split).collect(), (split..cfg.marker_pool).collect())
    } else {
        ((0..cfg.marker_pool).collect(), (0..cfg.marker_pool).collect())
    };
    if train_pool.len() < max_train * cfg.markers_per_class {
        return Err(Error::InvalidArgument(
            "marker pool too small for the training domains".into(),
        ));
    }
    let mut train = Vec::with_capacity(cfg.train_domains);
    for i in 0..cfg.train_domains {
        let n = cfg.train_classes[i % cfg.train_classes.len()];
        train.push(domain(
            cfg,
            &format!("train{i}"),
            n,
            cfg.train_per_class,
            &train_pool,
            cfg.neutral_label.as_deref(),
            &mut rng,
        )?);
    }
    let test = domain(
        cfg,
        "target",
        cfg.test_classes,
        cfg.test_per_class,
        &test_pool,
        None,
        &mut rng,
    )?;
    Ok(SyntheticSuite { train, test })
}
