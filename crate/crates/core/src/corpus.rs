//! Labeled text domains: schema, preprocessing, ingestion and deterministic splits.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelDef {
    pub name: String,
    #[serde(default)]
    pub definition: String,
}

impl LabelDef {
    pub fn new(name: impl Into<String>, definition: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            definition: definition.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainManifest {
    pub domain_id: String,
    pub labels: Vec<LabelDef>,
    #[serde(default)]
    pub source_meta: Vec<String>,
}

impl DomainManifest {
    pub fn new(domain_id: impl Into<String>, labels: Vec<LabelDef>) -> Result<Self> {
        let m = Self {
            domain_id: domain_id.into(),
            labels,
            source_meta: Vec::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain_id.trim().is_empty() {
            return Err(Error::Manifest("domain_id is empty".into()));
        }
        if self.labels.len() < 2 {
            return Err(Error::Manifest(format!(
                "domain {:?} has {} label(s); at least 2 are required",
                self.domain_id,
                self.labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            if l.name.trim().is_empty() {
                return Err(Error::Manifest("empty label name".into()));
            }
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Manifest(format!("duplicate label name {:?}", l.name)));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label_index: usize,
    pub domain_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// Position in the originating records file; identifies the example across splits.
    pub ordinal: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Holdout,
    Kshot,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub manifest: DomainManifest,
    pub examples: Vec<Example>,
    pub split_tag: SplitTag,
}

impl Dataset {
    /// Validates domain membership and label bounds.
    pub fn new(manifest: DomainManifest, examples: Vec<Example>, split_tag: SplitTag) -> Result<Self> {
        manifest.validate()?;
        for e in &examples {
            if e.domain_id != manifest.domain_id {
                return Err(Error::InvalidArgument(format!(
                    "example {} belongs to domain {:?}, not {:?}",
                    e.ordinal, e.domain_id, manifest.domain_id
                )));
            }
            if e.label_index >= manifest.n_classes() {
                return Err(Error::InvalidArgument(format!(
                    "example {} has label index {} outside {} classes",
                    e.ordinal,
                    e.label_index,
                    manifest.n_classes()
                )));
            }
        }
        Ok(Self {
            manifest,
            examples,
            split_tag,
        })
    }

    fn derive(&self, examples: Vec<Example>, split_tag: SplitTag) -> Self {
        Self {
            manifest: self.manifest.clone(),
            examples,
            split_tag,
        }
    }

    pub fn domain_id(&self) -> &str {
        &self.manifest.domain_id
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for e in &self.examples {
            counts[e.label_index] += 1;
        }
        counts
    }

    /// Example positions grouped by class, each list in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes()];
        for (i, e) in self.examples.iter().enumerate() {
            out[e.label_index].push(i);
        }
        out
    }

    pub fn texts(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.text.as_str()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label_index).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self).map_err(|e| Error::json("dataset", e))?;
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: Dataset = serde_json::from_str(&body).map_err(|e| Error::json(path.display().to_string(), e))?;
        Dataset::new(d.manifest, d.examples, d.split_tag)
    }
}

// ---------------------------------------------------------------------------
// Preprocessing

fn mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@\w+").unwrap())
}

fn hashtag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"#(\w+)").unwrap())
}

fn is_url(token: &str) -> bool {
    let t = token.to_ascii_lowercase();
    t.starts_with("http://") || t.starts_with("https://") || t.starts_with("www.")
}

/// Splits a hashtag body on camel-case, letter/digit and underscore boundaries
/// and lowercases the parts: `HateSpeech2020` → `hate speech 2020`.
pub fn split_hashtag(body: &str) -> String {
    let chars: Vec<char> = body.chars().collect();
    let mut words: Vec<String> = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_alphanumeric() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            continue;
        }
        if let Some(&prev) = cur.chars().last().as_ref() {
            let next = chars.get(i + 1).copied();
            let boundary = (prev.is_ascii_lowercase() && c.is_ascii_uppercase())
                || (prev.is_ascii_digit() != c.is_ascii_digit())
                || (prev.is_ascii_uppercase()
                    && c.is_ascii_uppercase()
                    && next.is_some_and(|n| n.is_ascii_lowercase()));
            if boundary {
                words.push(std::mem::take(&mut cur));
            }
        }
        cur.push(c);
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words.join(" ").to_ascii_lowercase()
}

/// Normalises a raw social-media post.
///
/// Non-ASCII characters are dropped, hashtags are segmented, URLs become
/// `<url>`, mentions become `<user>`, everything is lowercased and runs of a
/// repeated whitespace token collapse to one occurrence. The function is
/// idempotent.
pub fn preprocess_text(raw: &str) -> String {
    let ascii: String = raw.chars().filter(char::is_ascii).collect();
    let mut out: Vec<String> = Vec::new();
    for token in ascii.split_whitespace() {
        if is_url(token) {
            out.push("<url>".to_string());
            continue;
        }
        let expanded =
            hashtag_re().replace_all(token, |caps: &regex::Captures| format!(" {} ", split_hashtag(&caps[1])));
        for word in expanded.split_whitespace() {
            if is_url(word) {
                out.push("<url>".to_string());
                continue;
            }
            let w = mention_re().replace_all(word, "<user>");
            out.push(w.to_ascii_lowercase());
        }
    }
    out.dedup();
    out.join(" ")
}

// ---------------------------------------------------------------------------
// Ingestion

#[derive(Deserialize)]
struct Record {
    text: String,
    label: String,
    #[serde(default)]
    id: Option<serde_json::Value>,
}

pub fn load_manifest(path: &Path) -> Result<DomainManifest> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DomainManifest =
        serde_json::from_str(&body).map_err(|e| Error::json(path.display().to_string(), e))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Parses line-delimited `{"text", "label"[, "id"]}` records against `manifest`.
/// Line numbers in errors are 1-based; blank lines are skipped.
pub fn parse_records(manifest: &DomainManifest, body: &str) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        let label_index = manifest.label_index(&rec.label).ok_or_else(|| Error::UnknownLabel {
            line: line_no,
            label: rec.label.clone(),
        })?;
        let id = rec.id.map(|v| match v {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        });
        examples.push(Example {
            text: preprocess_text(&rec.text),
            label_index,
            domain_id: manifest.domain_id.clone(),
            id,
            ordinal: examples.len(),
        });
    }
    Ok(examples)
}

pub fn load_domain(manifest_file: &Path, records_file: &Path) -> Result<Dataset> {
    let manifest = load_manifest(manifest_file)?;
    let body = fs::read_to_string(records_file).map_err(|e| Error::io(records_file, e))?;
    let examples = parse_records(&manifest, &body)?;
    Dataset::new(manifest, examples, SplitTag::Full)
}

// ---------------------------------------------------------------------------
// Splits

/// Greedy water-filling: classes that cannot reach the equal share give all
/// they have, the remainder is spread equally over the rest, and leftover
/// single units go to the lowest class indices.
pub fn water_fill(available: &[usize], target: usize) -> Vec<usize> {
    let mut alloc = vec![0; available.len()];
    let mut active: Vec<usize> = (0..available.len()).filter(|&c| available[c] > 0).collect();
    let mut remaining = target;
    loop {
        if active.is_empty() {
            break;
        }
        let share = remaining / active.len();
        let saturated: Vec<usize> = active.iter().copied().filter(|&c| available[c] <= share).collect();
        if saturated.is_empty() {
            let extra = remaining - share * active.len();
            for (rank, &c) in active.iter().enumerate() {
                alloc[c] = share + usize::from(rank < extra);
            }
            break;
        }
        for &c in &saturated {
            alloc[c] = available[c];
            remaining -= available[c];
        }
        active.retain(|c| !saturated.contains(c));
    }
    alloc
}

fn pick_per_class(d: &Dataset, counts: &[usize], rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut chosen = vec![false; d.len()];
    for (class, mut idx) in d.indices_by_class().into_iter().enumerate() {
        idx.shuffle(rng);
        for &i in idx.iter().take(counts[class]) {
            chosen[i] = true;
        }
    }
    chosen
}

fn partition(d: &Dataset, chosen: &[bool]) -> (Vec<Example>, Vec<Example>) {
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for (e, &c) in d.examples.iter().zip(chosen) {
        if c {
            inside.push(e.clone());
        } else {
            outside.push(e.clone());
        }
    }
    (inside, outside)
}

/// Draws `target_size` examples as evenly across classes as availability allows.
pub fn stratified_sample(d: &Dataset, target_size: usize, seed: u64) -> Result<Dataset> {
    if target_size > d.len() {
        return Err(Error::InvalidArgument(format!(
            "target size {target_size} exceeds dataset size {}",
            d.len()
        )));
    }
    if target_size < d.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "target size {target_size} is below the class count {}",
            d.n_classes()
        )));
    }
    let counts = water_fill(&d.class_counts(), target_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = pick_per_class(d, &counts, &mut rng);
    let (inside, _) = partition(d, &chosen);
    Ok(d.derive(inside, SplitTag::Train))
}

pub const OFFENSIVE: &str = "Offensive";
pub const NOT_OFFENSIVE: &str = "Not Offensive";

/// Maps every label in `neutral_labels` to `Not Offensive` and all others to `Offensive`.
pub fn collapse_binary(d: &Dataset, neutral_labels: &[&str]) -> Result<Dataset> {
    for n in neutral_labels {
        if d.manifest.label_index(n).is_none() {
            return Err(Error::InvalidArgument(format!(
                "neutral label {n:?} is not in domain {:?}",
                d.domain_id()
            )));
        }
    }
    let manifest = DomainManifest {
        domain_id: d.manifest.domain_id.clone(),
        labels: vec![LabelDef::new(OFFENSIVE, ""), LabelDef::new(NOT_OFFENSIVE, "")],
        source_meta: d.manifest.source_meta.clone(),
    };
    let examples = d
        .examples
        .iter()
        .map(|e| {
            let neutral = neutral_labels.contains(&d.manifest.labels[e.label_index].name.as_str());
            Example {
                label_index: usize::from(neutral),
                ..e.clone()
            }
        })
        .collect();
    Ok(Dataset {
        manifest,
        examples,
        split_tag: d.split_tag,
    })
}

/// Exactly `k` examples per class plus the complement.
pub fn kshot_sample(d: &Dataset, k: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    for (class, &n) in d.class_counts().iter().enumerate() {
        if n < k {
            return Err(Error::InsufficientClass {
                class: d.manifest.labels[class].name.clone(),
                available: n,
                required: k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = pick_per_class(d, &vec![k; d.n_classes()], &mut rng);
    let (kshot, rest) = partition(d, &chosen);
    Ok((d.derive(kshot, SplitTag::Kshot), d.derive(rest, SplitTag::Train)))
}

/// Class-stratified split holding out `round(fraction × class size)` per class.
pub fn holdout_split(d: &Dataset, holdout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction {holdout_fraction} outside (0, 1)"
        )));
    }
    let sizes = d.class_counts();
    let mut counts = Vec::with_capacity(sizes.len());
    for (class, &n) in sizes.iter().enumerate() {
        let held = (holdout_fraction * n as f64).round() as usize;
        if held == 0 || held >= n {
            return Err(Error::InvalidArgument(format!(
                "holdout fraction {holdout_fraction} leaves an empty side for class {:?} ({n} examples)",
                d.manifest.labels[class].name
            )));
        }
        counts.push(held);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = pick_per_class(d, &counts, &mut rng);
    let (holdout, train) = partition(d, &chosen);
    Ok((d.derive(train, SplitTag::Train), d.derive(holdout, SplitTag::Holdout)))
}
