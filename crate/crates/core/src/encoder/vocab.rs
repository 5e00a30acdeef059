use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";
pub const SPECIALS: [&str; 5] = [CLS, SEP, PAD, MASK, UNK];

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const UNK_ID: usize = 4;

/// Prefix marking tokens created for whole labels.
pub const LABEL_PREFIX: &str = "[LABEL]";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    base_len: usize,
}

/// Token table: specials, then corpus tokens by descending frequency, then
/// label tokens appended on demand. The base portion never changes after build.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    base_len: usize,
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            base_len: v.base_len,
        }
    }
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocab::from_tokens(r.tokens, Some(r.base_len))
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, base_len: Option<usize>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Checkpoint(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let base_len = base_len.unwrap_or_else(|| {
            tokens
                .iter()
                .position(|t| t.starts_with(LABEL_PREFIX))
                .unwrap_or(tokens.len())
        });
        if base_len > tokens.len() {
            return Err(Error::Checkpoint("base length exceeds vocabulary".into()));
        }
        Ok(Self {
            tokens,
            index,
            base_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Size of the frozen corpus-derived portion, specials included.
    pub fn base_len(&self) -> usize {
        self.base_len
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn label_token(label: &str) -> String {
        format!("{LABEL_PREFIX}{label}")
    }

    /// Appends `token` unless present; returns its id.
    pub(crate) fn push(&mut self, token: String) -> usize {
        if let Some(id) = self.id(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// One token per line, specials first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(body.lines().map(str::to_string).collect(), None)
    }
}

/// Whitespace-token frequency ranking, ties broken lexicographically, truncated
/// to `max_size` non-special tokens with the five specials prepended.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Vocab {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for text in corpus {
        for tok in text.as_ref().split_whitespace() {
            *freq.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|(t, _)| !SPECIALS.contains(t) && !t.starts_with(LABEL_PREFIX))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_size).map(|(t, _)| t.to_string()));
    let base_len = tokens.len();
    Vocab::from_tokens(tokens, Some(base_len)).expect("fresh vocabulary is well formed")
}

/// Token ids plus the validity mask over a fixed-length padded frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Pads `ids` (which must fit) with `[PAD]` up to `max_len`.
    pub fn padded(ids: Vec<usize>, max_len: usize) -> Self {
        debug_assert!(ids.len() <= max_len);
        let valid = ids.len();
        let mut ids = ids;
        ids.resize(max_len, PAD_ID);
        let mask = (0..max_len).map(|i| i < valid).collect();
        Self { ids, mask }
    }
}

pub fn text_ids(text: &str, vocab: &Vocab) -> Vec<usize> {
    text.split_whitespace().map(|t| vocab.id_or_unk(t)).collect()
}

/// `[CLS] body [SEP]`, head-truncated so the closing `[SEP]` lands at
/// `max_len - 1` at the latest, then padded.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    let mut body = text_ids(text, vocab);
    body.truncate(max_len.saturating_sub(2));
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(body);
    ids.push(SEP_ID);
    TokenSeq::padded(ids, max_len)
}
