//! Label-information fusion: input framing for the token/label/full settings
//! and cross-attention between text and label-definition hidden states.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::{preprocess_text, DomainManifest, LabelDef};
use crate::encoder::vocab::{text_ids, TokenSeq, Vocab, CLS_ID, SEP_ID};
use crate::encoder::{encode_on_tape, insert_attention, multi_head_attention, Dropout, EncoderConfig, HiddenStates};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const JOINT_PREFIX: &str = "joint.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    None,
    Token,
    Label,
    Full,
    Joint,
}

/// Which hidden states feed the attention values in the joint block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointVariant {
    /// Values from the text states, keys from the definition states.
    #[default]
    Literal,
    /// Keys and values both from the definition states.
    Standard,
}

macro_rules! str_enum {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        "unknown {} {other:?}; expected one of: {}",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name,)+ })
            }
        }
    };
}

str_enum!(FusionKind {
    FusionKind::None => "none",
    FusionKind::Token => "token",
    FusionKind::Label => "label",
    FusionKind::Full => "full",
    FusionKind::Joint => "joint",
});

str_enum!(JointVariant {
    JointVariant::Literal => "literal",
    JointVariant::Standard => "standard",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionStrategy {
    pub kind: FusionKind,
    pub joint_heads: usize,
    pub joint_variant: JointVariant,
}

impl Default for FusionStrategy {
    fn default() -> Self {
        Self {
            kind: FusionKind::None,
            joint_heads: 3,
            joint_variant: JointVariant::Literal,
        }
    }
}

impl FusionStrategy {
    pub fn of(kind: FusionKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.kind == FusionKind::Joint && (self.joint_heads == 0 || d_model % self.joint_heads != 0) {
            return Err(Error::InvalidArgument(format!(
                "joint_heads {} must divide d_model {d_model}",
                self.joint_heads
            )));
        }
        Ok(())
    }
}

/// Joint attention projections under `joint.`.
pub fn init_joint_params<S: Scalar, R: Rng + ?Sized>(d_model: usize, rng: &mut R) -> ParamSet<S> {
    let mut p = ParamSet::new();
    insert_attention(&mut p, JOINT_PREFIX, d_model, rng);
    p
}

/// The normalised `L : D` string encoded for the definition side.
pub fn definition_text(label: &LabelDef) -> String {
    preprocess_text(&format!("{} : {}", label.name, label.definition))
}

pub fn label_words(label: &LabelDef) -> String {
    preprocess_text(&label.name)
}

/// Splits a body budget between text and label region, giving the label
/// region at most half when both overflow.
fn fit(text: &mut Vec<usize>, region: &mut Vec<usize>, budget: usize) {
    let region_cap = region.len().min(budget / 2);
    let text_keep = text.len().min(budget - region_cap);
    text.truncate(text_keep);
    region.truncate(budget - text_keep);
}

/// Builds the token frame for `text` under `strategy`.
///
/// With `label` absent every kind yields `[CLS] T [SEP]`. Kind `joint`
/// frames only the text; its definition side goes through [`definition_text`].
pub fn fuse_input(
    text: &str,
    domain: &DomainManifest,
    label: Option<&LabelDef>,
    strategy: &FusionStrategy,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSeq> {
    if let Some(l) = label {
        if !domain.labels.contains(l) {
            return Err(Error::ForeignLabel(l.name.clone()));
        }
    }
    let mut body = text_ids(text, vocab);
    let label = match strategy.kind {
        FusionKind::None | FusionKind::Joint => None,
        _ => label,
    };
    let Some(label) = label else {
        return Ok(crate::encoder::tokenize(text, vocab, max_len));
    };
    let mut ids = vec![CLS_ID];
    match strategy.kind {
        FusionKind::Token => {
            let token = Vocab::label_token(&label_words(label));
            let id = vocab
                .id(&token)
                .ok_or_else(|| Error::UnregisteredLabel(label.name.clone()))?;
            let mut region = vec![id];
            fit(&mut body, &mut region, max_len - 3);
            ids.extend(body);
            ids.push(SEP_ID);
            ids.extend(region);
            ids.push(SEP_ID);
        }
        FusionKind::Label => {
            let mut region = text_ids(&label_words(label), vocab);
            fit(&mut body, &mut region, max_len - 2);
            ids.extend(body);
            ids.extend(region);
            ids.push(SEP_ID);
        }
        FusionKind::Full => {
            let mut region = text_ids(&definition_text(label), vocab);
            fit(&mut body, &mut region, max_len - 3);
            ids.extend(body);
            ids.push(SEP_ID);
            ids.extend(region);
            ids.push(SEP_ID);
        }
        FusionKind::None | FusionKind::Joint => unreachable!(),
    }
    Ok(TokenSeq::padded(ids, max_len))
}

/// Tape-level cross attention: queries from `h_text`, keys from `h_def`,
/// values from `h_text` (literal) or `h_def` (standard). No residual path.
#[allow(clippy::too_many_arguments)]
pub fn joint_embed_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    n_heads: usize,
    variant: JointVariant,
    h_text: Var,
    h_def: Var,
    def_mask: &[bool],
    trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let (lt, d) = tape.value(h_text).shape();
    let (ld, dd) = tape.value(h_def).shape();
    if lt != ld || d != dd || def_mask.len() != ld {
        return Err(Error::Shape(format!(
            "text states {lt}×{d} and definition states {ld}×{dd} (mask {})",
            def_mask.len()
        )));
    }
    if !def_mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("definition has no valid key position".into()));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::InvalidArgument(format!("{n_heads} heads for width {d}")));
    }
    let values = match variant {
        JointVariant::Literal => h_text,
        JointVariant::Standard => h_def,
    };
    multi_head_attention(
        tape,
        params,
        JOINT_PREFIX,
        n_heads,
        h_text,
        h_def,
        values,
        def_mask,
        trace,
    )
}

fn joint_embed_inner<S: Scalar>(
    h_text: &HiddenStates<S>,
    h_def: &HiddenStates<S>,
    params: &ParamSet<S>,
    n_heads: usize,
    variant: JointVariant,
) -> Result<(HiddenStates<S>, Vec<Matrix<S>>)> {
    if h_def.mask.len() != h_def.len() {
        return Err(Error::Shape("definition mask length".into()));
    }
    let mut tape = Tape::new();
    let t = tape.constant(h_text.states.clone());
    let dv = tape.constant(h_def.states.clone());
    let mut trace = Vec::new();
    let out = joint_embed_on_tape(
        &mut tape,
        params,
        n_heads,
        variant,
        t,
        dv,
        &h_def.mask,
        Some(&mut trace),
    )?;
    let maps = trace.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((
        HiddenStates {
            states: tape.value(out).clone(),
            mask: h_text.mask.clone(),
        },
        maps,
    ))
}

/// Cross-attention joint embedding; the output's `[CLS]` row is the representation.
pub fn joint_embed<S: Scalar>(
    h_text: &HiddenStates<S>,
    h_def: &HiddenStates<S>,
    params: &ParamSet<S>,
    n_heads: usize,
    variant: JointVariant,
) -> Result<HiddenStates<S>> {
    joint_embed_inner(h_text, h_def, params, n_heads, variant).map(|(h, _)| h)
}

/// Per-head attention weights (`text positions × definition positions`).
pub fn joint_attention_weights<S: Scalar>(
    h_text: &HiddenStates<S>,
    h_def: &HiddenStates<S>,
    params: &ParamSet<S>,
    n_heads: usize,
    variant: JointVariant,
) -> Result<Vec<Matrix<S>>> {
    joint_embed_inner(h_text, h_def, params, n_heads, variant).map(|(_, w)| w)
}

/// Encoder configuration, vocabulary and fusion strategy: everything a
/// forward pass needs besides parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder: EncoderConfig,
    pub vocab: Vocab,
    pub fusion: FusionStrategy,
}

/// Per-tape cache of encoded definition sequences, keyed by definition string.
#[derive(Default)]
pub struct DefinitionCache {
    states: HashMap<String, (Var, Vec<bool>)>,
}

impl DefinitionCache {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One input to represent: text plus the label fused into it, if any.
#[derive(Clone, Copy, Debug)]
pub struct FusionInput<'a> {
    pub text: &'a str,
    pub domain: &'a DomainManifest,
    pub label: Option<&'a LabelDef>,
}

fn reborrow<'b>(d: &'b mut Option<Dropout<'_>>) -> Option<Dropout<'b>> {
    d.as_mut().map(|d| Dropout {
        rate: d.rate,
        rng: &mut *d.rng,
    })
}

/// `1 × d_model` representation on the tape: the encoder `[CLS]` of the fused
/// frame, or for `joint` the `[CLS]` row of the cross-attention output where a
/// missing label means the blank definition.
pub fn represent_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    arch: &Architecture,
    params: &ParamSet<S>,
    input: FusionInput<'_>,
    cache: &mut DefinitionCache,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    let cfg = &arch.encoder;
    let seq = fuse_input(
        input.text,
        input.domain,
        input.label,
        &arch.fusion,
        &arch.vocab,
        cfg.max_len,
    )?;
    let states = encode_on_tape(tape, cfg, params, &seq, reborrow(&mut dropout), None)?;
    if arch.fusion.kind != FusionKind::Joint {
        return Ok(tape.select_rows(states, &[0]));
    }
    let def = input.label.map(definition_text).unwrap_or_default();
    let (h_def, def_mask) = match cache.states.get(&def) {
        Some((v, m)) => (*v, m.clone()),
        None => {
            let def_seq = crate::encoder::tokenize(&def, &arch.vocab, cfg.max_len);
            let v = encode_on_tape(tape, cfg, params, &def_seq, reborrow(&mut dropout), None)?;
            cache.states.insert(def.clone(), (v, def_seq.mask.clone()));
            (v, def_seq.mask)
        }
    };
    let out = joint_embed_on_tape(
        tape,
        params,
        arch.fusion.joint_heads,
        arch.fusion.joint_variant,
        states,
        h_def,
        &def_mask,
        None,
    )?;
    Ok(tape.select_rows(out, &[0]))
}
