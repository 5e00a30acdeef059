//! Named model recipes: how the starting model is obtained and which head is
//! fine-tuned on each K-shot set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::protocol::CellRunner;
use crate::corpus::{collapse_binary, Dataset, DomainManifest, Example, LabelDef, SplitTag, NOT_OFFENSIVE, OFFENSIVE};
use crate::encoder::mlm::{mlm_pretrain, MlmConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, FusionStrategy, JointVariant};
use crate::metalearn::{
    meta_train, predict, supervised_finetune, Algorithm, FineTuneConfig, HeadKind, LearnerState, MetaConfig,
};
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Untrained,
    Retrained,
    Binary,
    Protonet,
    Protomaml,
    Mldg,
    ProtonetToken,
    ProtonetLabel,
    ProtonetFull,
    JeProtonet,
    JeProtonetUntrained,
    JeProtonetCls,
}

impl Recipe {
    pub const ALL: [Recipe; 12] = [
        Recipe::Untrained,
        Recipe::Retrained,
        Recipe::Binary,
        Recipe::Protonet,
        Recipe::Protomaml,
        Recipe::Mldg,
        Recipe::ProtonetToken,
        Recipe::ProtonetLabel,
        Recipe::ProtonetFull,
        Recipe::JeProtonet,
        Recipe::JeProtonetUntrained,
        Recipe::JeProtonetCls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Untrained => "untrained",
            Recipe::Retrained => "retrained",
            Recipe::Binary => "binary",
            Recipe::Protonet => "protonet",
            Recipe::Protomaml => "protomaml",
            Recipe::Mldg => "mldg",
            Recipe::ProtonetToken => "protonet_token",
            Recipe::ProtonetLabel => "protonet_label",
            Recipe::ProtonetFull => "protonet_full",
            Recipe::JeProtonet => "je_protonet",
            Recipe::JeProtonetUntrained => "je_protonet_untrained",
            Recipe::JeProtonetCls => "je_protonet_cls",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|r| r.name()).collect()
    }

    pub fn fusion(self) -> FusionKind {
        match self {
            Recipe::ProtonetToken => FusionKind::Token,
            Recipe::ProtonetLabel => FusionKind::Label,
            Recipe::ProtonetFull => FusionKind::Full,
            Recipe::JeProtonet | Recipe::JeProtonetUntrained | Recipe::JeProtonetCls => FusionKind::Joint,
            _ => FusionKind::None,
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            Recipe::Untrained | Recipe::Retrained | Recipe::Binary | Recipe::Mldg | Recipe::JeProtonetCls => {
                HeadKind::Softmax
            }
            _ => HeadKind::Prototype,
        }
    }

    /// Meta-learning run the recipe starts from, if any.
    pub fn meta_algorithm(self) -> Option<Algorithm> {
        match self {
            Recipe::Protonet
            | Recipe::ProtonetToken
            | Recipe::ProtonetLabel
            | Recipe::ProtonetFull
            | Recipe::JeProtonet
            | Recipe::JeProtonetCls => Some(Algorithm::Protonet),
            Recipe::Protomaml => Some(Algorithm::Protomaml),
            Recipe::Mldg => Some(Algorithm::Mldg),
            _ => None,
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.iter().copied().find(|r| r.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown recipe {s:?}; valid recipes: {}",
                Self::names().join(", ")
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinaryPretrainConfig {
    /// Labels mapped to `Not Offensive`; all others become `Offensive`.
    pub neutral_labels: Vec<String>,
    pub finetune: FineTuneConfig,
}

impl Default for BinaryPretrainConfig {
    fn default() -> Self {
        Self {
            neutral_labels: vec!["normal".into(), "none".into(), "neither".into()],
            finetune: FineTuneConfig::default(),
        }
    }
}

/// Everything a recipe may need besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecipeSettings {
    pub finetune: FineTuneConfig,
    pub meta: MetaConfig,
    pub mlm: MlmConfig,
    pub binary: BinaryPretrainConfig,
    pub joint_heads: usize,
    pub joint_variant: JointVariant,
    /// Seed for parameters created by the recipe itself (joint attention).
    pub init_seed: u64,
    /// Fine-tuning rate of the softmax head for recipes that rate it
    /// separately from the encoder (`mldg`, `je_protonet_cls`). Baselines
    /// use `finetune.rates` for every component.
    pub classifier_rate: f64,
}

impl Default for RecipeSettings {
    fn default() -> Self {
        Self {
            finetune: FineTuneConfig::default(),
            meta: MetaConfig::default(),
            mlm: MlmConfig::default(),
            binary: BinaryPretrainConfig::default(),
            joint_heads: 3,
            joint_variant: JointVariant::Literal,
            init_seed: 0,
            classifier_rate: 5e-3,
        }
    }
}

impl RecipeSettings {
    pub fn fusion_for(&self, recipe: Recipe) -> FusionStrategy {
        FusionStrategy {
            kind: recipe.fusion(),
            joint_heads: self.joint_heads,
            joint_variant: self.joint_variant,
        }
    }
}

/// All training domains collapsed to the binary label space and pooled.
pub fn pooled_binary(domains: &[Dataset], neutral_labels: &[String]) -> Result<Dataset> {
    let manifest = DomainManifest::new(
        "binary",
        vec![LabelDef::new(OFFENSIVE, ""), LabelDef::new(NOT_OFFENSIVE, "")],
    )?;
    let mut examples = Vec::new();
    for d in domains {
        let neutral: Vec<&str> = neutral_labels
            .iter()
            .map(String::as_str)
            .filter(|n| d.manifest.label_index(n).is_some())
            .collect();
        for e in collapse_binary(d, &neutral)?.examples {
            let ordinal = examples.len();
            examples.push(Example {
                domain_id: "binary".into(),
                ordinal,
                ..e
            });
        }
    }
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training examples to pool".into()));
    }
    Dataset::new(manifest, examples, SplitTag::Train)
}

/// The model a recipe fine-tunes from. Meta-learning recipes use the best
/// parameters of `checkpoint` when given (its fusion must match) and
/// otherwise meta-train `base` on `train_domains`.
pub fn build_recipe_model(
    recipe: Recipe,
    base: Model<f64>,
    train_domains: &[Dataset],
    settings: &RecipeSettings,
    checkpoint: Option<&LearnerState<f64>>,
) -> Result<Model<f64>> {
    let fusion = settings.fusion_for(recipe);
    if let Some(algo) = recipe.meta_algorithm() {
        if let Some(state) = checkpoint {
            if state.algorithm != algo || state.model.arch.fusion.kind != fusion.kind {
                return Err(Error::Checkpoint(format!(
                    "recipe {recipe} needs a {algo} checkpoint with {} fusion, got {} with {} fusion",
                    fusion.kind, state.algorithm, state.model.arch.fusion.kind
                )));
            }
            return Ok(state.best_model());
        }
        let mut model = base;
        model.set_fusion(fusion, settings.init_seed)?;
        let state = meta_train(algo, train_domains, model, settings.meta.clone(), &mut |_| {})?;
        return Ok(state.best_model());
    }
    let mut model = base;
    match recipe {
        Recipe::JeProtonetUntrained => {
            model.params.remove_prefix(crate::fusion::JOINT_PREFIX);
            model.set_fusion(fusion, settings.init_seed)?;
        }
        Recipe::Binary => {
            model.set_fusion(fusion, settings.init_seed)?;
            let pooled = pooled_binary(train_domains, &settings.binary.neutral_labels)?;
            let ft = supervised_finetune(model, &pooled, HeadKind::Softmax, &settings.binary.finetune)?;
            model = ft.model;
        }
        _ => model.set_fusion(fusion, settings.init_seed)?,
    }
    Ok(model)
}

/// Fine-tunes a recipe's model on each cell's K-shot set.
pub struct RecipeRunner {
    pub recipe: Recipe,
    pub model: Model<f64>,
    pub settings: RecipeSettings,
}

impl CellRunner for RecipeRunner {
    fn prepare(&mut self, train_side: &Dataset) -> Result<()> {
        if self.recipe == Recipe::Retrained {
            let arch = &self.model.arch;
            mlm_pretrain(
                &arch.encoder,
                &arch.vocab,
                &mut self.model.params,
                train_side,
                &self.settings.mlm,
            )?;
        }
        Ok(())
    }

    fn run_cell(&self, kshot: &Dataset, holdout: &Dataset, seed: u64) -> Result<Vec<usize>> {
        let mut cfg = FineTuneConfig {
            seed,
            ..self.settings.finetune.clone()
        };
        if matches!(self.recipe, Recipe::Mldg | Recipe::JeProtonetCls) {
            cfg.rates.head = self.settings.classifier_rate;
        }
        let ft = supervised_finetune(self.model.clone(), kshot, self.recipe.head(), &cfg)?;
        predict(&ft, &holdout.texts())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for r in Recipe::ALL {
            assert_eq!(r.name().parse::<Recipe>().unwrap(), r);
        }
        let err = "bogus".parse::<Recipe>().unwrap_err().to_string();
        assert!(err.contains("je_protonet_cls"));
    }

    #[test]
    fn recipe_shapes() {
        assert_eq!(Recipe::JeProtonetCls.head(), HeadKind::Softmax);
        assert_eq!(Recipe::JeProtonetCls.fusion(), FusionKind::Joint);
        assert_eq!(Recipe::JeProtonetUntrained.meta_algorithm(), None);
        assert_eq!(Recipe::Mldg.meta_algorithm(), Some(Algorithm::Mldg));
    }
}
