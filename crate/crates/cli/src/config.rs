//! Run configuration: one TOML file with dotted sections, every key
//! mirrored by exactly one command-line flag. Flags override the file.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use protofuse::encoder::mlm::MlmConfig;
use protofuse::encoder::EncoderConfig;
use protofuse::evaluate::recipes::BinaryPretrainConfig;
use protofuse::evaluate::{ProtocolSpec, RecipeSettings};
use protofuse::fusion::{FusionKind, FusionStrategy, JointVariant};
use protofuse::metalearn::mldg::MldgHeadConfig;
use protofuse::metalearn::{Algorithm, Distance, FineTuneConfig, MetaConfig};
use protofuse::params::ComponentRates;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds parameter initialisation, meta-training and MLM masking.
    pub seed: u64,
    /// Parallel evaluation cells; 1 runs them in order.
    pub jobs: usize,
    pub paths: Paths,
    pub encoder: EncoderSection,
    pub fusion: FusionStrategy,
    pub meta: MetaSection,
    pub finetune: FinetuneSection,
    pub mlm: MlmSection,
    pub binary: BinarySection,
    pub ingest: IngestSection,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            paths: Paths::default(),
            encoder: EncoderSection::default(),
            fusion: FusionStrategy::default(),
            meta: MetaSection::default(),
            finetune: FinetuneSection::default(),
            mlm: MlmSection::default(),
            binary: BinarySection::default(),
            ingest: IngestSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Output directory for datasets, models, checkpoints and reports.
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub records: Option<PathBuf>,
    /// Dataset files of the training domains.
    pub train: Vec<PathBuf>,
    /// Dataset file of the target domain.
    pub test: Option<PathBuf>,
    /// Base model written by `pretrain`.
    pub model: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            manifest: None,
            records: None,
            train: Vec::new(),
            test: None,
            model: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            d_model: 48,
            layers: 2,
            heads: 4,
            max_len: 64,
            dropout: 0.1,
            vocab_size: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaSection {
    pub algo: Algorithm,
    pub epochs: usize,
    pub tasks: usize,
    pub k_choices: Vec<usize>,
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Outer rate of the joint attention block; `outer_lr` when absent.
    pub attention_lr: Option<f64>,
    /// Outer rate of classification heads; `outer_lr` when absent.
    pub head_lr: Option<f64>,
    pub mldg_beta: f64,
    pub inner_steps: usize,
    pub distance: Distance,
    pub mldg_head_steps: usize,
    pub mldg_head_lr: f64,
}

impl Default for MetaSection {
    fn default() -> Self {
        let m = MetaConfig::default();
        let h = MldgHeadConfig::default();
        Self {
            algo: Algorithm::Protonet,
            epochs: m.meta_epochs,
            tasks: m.tasks_per_epoch,
            k_choices: m.k_choices,
            inner_lr: m.inner_lr,
            outer_lr: m.outer_lr,
            attention_lr: None,
            head_lr: None,
            mldg_beta: m.mldg_beta,
            inner_steps: m.inner_steps,
            distance: m.distance,
            mldg_head_steps: h.steps,
            mldg_head_lr: h.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    /// Peak encoder rate.
    pub lr: f64,
    pub attention_lr: Option<f64>,
    pub head_lr: Option<f64>,
    /// Head rate for `mldg` and `je_protonet_cls`.
    pub classifier_lr: f64,
    pub floor: f64,
    pub batch_size: usize,
    pub distance: Distance,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FineTuneConfig::default();
        Self {
            epochs: f.epochs,
            lr: f.rates.encoder,
            attention_lr: None,
            head_lr: None,
            classifier_lr: RecipeSettings::default().classifier_rate,
            floor: f.floor,
            batch_size: f.batch_size,
            distance: f.distance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmSection {
    pub epochs: usize,
    pub mask_rate: f64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for MlmSection {
    fn default() -> Self {
        let m = MlmConfig::default();
        Self {
            epochs: m.epochs,
            mask_rate: m.mask_rate,
            lr: m.lr,
            batch_size: m.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinarySection {
    /// Labels collapsed to `Not Offensive`.
    pub neutral: Vec<String>,
    /// Epochs of binary pretraining for the `binary` recipe.
    pub epochs: usize,
}

impl Default for BinarySection {
    fn default() -> Self {
        let b = BinaryPretrainConfig::default();
        Self {
            neutral: b.neutral_labels,
            epochs: b.finetune.epochs,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSection {
    /// Collapse the ingested domain to the binary label space.
    pub binary: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub recipe: String,
    pub k: Vec<usize>,
    pub seeds: Vec<u64>,
    pub holdout_fraction: f64,
    pub holdout_seed: u64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        let p = ProtocolSpec::default();
        Self {
            recipe: "protonet".into(),
            k: p.k_values,
            seeds: p.seeds,
            holdout_fraction: p.holdout_fraction,
            holdout_seed: p.holdout_seed,
        }
    }
}

/// Generates the flag struct, its application onto a [`RunConfig`] and the
/// flag-to-key table from one list.
macro_rules! overrides {
    ($( $(#[$attr:meta])* $field:ident : $ty:ty => $key:literal => $($path:ident).+ ; )*) => {
        /// Configuration flags; each sets the config key named in its help.
        #[derive(clap::Args, Clone, Debug, Default)]
        pub struct Overrides {
            $(
                $(#[$attr])*
                #[arg(long, global = true, help_heading = "Configuration")]
                pub $field: Option<$ty>,
            )*
        }

        impl Overrides {
            pub fn apply(&self, cfg: &mut RunConfig) {
                $(
                    if let Some(v) = &self.$field {
                        cfg.$($path).+ = v.clone().into();
                    }
                )*
            }
        }

        /// `(flag, config key)` for every configuration flag.
        #[cfg(test)]
        pub const FLAG_KEYS: &[(&str, &str)] = &[$((stringify!($field), $key),)*];
    };
}

overrides! {
    /// [seed]
    seed: u64 => "seed" => seed;
    /// [jobs]
    jobs: usize => "jobs" => jobs;
    /// [paths.out]
    #[arg(env = "PROTOFUSE_OUT")]
    out: PathBuf => "paths.out" => paths.out;
    /// [paths.manifest]
    manifest: PathBuf => "paths.manifest" => paths.manifest;
    /// [paths.records]
    records: PathBuf => "paths.records" => paths.records;
    /// [paths.train] comma-separated dataset files
    #[arg(value_delimiter = ',')]
    train: Vec<PathBuf> => "paths.train" => paths.train;
    /// [paths.test]
    test: PathBuf => "paths.test" => paths.test;
    /// [paths.model]
    model: PathBuf => "paths.model" => paths.model;
    /// [paths.checkpoint]
    checkpoint: PathBuf => "paths.checkpoint" => paths.checkpoint;
    /// [encoder.d_model]
    d_model: usize => "encoder.d_model" => encoder.d_model;
    /// [encoder.layers]
    layers: usize => "encoder.layers" => encoder.layers;
    /// [encoder.heads]
    heads: usize => "encoder.heads" => encoder.heads;
    /// [encoder.max_len]
    max_len: usize => "encoder.max_len" => encoder.max_len;
    /// [encoder.dropout]
    dropout: f64 => "encoder.dropout" => encoder.dropout;
    /// [encoder.vocab_size]
    vocab_size: usize => "encoder.vocab_size" => encoder.vocab_size;
    /// [fusion.kind] none|token|label|full|joint
    fusion: FusionKind => "fusion.kind" => fusion.kind;
    /// [fusion.joint_heads]
    joint_heads: usize => "fusion.joint_heads" => fusion.joint_heads;
    /// [fusion.joint_variant] literal|standard
    joint_variant: JointVariant => "fusion.joint_variant" => fusion.joint_variant;
    /// [meta.algo] protonet|protomaml|mldg
    algo: Algorithm => "meta.algo" => meta.algo;
    /// [meta.epochs]
    epochs: usize => "meta.epochs" => meta.epochs;
    /// [meta.tasks] episodes per meta epoch
    tasks: usize => "meta.tasks" => meta.tasks;
    /// [meta.k_choices]
    #[arg(value_delimiter = ',')]
    k_choices: Vec<usize> => "meta.k_choices" => meta.k_choices;
    /// [meta.inner_lr]
    inner_lr: f64 => "meta.inner_lr" => meta.inner_lr;
    /// [meta.outer_lr]
    outer_lr: f64 => "meta.outer_lr" => meta.outer_lr;
    /// [meta.attention_lr]
    attention_lr: f64 => "meta.attention_lr" => meta.attention_lr;
    /// [meta.head_lr]
    head_lr: f64 => "meta.head_lr" => meta.head_lr;
    /// [meta.mldg_beta]
    mldg_beta: f64 => "meta.mldg_beta" => meta.mldg_beta;
    /// [meta.inner_steps]
    inner_steps: usize => "meta.inner_steps" => meta.inner_steps;
    /// [meta.distance] euclidean|squared_euclidean
    distance: Distance => "meta.distance" => meta.distance;
    /// [meta.mldg_head_steps]
    mldg_head_steps: usize => "meta.mldg_head_steps" => meta.mldg_head_steps;
    /// [meta.mldg_head_lr]
    mldg_head_lr: f64 => "meta.mldg_head_lr" => meta.mldg_head_lr;
    /// [finetune.epochs]
    ft_epochs: usize => "finetune.epochs" => finetune.epochs;
    /// [finetune.lr]
    ft_lr: f64 => "finetune.lr" => finetune.lr;
    /// [finetune.attention_lr]
    ft_attention_lr: f64 => "finetune.attention_lr" => finetune.attention_lr;
    /// [finetune.head_lr]
    ft_head_lr: f64 => "finetune.head_lr" => finetune.head_lr;
    /// [finetune.classifier_lr]
    classifier_lr: f64 => "finetune.classifier_lr" => finetune.classifier_lr;
    /// [finetune.floor]
    ft_floor: f64 => "finetune.floor" => finetune.floor;
    /// [finetune.batch_size]
    batch_size: usize => "finetune.batch_size" => finetune.batch_size;
    /// [finetune.distance]
    ft_distance: Distance => "finetune.distance" => finetune.distance;
    /// [mlm.epochs]
    mlm_epochs: usize => "mlm.epochs" => mlm.epochs;
    /// [mlm.mask_rate]
    mask_rate: f64 => "mlm.mask_rate" => mlm.mask_rate;
    /// [mlm.lr]
    mlm_lr: f64 => "mlm.lr" => mlm.lr;
    /// [mlm.batch_size]
    mlm_batch_size: usize => "mlm.batch_size" => mlm.batch_size;
    /// [binary.neutral] comma-separated label names
    #[arg(value_delimiter = ',')]
    neutral: Vec<String> => "binary.neutral" => binary.neutral;
    /// [binary.epochs]
    binary_epochs: usize => "binary.epochs" => binary.epochs;
    /// [ingest.binary]
    #[arg(num_args = 0..=1, default_missing_value = "true")]
    binary: bool => "ingest.binary" => ingest.binary;
    /// [evaluate.recipe]
    recipe: String => "evaluate.recipe" => evaluate.recipe;
    /// [evaluate.k] comma-separated K values
    #[arg(value_delimiter = ',')]
    k: Vec<usize> => "evaluate.k" => evaluate.k;
    /// [evaluate.seeds] comma-separated seeds
    #[arg(value_delimiter = ',')]
    seeds: Vec<u64> => "evaluate.seeds" => evaluate.seeds;
    /// [evaluate.holdout_fraction]
    holdout_fraction: f64 => "evaluate.holdout_fraction" => evaluate.holdout_fraction;
    /// [evaluate.holdout_seed]
    holdout_seed: u64 => "evaluate.holdout_seed" => evaluate.holdout_seed;
}

impl RunConfig {
    /// Defaults, then `file` when given, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match file {
            Some(path) => {
                let body = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&body).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        overrides.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.encoder_config().validate()?;
        self.fusion.validate(self.encoder.d_model)?;
        self.meta_config().validate()?;
        self.protocol().validate()?;
        anyhow::ensure!(self.jobs >= 1, "jobs must be at least 1");
        anyhow::ensure!(self.encoder.vocab_size > 0, "vocab_size must be positive");
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.encoder.d_model,
            n_layers: self.encoder.layers,
            n_heads: self.encoder.heads,
            max_len: self.encoder.max_len,
            dropout: self.encoder.dropout,
            seed: self.seed,
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        let m = &self.meta;
        let rates = (m.attention_lr.is_some() || m.head_lr.is_some()).then(|| ComponentRates {
            encoder: m.outer_lr,
            attention: m.attention_lr.unwrap_or(m.outer_lr),
            head: m.head_lr.unwrap_or(m.outer_lr),
        });
        MetaConfig {
            meta_epochs: m.epochs,
            tasks_per_epoch: m.tasks,
            k_choices: m.k_choices.clone(),
            inner_lr: m.inner_lr,
            outer_lr: m.outer_lr,
            mldg_beta: m.mldg_beta,
            inner_steps: m.inner_steps,
            distance: m.distance,
            rates,
            mldg_head: MldgHeadConfig {
                steps: m.mldg_head_steps,
                lr: m.mldg_head_lr,
            },
            seed: self.seed,
            ..MetaConfig::default()
        }
    }

    pub fn finetune_config(&self) -> FineTuneConfig {
        let f = &self.finetune;
        FineTuneConfig {
            epochs: f.epochs,
            rates: ComponentRates {
                encoder: f.lr,
                attention: f.attention_lr.unwrap_or(f.lr),
                head: f.head_lr.unwrap_or(f.lr),
            },
            floor: f.floor,
            batch_size: f.batch_size,
            distance: f.distance,
            ..FineTuneConfig::default()
        }
    }

    pub fn mlm_config(&self) -> MlmConfig {
        MlmConfig {
            epochs: self.mlm.epochs,
            mask_rate: self.mlm.mask_rate,
            batch_size: self.mlm.batch_size,
            lr: self.mlm.lr,
            seed: self.seed,
        }
    }

    pub fn recipe_settings(&self) -> RecipeSettings {
        let finetune = self.finetune_config();
        RecipeSettings {
            finetune: finetune.clone(),
            meta: self.meta_config(),
            mlm: self.mlm_config(),
            binary: BinaryPretrainConfig {
                neutral_labels: self.binary.neutral.clone(),
                finetune: FineTuneConfig {
                    epochs: self.binary.epochs,
                    seed: self.seed,
                    ..finetune
                },
            },
            joint_heads: self.fusion.joint_heads,
            joint_variant: self.fusion.joint_variant,
            init_seed: self.seed,
            classifier_rate: self.finetune.classifier_lr,
        }
    }

    pub fn protocol(&self) -> ProtocolSpec {
        ProtocolSpec {
            k_values: self.evaluate.k.clone(),
            seeds: self.evaluate.seeds.clone(),
            holdout_fraction: self.evaluate.holdout_fraction,
            holdout_seed: self.evaluate.holdout_seed,
        }
    }

    /// The configuration echoed into reports: everything that can change
    /// results, without machine-specific paths or the job count.
    pub fn report_echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
            obj.remove("jobs");
            obj.remove("ingest");
        }
        v
    }
}
