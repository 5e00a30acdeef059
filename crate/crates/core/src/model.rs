//! A parameterised model: architecture plus parameter values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{DomainManifest, LabelDef};
use crate::encoder::{add_label_token, init_encoder_params, EncoderConfig, Vocab};
use crate::error::Result;
use crate::fusion::{
    init_joint_params, label_words, represent_on_tape, Architecture, DefinitionCache, FusionInput, FusionKind,
    FusionStrategy,
};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model<S> {
    pub arch: Architecture,
    pub params: ParamSet<S>,
}

impl<S: Scalar> Model<S> {
    /// Fresh parameters drawn from `seed`.
    pub fn init(encoder: EncoderConfig, vocab: Vocab, fusion: FusionStrategy, seed: u64) -> Result<Self> {
        encoder.validate()?;
        fusion.validate(encoder.d_model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_encoder_params(&encoder, vocab.len(), &mut rng);
        if fusion.kind == FusionKind::Joint {
            params.merge_missing(&init_joint_params(encoder.d_model, &mut rng));
        }
        Ok(Self {
            arch: Architecture { encoder, vocab, fusion },
            params,
        })
    }

    /// Switches the fusion strategy, creating joint attention weights from
    /// `seed` when they are needed and absent.
    pub fn set_fusion(&mut self, fusion: FusionStrategy, seed: u64) -> Result<()> {
        fusion.validate(self.arch.encoder.d_model)?;
        if fusion.kind == FusionKind::Joint {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            self.params
                .merge_missing(&init_joint_params(self.arch.encoder.d_model, &mut rng));
        }
        self.arch.fusion = fusion;
        Ok(())
    }

    /// Registers whole-label tokens for `manifest` when fusing label tokens.
    pub fn prepare_labels(&mut self, manifest: &DomainManifest) -> Result<()> {
        if self.arch.fusion.kind == FusionKind::Token {
            for l in &manifest.labels {
                add_label_token(&label_words(l), &mut self.arch.vocab, &mut self.params)?;
            }
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.arch.encoder.d_model
    }

    /// Inference representation of one input.
    pub fn represent(&self, text: &str, domain: &DomainManifest, label: Option<&LabelDef>) -> Result<Vec<S>> {
        let mut tape = Tape::new();
        let mut cache = DefinitionCache::new();
        let v = represent_on_tape(
            &mut tape,
            &self.arch,
            &self.params,
            FusionInput { text, domain, label },
            &mut cache,
            None,
        )?;
        Ok(tape.value(v).row(0).to_vec())
    }

    /// Inference representations stacked as rows.
    pub fn represent_many(&self, inputs: &[FusionInput<'_>]) -> Result<Matrix<S>> {
        let mut out = Matrix::zeros(0, self.d_model());
        for input in inputs {
            let mut tape = Tape::new();
            let mut cache = DefinitionCache::new();
            let v = represent_on_tape(&mut tape, &self.arch, &self.params, *input, &mut cache, None)?;
            out.push_row(tape.value(v).row(0));
        }
        Ok(out)
    }
}
