//! Episodic meta-learning (prototypical networks, first-order ProtoMAML,
//! MLDG) and supervised fine-tuning over fused representations.

pub mod episode;
pub mod finetune;
pub mod heads;
pub mod mldg;
pub mod proto;
pub mod protomaml;
pub mod schedule;
pub mod train;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::corpus::{DomainManifest, LabelDef};
use crate::encoder::Dropout;
use crate::error::Result;
use crate::fusion::{represent_on_tape, DefinitionCache, FusionInput};
use crate::model::Model;
use crate::params::ParamSet;
use crate::scalar::Scalar;

pub use episode::{sample_episode, Episode, EpisodeSampler};
pub use finetune::{predict, supervised_finetune, FineTuneConfig, FineTuned, HeadKind};
pub use mldg::{mldg_gradient, mldg_update};
pub use proto::{compute_prototypes, proto_classify, proto_episode_loss, Distance, Prototypes};
pub use protomaml::{fo_protomaml_step, protomaml_head_init, LinearHead};
pub use schedule::CosineSchedule;
pub use train::{meta_train, Algorithm, LearnerState, MetaConfig, TrainEvent};

/// Text plus the label fused into it, if any.
pub type BatchItem<'a> = (&'a str, Option<&'a LabelDef>);

/// Representations of `items` stacked as rows of one `n × d_model` tape node.
/// `params` may differ from `model.params` (adapted copies). An rng enables dropout.
pub(crate) fn represent_batch_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    params: &ParamSet<S>,
    domain: &DomainManifest,
    items: &[BatchItem<'_>],
    cache: &mut DefinitionCache,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let rate = model.arch.encoder.dropout;
    let mut rows = Vec::with_capacity(items.len());
    for &(text, label) in items {
        let dropout = rng
            .as_deref_mut()
            .filter(|_| rate > 0.0)
            .map(|rng| Dropout { rate, rng });
        rows.push(represent_on_tape(
            tape,
            &model.arch,
            params,
            FusionInput { text, domain, label },
            cache,
            dropout,
        )?);
    }
    Ok(tape.concat_rows(&rows))
}
