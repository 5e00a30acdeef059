//! K-shot evaluation protocol: holdout, per-cell fine-tuning, macro-F1,
//! hyperparameter selection and report files.

pub mod metrics;
pub mod protocol;
pub mod recipes;
pub mod report;
pub mod select;

pub use metrics::{macro_f1, macro_f1_in, mean_std};
pub use protocol::{run_protocol, CellRunner, ProtocolSpec};
pub use recipes::{build_recipe_model, Recipe, RecipeRunner, RecipeSettings};
pub use report::{emit_report, load_report, EvaluationReport};
pub use select::{select_hyperparams, Selection};
