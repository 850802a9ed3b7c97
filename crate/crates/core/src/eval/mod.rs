//! Segmentation metrics and the single-iteration and iterative inference
//! protocols.

mod metrics;
mod protocols;

pub use metrics::{accuracy, adjusted_rand_index, level_consistency, macro_f1, Metrics};
pub use protocols::{
    iterative_eval, level_agreement, restricted_argmax, single_iteration_eval, single_iteration_predictions,
    subsequence_logits, CurvePoint, EvalReport, EvalSettings, IterativeCurve, IterativeSettings, LevelPredictions,
    LevelReport, Protocol,
};
pub use protocols::memory_tokens;
