//! Verification experiments: mask similarity, neuron utilization, the NTK
//! factorization, gradient checks and the capacity sweep.

mod grad_check;
mod ntk;
mod reference;
mod similarity;
pub mod stats;
mod sweep;
mod utilization;

pub use grad_check::{
    check_gradients, corrupt_transpose, grad_check, relative_error, tiny_problem, GradCheckReport,
    CHECKED_VARIANTS, DEFAULT_TOLERANCE, FD_STEP, RELATIVE_FLOOR,
};
pub use ntk::{frobenius_rel_error, verify_ntk_decomposition, NtkReport, NTK_MAX_LAYERS, NTK_MAX_WIDTH};
pub use reference::{flatten_f64, reference_loss, softmax_f64, ReferenceMlp, ReferencePass};
pub use similarity::{
    run_similarity_experiment, DecileRow, LevelSummary, SimilarityConfig, SimilarityReport,
    SimilarityRow, DECILES,
};
pub use sweep::{run_capacity_sweep, run_point, SweepConfig, SweepPoint, SweepRecord, SweepReport};
pub use utilization::{
    activation_counts, run_utilization_experiment, NetworkUtilization, UtilizationConfig,
    UtilizationReport,
};
