//! Synthetic task, training loop, evaluation and the baseline suite.

mod eval;
mod integrity;
mod suite;
mod task;
mod train;

pub use eval::{
    eval_streaming, eval_teacher_forced, match_responses, AlwaysSilent, EmittedResponse, LogitScorer, ModelResponder,
    OraclePlayback, Responder, StreamEvalConfig, StreamMetrics, TeacherForcedMetrics,
};
pub use integrity::{gradcheck_config, gradcheck_model, ModelGradCheck, GRADCHECK_EPS, GRADCHECK_TOL};
pub use suite::{
    baseline_entries, desk_costs, run_suite, run_suite_on, suite_csv, SuiteConfig, SuiteData, SuiteEntry, SuiteReport,
    SuiteRow, EVAL_STREAM_OFFSET, SUITE_CSV_HEADER,
};
pub use task::{generate_dataset, generate_stream, EventRecord, GroundTruth, SyntheticTaskConfig};
pub use train::{train, OptimizerConfig, TrainConfig, TrainReport};
