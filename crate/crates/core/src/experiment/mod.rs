//! Run configuration and the command implementations behind the CLI.

mod commands;
mod config;
mod gradcheck;

pub use commands::{
    ablation_cells, checkpoint_file, cmd_ablate, cmd_evaluate, cmd_generate, cmd_gradcheck, cmd_train, fold_plan,
    resolve_dataset, trace_file, AblationOutput, AblationRow, EvaluateOutput, GenerateOutput, TrainRunOutput,
    ABLATION_CSV, DATASET_FILE, EVAL_METRICS_CSV, EVAL_METRICS_JSONL, FOLDS_FILE, GRADCHECK_JSON, MANIFEST_FILE,
    METRICS_CSV, METRICS_JSONL,
};
pub use config::{
    AblationSection, ConfigError, DatasetSection, GradCheckSection, ModuleSwitch, Overrides, Protocol, RunConfig,
    TrainSection,
};
pub use gradcheck::{run_gradcheck_suite, CheckResult, SuiteReport};
