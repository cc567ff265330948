//! Configuration, persisted model bundles and the subcommand
//! implementations behind the `legp` binary.

pub mod bundle;
pub mod commands;
pub mod config;

pub use bundle::ModelBundle;
pub use commands::{
    cmd_assoc, cmd_cv, cmd_fit, cmd_partition, cmd_predict, cmd_simulate, fit_model, predict_with, Prediction,
};
pub use config::RunConfig;

/// Process exit code for an error: 2 for numerical failures, 1 otherwise.
pub fn exit_code(e: &crate::Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}
