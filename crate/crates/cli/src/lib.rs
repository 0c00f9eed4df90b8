//! Orchestration of the attribution experiment: configuration, the
//! in-memory pipeline and the file-based subcommands.

pub mod commands;
pub mod config;
pub mod pipeline;

use hindsight_core::ErrorClass;

/// Process exit code for a failed run.
pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}
