//! Experiment plumbing for the `mvpl` binary: run configs, the verbs, and the
//! ablation grids.

pub mod config;
pub mod run;

use mvpl_core::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Bad input (config, arguments, missing input files) exits with 1, anything
/// that fails while running exits with 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}
