pub mod commands;
pub mod config;
pub mod workspace;

use semfl::Error;

/// Process exit status for a failed command: 1 usage or configuration,
/// 2 integrity or staleness, 3 backend.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Argument(_) | Error::Config(_) | Error::Io { .. } => 1,
        Error::Parse(_) | Error::Integrity(_) | Error::Undefined(_) | Error::Stale { .. } | Error::Json(_) => 2,
        Error::Backend(_) | Error::Extraction { .. } | Error::QueryGen { .. } => 3,
    }
}
