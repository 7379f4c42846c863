pub mod callgraph;
pub mod chat;
pub mod community;
pub mod error;
pub mod eval;
pub mod index;
pub mod knowledge;
pub mod mock;
pub mod par;
pub mod prompts;
pub mod querygen;
pub mod retrieval;
pub mod util;
pub mod voting;

pub use error::{BackendError, Error, Result};
