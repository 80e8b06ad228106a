//! Operational shell around the core pipeline: CLI commands and the live
//! session server consumed by the touch console.

pub mod cli;
pub mod protocol;
pub mod server;
pub mod session;

pub use session::{Session, Shared};
