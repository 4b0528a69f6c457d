//! HTTP service and command-line front end over a trained checkpoint.

pub mod api;
pub mod cli;
pub mod service;

pub use service::{router, AppState, Limits};
