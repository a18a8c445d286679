//! Reasoning-augmented distillation for continual dialogue state tracking.

pub mod cache;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod embed;
pub mod error;
pub mod http;
pub mod io;
pub mod metrics;
pub mod par;
pub mod perturb;
pub mod pipeline;
pub mod prompt;
pub mod quandary;
pub mod select;
pub mod teacher;

pub use error::{Error, Result};
