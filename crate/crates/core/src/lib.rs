//! Rationale-guided training for small sequence models.
//!
//! The crate trains task models whose objective combines an ordinary task
//! loss with an interpretation alignment loss, so that the tokens the model
//! attributes its decisions to line up with annotated rationales. Three
//! attribution backends are provided (input gradients, input marginalization
//! with replacement models, and a trainable extractor), together with the
//! training schedules that make the combined objective work in practice.

pub mod attribution;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod replace;
pub mod schedule;
pub mod synthetic;
pub mod tape;

pub use tape::{NodeId, Tape};
