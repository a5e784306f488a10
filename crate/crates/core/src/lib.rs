//! Few-shot inductive link prediction on knowledge graphs.
//!
//! Candidate triplets are scored from the directed subgraph enclosing their
//! head and tail ([`subgraph`]) by a small message-passing network
//! ([`mpnn`]). Training ([`trainer`]) alternates an inner update on
//! large-shot relations, a meta-update on few-shot relations and a corrective
//! large-shot step, with per-parameter learnable inner learning rates.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod kg;
pub mod mpnn;
pub mod subgraph;
pub mod synthkg;
pub mod trainer;

pub use error::{Error, Result};
