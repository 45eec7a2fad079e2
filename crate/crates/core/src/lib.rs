//! Desk-scale software observatorium.
//!
//! Runs many implementations of a functional abstraction against many
//! sequence-sheet tests, records every statement's response into
//! stimulus-response matrices, and keeps them in a versioned, append-only
//! stimulus-response hypercube from which behavioral analyses and
//! leakage-safe datasets are derived.

pub mod blob;
pub mod canonical;
pub mod registry;
pub mod sheet;
pub mod arena;
pub mod cube;
pub mod stub;
pub mod analysis;
pub mod dataset;
pub mod corpus;
pub mod pipeline;
