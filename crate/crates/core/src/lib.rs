//! Relation knowledge modules over a typed procedural knowledge graph.
//!
//! Every relation of the graph schema (and its inverse) gets a small
//! two-layer `tanh` network trained with a multi-positive contrastive
//! objective. Modules compose into multi-hop programs whose intermediate
//! states can be read back as ranked entities, and the crate ships the
//! symbolic machinery needed to check them: a brute-force traversal oracle,
//! a multiple-choice question generator, a graph-propagation baseline and
//! numerical checks of the separation and composition-error guarantees.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the pipeline
//! and the command-line tool live in the `kml` crate.

#![no_std]
// Inherent float methods (std in tests, core on newer toolchains) shadow the `Float` imports.
#![allow(unused_imports)]

extern crate alloc;

pub mod graph;
pub mod logic;
pub mod nn;
pub mod program;
pub mod qa;
pub mod real;
pub mod rng;
pub mod schema;
pub mod synth;
pub mod theory;
pub mod train;

pub use graph::{Entity, EntityIdx, KgError, KnowledgeGraph, Triplet};
pub use real::Real;
pub use schema::{EntityType, RelationId, RelationType};
