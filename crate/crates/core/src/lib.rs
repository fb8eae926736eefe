//! Prototypical contrastive embedding for generalized zero-shot learning.
//!
//! A conditional WGAN-GP generator synthesizes visual features from class
//! attribute vectors; an embedding network trained with a margin-based,
//! instance-adaptive prototypical contrastive loss and RelationNet semantic
//! losses shapes the space in which the final softmax classifier operates.
//!
//! Every network is a small dense MLP with hand-derived gradients, so the
//! whole engine runs on a CPU and every gradient can be checked against
//! central finite differences (see [`gradcheck`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod ndcore;
pub mod pipeline;

pub use error::{Error, Result};
pub use ndcore::{Matrix, Param, Rng};
