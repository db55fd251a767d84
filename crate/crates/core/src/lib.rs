//! Desk-scale toolkit for studying how merged models are evaluated: train
//! task-specific MLP classifiers from a shared base, merge their encoders
//! (weight averaging, task arithmetic, Ties) and compare evaluation
//! protocols that do or do not realign the merged representation with each
//! task's classifier.

pub mod cli;
pub mod error;
pub mod experiment;
pub mod merging;
pub mod models;
pub mod numkit;
pub mod protocols;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
