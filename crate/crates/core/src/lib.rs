//! Desk-scale laboratory for semi-supervised teacher-student training of
//! frame classifiers on synthetic HMM data.

pub mod cli;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod fsutil;
pub mod harness;
pub mod net;
pub mod par;
pub mod risk;
pub mod rng;
pub mod takd;

pub use error::{Error, Result};
