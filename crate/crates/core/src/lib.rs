// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval_report;
pub mod experiment;
pub mod label_model;
pub mod losses;
pub mod seed;
pub mod streams;

pub use error::{Error, Result};
