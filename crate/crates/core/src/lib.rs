#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod meta;
pub mod nets;
pub mod params;

pub use error::{Error, Result};
