#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod nn;
pub mod numerics;
pub mod scoring;
pub mod seed;
pub mod tail;

pub use error::{Error, Result};
