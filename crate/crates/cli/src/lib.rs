//! Command-line front end: embedding file formats, run configuration,
//! reports and the `gen`, `eval`, `train` and `sweep` commands.

// `!(x <= y)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod format;
pub mod report;
