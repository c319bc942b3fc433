// `!(x > 0.0)` is used on purpose throughout so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod datasim;
pub mod encoders;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod reconstruction;
pub mod training;
