// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod feature_io;
pub mod grid;
pub mod ipf;
pub mod metrics;
pub mod net;
pub mod synth;
