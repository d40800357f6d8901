// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod replay;
pub mod sim;
pub mod catalog;
pub mod datagen;
pub mod nn;
pub mod gvf;
pub mod eval;
pub mod policy;
pub mod run;
