//! Independent reference implementations shared by the oracle tests and
//! the acceptance run.

#![allow(dead_code)]

pub mod crf;
pub mod kl;
pub mod metric;
pub mod thinning;
