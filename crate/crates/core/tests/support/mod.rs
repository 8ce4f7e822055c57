//! Checks shared by the integration suites and the acceptance run.
#![allow(dead_code)]

pub mod equivalence;
pub mod model;
