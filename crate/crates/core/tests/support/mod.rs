//! Independent reference implementations shared by the oracle suites.
#![allow(dead_code)]

pub mod assoc;
pub mod metrics;
