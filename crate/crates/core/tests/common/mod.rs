//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;
pub mod setup;
