//! Library half of the `relmap` command: configuration handling and the
//! command implementations, kept separate from argument parsing so they
//! can be tested directly.

pub mod config;
pub mod run;
