//! Command-line front end for the co-simulation bridge: scenario files,
//! configuration lints, parameter grids and the subcommand bodies.

pub mod commands;
pub mod config;
pub mod grid;
pub mod lint;
