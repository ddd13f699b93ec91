//! Library surface of the experiment runner; the `fracfed` binary is a thin
//! wrapper over these modules.

pub mod commands;
pub mod config;
pub mod records;
