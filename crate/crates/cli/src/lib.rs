//! Command-line harness and live service around `cannula_core`.

pub mod args;
pub mod offline;
pub mod output;
pub mod service;
