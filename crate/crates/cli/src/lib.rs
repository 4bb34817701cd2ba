//! Command-line harness around the `textalign` library: configuration,
//! experiment runs, reports and transcript inspection.

pub mod cli;
pub mod config;
pub mod report;
pub mod run;
