//! Operator surface for `fpd-core`: configuration files, the checkpoint
//! container, CSV and report output, and the pipeline subcommands behind the
//! `fpdlab` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
