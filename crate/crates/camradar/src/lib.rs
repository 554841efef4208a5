//! Configuration, file formats and command implementations for the
//! `camradar` command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;
pub mod scenefile;
