//! Command-line front end and loopback JSON service for the workflow engine.

pub mod adapter;
pub mod cli;
pub mod exit;
pub mod service;
