//! Command line front end and HTTP service for spanlight.

pub mod commands;
pub mod service;
