//! Command implementations and the session server behind the `partaog` binary.

pub mod commands;
pub mod server;
