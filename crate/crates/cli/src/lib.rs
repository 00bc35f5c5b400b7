//! Library surface of the operator CLI, exposed so integration tests drive
//! the same code paths as the binary.

pub mod commands;
pub mod config;
pub mod fixture;
pub mod train;
