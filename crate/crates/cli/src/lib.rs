pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod verify;
