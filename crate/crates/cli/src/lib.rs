pub mod commands;
pub mod config;
pub mod experiment;
pub mod svg;
pub mod table;
pub mod verify;
