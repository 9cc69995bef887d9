pub mod cli;
pub mod cluster;
pub mod config;
pub mod coordinator;
pub mod launcher;
pub mod results;
pub mod rpc;
