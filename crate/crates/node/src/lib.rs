//! A DEUS node served over HTTP, with its CLI client, scenario runner and
//! fuzzer.

pub mod api;
pub mod binding;
pub mod client;
pub mod config;
pub mod fuzz;
pub mod harness;
pub mod runtime;
pub mod server;

pub use config::NodeConfig;
pub use runtime::{NodeRuntime, StartError};
pub use server::RunningNode;
