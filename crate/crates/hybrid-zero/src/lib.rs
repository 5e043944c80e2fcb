pub mod config;
pub mod orchestrator;
pub mod store;
pub mod evaluate;
pub mod report;
pub mod suite;
