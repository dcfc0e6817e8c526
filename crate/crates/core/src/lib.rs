pub mod domain;
pub mod session;
pub mod wire;
pub mod analytics;
pub mod ingest;
pub mod alert;
pub mod config;
pub mod nodesim;
pub mod station;
pub mod replay;
