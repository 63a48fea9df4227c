//! Decentralized training with partial all-reduce: a simulator and a
//! threaded runtime for heterogeneous worker clusters.

pub mod analyze;
pub mod collective;
pub mod config;
pub mod coordinator;
pub mod gossip;
pub mod model;
pub mod policy;
pub mod schedule;
pub mod sim;
pub mod sweep;
pub mod topology;
pub mod trainer;
pub mod transport;
