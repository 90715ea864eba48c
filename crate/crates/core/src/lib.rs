//! Replicated, persistent key-value store with KV separation.
//!
//! Primaries run an LSM engine whose compactions produce immutable B+-tree
//! levels; instead of recompacting, backups receive those levels over the
//! wire and rewrite their pointers for the local device layout.

pub mod device;
pub mod engine;
pub mod index_wire;
pub mod cluster;
pub mod replication;
pub mod rpc;
pub mod transport;
