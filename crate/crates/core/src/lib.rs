//! Storage-gateway cache for a remote medical imaging archive: LRU-weight
//! eviction, long- and short-term prefetching driven by usage-pattern
//! recognition, and a deterministic trace-driven simulator to evaluate them.

pub mod cache;
pub mod domain;
pub mod mlp;
pub mod patterns;
pub mod prefetch;
pub mod sensors;
pub mod sim;
pub mod trace;
