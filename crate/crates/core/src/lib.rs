//! Core engine for parsweep: loop discovery and instrumentation, combination
//! enumeration, parallelizer backends, sweep execution, result storage and
//! per-loop fusion of the fastest schemes into a single parallel source.

pub mod analysis;
pub mod backends;
pub mod combinator;
pub mod executor;
pub mod fragmentor;
pub mod fuser;
pub mod lexer;
pub mod sim;
pub mod source;
pub mod store;
pub mod sweep;
