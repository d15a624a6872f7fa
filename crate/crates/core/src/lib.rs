//! Rubric-aligned automated scoring.
//!
//! A response is scored in two agent calls: an extraction agent records the
//! rubric-relevant components of the response as a validated
//! [`schema::StructuredRepresentation`], then a scoring agent assigns an
//! integer score from that representation, the task context and the
//! original response. A single-call baseline scores directly from the rubric.
//! The crate also loads ASAP-style datasets, runs resumable scoring jobs,
//! computes agreement metrics and renders comparison reports.

pub mod agents;
pub mod backend;
pub mod config;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod schema;
