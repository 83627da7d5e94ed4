//! Simulation gym and evaluation harness for proactive LLM agents.
//!
//! The crate is organised around the pipeline it drives:
//!
//! * [`trace`] holds the shared domain types (events, predictions, judgments)
//!   and their line-oriented JSON encodings.
//! * [`ingest`] turns raw activity-monitor logs into merged segments and
//!   natural-language events.
//! * [`gateway`] is the single door to chat and embedding backends, either a
//!   live OpenAI-compatible endpoint or a scripted replay of fixtures.
//! * [`gym`] generates scenarios and events and maintains environment state.
//! * [`agent`] is the proactive agent: memory, prediction, refinement and
//!   tool-driven task execution.
//! * [`judge`] imitates the user: reward-model judging, label-target
//!   selection, majority voting and annotator agreement.
//! * [`metrics`] classifies outcomes and computes the proactiveness metrics.
//! * [`runner`] orchestrates simulation and evaluation runs.
//! * [`service`] covers configuration, dataset persistence and the
//!   annotation HTTP service; [`cli`] wires it all into the `proagym` binary.

pub mod agent;
pub mod cli;
pub mod error;
pub mod gateway;
pub mod gym;
pub mod ingest;
pub mod judge;
pub mod metrics;
pub mod prompts;
pub mod runner;
pub mod service;
pub mod trace;

pub use error::{Error, Result};
