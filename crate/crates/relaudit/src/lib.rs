//! Reliability-audit harness for small language models.
//!
//! The crate scores recorded generations under several evaluator pipelines,
//! computes token- and verbal-confidence calibration, measures accuracy
//! spread under prompt perturbations, and assembles deployment-readiness
//! reports with bootstrap confidence intervals.
//!
//! Modules follow the audit pipeline order:
//!
//! * [`datamodel`] — record types and strict JSONL ingestion
//! * [`prompts`] — variant templates, rendering, deterministic sampling
//! * [`extraction`] — answer-letter evaluators and the verbal-confidence parser
//! * [`calibration`] — token confidence, ECE, per-cell metric assembly
//! * [`robustness`] — accuracy spread and rank correlation panels
//! * [`bootstrap`] — deterministic percentile bootstrap engine
//! * [`client`] — OpenAI-compatible completion backend client
//! * [`report`] — report assembly, emission, and the release checklist

pub mod bootstrap;
pub mod calibration;
pub mod client;
pub mod datamodel;
pub mod extraction;
pub mod prompts;
pub mod report;
pub mod robustness;
pub mod rng;
