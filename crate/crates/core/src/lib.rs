//! Deterministic transient-execution laboratory.
//!
//! A small register machine ([`isa`]) runs on a speculative pipeline
//! ([`pipeline`]) with branch, jump-target and return predictors
//! ([`predictors`]) and a set-associative cache ([`cache`]). Victim programs
//! from [`gadgets`] leak secrets into cache state under misprediction; the
//! [`speconnector`] receiver recovers them with Flush+Reload over aliased
//! pages, and [`mitigations`] rewrites victims to measure which defenses stop
//! which variant.

pub mod cache;
pub mod cli;
pub mod config;
pub mod gadgets;
pub mod isa;
pub mod mitigations;
pub mod pipeline;
pub mod predictors;
pub mod speconnector;
