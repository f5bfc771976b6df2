//! Federated participation control for pools of task-performing agents and
//! evaluating critics.
//!
//! A central coordinator broadcasts one scalar feedback signal per modality
//! for agents and one for critics. Each participant turns the signal, its own
//! running activation average, and the derivative of its private cost into a
//! Bernoulli participation probability. The time-average active states
//! converge to the solution of the centralized resource-allocation program,
//! which [`oracle`] solves directly for reference.
//!
//! Modules:
//! - [`model`] — configuration, schedules, shared domain types.
//! - [`cost`] — agent/critic cost functions and coefficient sampling.
//! - [`coordinator`] — feedback-signal updates and broadcast accounting.
//! - [`participants`] — per-step agent/critic logic and the task exchange.
//! - [`oracle`] — centralized solver, grid search, KKT residuals.
//! - [`sim`] — closed-loop simulation, traces, empirical diagnostics.
//! - [`telemetry`] — network-telemetry CSV preprocessing pipeline.
//! - [`faultlab`] — fault detection/severity harness on top of the protocol.

pub mod coordinator;
pub mod cost;
pub mod faultlab;
pub mod model;
pub mod oracle;
pub mod participants;
pub mod rng;
pub mod sim;
pub mod telemetry;
