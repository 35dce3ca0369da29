//! Deterministic clinical tools invoked by the agents.

pub mod ecg;
pub mod risk;
pub mod tabular;
