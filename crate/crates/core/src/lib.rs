//! Multi-agent differential-diagnosis engine for cardiology.

pub mod corpus;
pub mod domain;
pub mod eval;
pub mod gateway;
pub mod knowledge;
pub mod pipeline;
pub mod reference;
pub mod setup;
pub mod tools;
pub mod trace;
