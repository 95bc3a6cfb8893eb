//! Quality metrics, BD-rate, complexity accounting and corpus evaluation.

pub mod bd;
pub mod metrics;
pub mod complexity;
pub mod corpus;
