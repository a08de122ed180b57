//! Experiment harness: simulated regression problems, the diagnostic
//! evaluation study, budget-matched method comparisons, benchmark dataset
//! loading, and run reporting.

pub mod compare;
pub mod data;
pub mod diag_eval;
pub mod ols;
pub mod report;
pub mod sim;
