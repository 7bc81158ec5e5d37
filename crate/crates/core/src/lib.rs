//! Validation-first information extraction for transactional documents
//! (invoices and receipts).
//!
//! Raw model output is turned into typed, arithmetically coherent extractions
//! by a cascade of syntactic, task-level and domain-level checks:
//!
//! * [`schema`]: fields, equations and structural rules;
//! * [`values`]: number coercion and explicit/implicit documents;
//! * [`resolver`]: defaults, fixpoint inference and constraint evaluation;
//! * [`validation`]: the three-level filter cascade;
//! * [`metrics`]: micro F1, tree edit distance and the filter table;
//! * [`llm`]: prompt construction and generation backends;
//! * [`pipeline`]: dataset-level extract/validate/select/evaluate/distill.

pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod resolver;
pub mod schema;
pub mod validation;
pub mod values;

pub use rust_decimal::Decimal;
