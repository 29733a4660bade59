//! Bone age assessment experiment toolkit.
//!
//! Regression of skeletal age (in months) from hand radiographs: manifest
//! ingestion and statistics, deterministic splits, a synthetic desk-scale
//! dataset generator, preprocessing and augmentation, a backbone registry
//! with a regression head trained under full or frozen transfer regimes, an
//! Adam/MSE training loop with early stopping, and reporting (comparison
//! table, plots, bias report).

pub mod data;
pub mod engine;
pub mod models;
pub mod reporting;
pub mod transforms;
pub(crate) mod util;
