// SPDX-License-Identifier: Apache-2.0

//! Empirical privacy measurement.

pub mod attacks;
pub mod entropy;
pub mod geometry;

pub use attacks::{attribute_inference, inversion_attack, mean_pool, AttackKind, AttackReport};
pub use entropy::{digamma, knn_distance, knn_entropy, log_unit_ball_volume, mi_estimate, unit_ball_volume, MIEstimate, DEFAULT_K};
pub use geometry::{geometry_metrics, vocab_knn_distance, GeometryReport};
