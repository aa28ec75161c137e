// SPDX-License-Identifier: Apache-2.0

//! Experiment orchestration and reporting.

pub mod config;
pub mod corpus;
pub mod pipeline;
pub mod report;
pub mod scenarios;
pub mod world;

pub use config::{ExperimentConfig, Method};
pub use report::{Metric, ReportRow};
pub use world::World;
