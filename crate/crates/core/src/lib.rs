//! Simulation and analytics for urban air-quality sensor networks that mix
//! fixed stations with sensors carried on bicycles.
//!
//! The pipeline runs from a synthetic ground-truth [`field`], through node
//! sensor physics ([`nodes`]) and the reporting network ([`netsim`]), into a
//! day-partitioned [`store`]. [`indexes`] computes air-quality, thermal
//! comfort and traffic indexes; [`analytics`] compares measurement
//! populations.

pub mod analytics;
pub mod domain;
pub mod field;
pub mod indexes;
pub mod netsim;
pub mod nodes;
pub mod rng;
pub mod scenario;
pub mod store;
