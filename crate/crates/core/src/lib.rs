//! Grid security assessment: power flow, time-domain simulation, security
//! labeling, dataset generation and a multi-task classifier.

pub mod datagen;
pub mod dynamics;
pub mod eigen;
pub mod evalharness;
pub mod exec;
pub mod grid;
pub mod labeling;
pub mod mtl;
pub mod powerflow;
