//! Core data model and algorithms for curating robot demonstration episodes
//! into visual question answering data.

pub mod episode;
pub mod geometry;
pub mod skills;
pub mod kinematics;
pub mod calibration;
pub mod correction;
pub mod overlay;
pub mod derive;
pub mod vqa;
pub mod metrics;
pub mod evaluate;
pub mod config;
pub mod synth;
pub mod qc;
