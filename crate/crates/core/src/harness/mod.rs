//! BLEU and significance testing, experiment pipelines and the
//! representation analyses.

pub mod analysis;
pub mod bleu;
pub mod config;
pub mod pipeline;
pub mod report;
