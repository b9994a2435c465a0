pub mod scores;
pub mod config;
pub mod report;
pub mod experiment;
