//! Experiment drivers behind the command-line front end.
//!
//! Each experiment is a plain function taking its config section and an
//! optional output directory: it returns a typed report with every number a
//! caller might assert on, and writes the CSV artifacts only when a directory
//! is given. The CLI adds argument handling and the run manifest on top;
//! tests call the functions directly.

pub mod config;
pub mod experiments;
pub mod io;
pub mod oracle;

pub use config::{DtRule, HarnessConfig, ReferenceRule};
pub use experiments::{
    cfl_table, convergence_study, energy_trace, instability_demo, lshape_study,
    spectrum_experiment, CflReport, CflRow, ConvergenceReport, ConvergenceRow, EnergyReport,
    InstabilityReport, LshapeLadderRow, LshapeReport, SpectrumReport, TraceSamples,
};
pub use oracle::{elliptic_solve, reference_semidiscrete, reference_semidiscrete_pair};
