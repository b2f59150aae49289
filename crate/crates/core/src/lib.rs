//! Inverse process-structure calibration for Potts-model microstructures.
//!
//! Given a target microstructure, the crate searches the processing
//! parameters of a kinetic Monte Carlo forward model for a candidate that is
//! statistically equivalent to it. The pipeline is
//!
//! 1. [`lattice`]: simulate a candidate (grain growth or moving weld pool),
//! 2. [`descriptors`]: segment grains and collect descriptor samples,
//! 3. [`densities`]: smooth samples into densities and compare them with the
//!    target through Kullback-Leibler divergences, then scalarize,
//! 4. [`surrogate`] and [`optimizer`]: asynchronous parallel Bayesian
//!    optimization over the parameter box,
//! 5. [`campaign`]: orchestration, noise quantification and reporting.

pub mod campaign;
pub mod densities;
pub mod descriptors;
pub mod lattice;
pub mod optimizer;
pub mod seeding;
pub mod surrogate;
