//! Inference of generation cost parameters from unit-commitment schedules.
//!
//! The crate bundles a small LP/MILP solver, a security-constrained unit
//! commitment model, a seeded stochastic market simulator, an
//! inverse-optimization baseline, a mixture-density posterior estimator and
//! calibration diagnostics.

pub mod diagnostics;
pub mod forward;
pub mod inverse;
pub mod milp;
pub mod npe;
pub mod scuc;
pub mod system;

pub use diagnostics::{
    abc_reference_posterior, expected_coverage, export_corner, hpd_contains, posterior_predictive, AbcPosterior,
    ConditionalDensity, CornerData, CoverageCurve, Density, PredictiveBand,
};
pub use forward::{
    generate_dataset, generate_dataset_opts, read_dataset, sample_latents, sample_prior, simulate, simulate_opts, write_dataset, CostParams,
    Dataset, Latents, MarketOutcome, Observation, PriorConfig, Record,
};
pub use inverse::{
    derive_observed_features, estimate, features, project, InverseOptions, InverseResult, PolarConeApprox,
    ScheduleFeatures,
};
pub use milp::{solve_lp, solve_milp, LinearProgram, Milp, MilpOptions, Sense};
pub use npe::{fit, initial_model, load_model, save_model, Mixture, PosteriorModel, Standardizer, TrainConfig};
pub use scuc::{build_scuc, derive_startups, solve_uc, Availability, Schedule};
pub use system::{load_system, sample_demand, validate, DemandMatrix, LoadModel, Network, UcInstance};
