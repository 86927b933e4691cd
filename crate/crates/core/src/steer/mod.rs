//! Inference-time steering: intervention specs, the tap hook that applies
//! them, and behavior-shift evaluations.

pub mod eval;
pub mod spec;

pub use eval::{
    baseline_eval, grid_search, prefilter, reports_csv, run_behavior_shift_eval, transfer_eval, GridCell, GridResult,
    Provenance, Scope, StartingSets, SteerReport, SteeringHook,
};
pub use spec::{apply_intervention, build_spec, make_random_baseline, Direction, InterventionSpec, RandomBaselineSpec, SpecEntry};
