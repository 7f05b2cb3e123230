//! Library surface of the experiment runner, kept separate from the
//! binary so integration tests can drive runs in-process.

pub mod compare;
pub mod config;
pub mod inspect;
pub mod run;

pub use compare::compare_runs;
pub use config::{arch_to_string, parse_arch, ExperimentConfig};
pub use inspect::inspect_checkpoint;
pub use run::{resolve_output_dir, run_experiment, OUTPUT_ROOT_ENV};
