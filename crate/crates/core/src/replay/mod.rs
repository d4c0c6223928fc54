//! Offline replay harness: a scripted mock registry (changes feed,
//! tarballs, metrics API, advisories) served over HTTP on a simulated
//! clock, a runner that drives the real pipeline against it, and an
//! independent oracle for the expected end state.
//!
//! Scenario format: `docs/scenario-format.md`.

mod mock;
mod oracle;
mod runner;
mod scenario;

pub use mock::{tarball_path, MockRegistry};
pub use oracle::{oracle, Expected, ExpectedJob, ExpectedVersion};
pub use runner::{compare, expected_fraction_within, run_file, ReplayError, RunOutcome, RunSummary, RunnerConfig, ScenarioRunner};
pub use scenario::{synthetic_bytes, At, Fault, FaultTarget, Op, Scenario, ScenarioError, ScriptEvent, TarballSpec, Timeline};
