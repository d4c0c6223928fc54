//! Version numbers and dependency version constraints.
//!
//! Range expressions (`^1.2.3`, `~1.2`, `1.x || >=3 <4`, `1.0.0 - 2.0.0`, ...)
//! are parsed into a [`ConstraintDnf`]: a disjunction of conjunctions of
//! single-bound [`Comparator`]s over the total [`Version`] order. The DNF is
//! the stored, queryable form; the raw string is always kept alongside it.

mod constraint;
mod version;

pub use constraint::{Comparator, ConstraintDnf, Op};
pub use version::{Identifier, MinimalVersion, Version, MAX_SAFE_INTEGER};

use std::cmp::Ordering;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SemverError {
    #[error("malformed version {input:?}: {reason}")]
    MalformedVersion { input: String, reason: String },
    #[error("malformed range {input:?}: {reason}")]
    MalformedRange { input: String, reason: String },
}

pub fn parse_version(s: &str) -> Result<Version, SemverError> {
    Version::parse(s)
}

pub fn parse_constraint(s: &str) -> Result<ConstraintDnf, SemverError> {
    ConstraintDnf::parse(s)
}

pub fn compare(a: &Version, b: &Version) -> Ordering {
    a.cmp(b)
}

pub fn satisfies(v: &Version, c: &ConstraintDnf) -> bool {
    c.satisfied_by(v)
}

/// Greatest version in `versions` that satisfies `c`.
pub fn max_satisfying<'a, I>(versions: I, c: &ConstraintDnf) -> Option<&'a Version>
where
    I: IntoIterator<Item = &'a Version>,
{
    versions.into_iter().filter(|v| c.satisfied_by(v)).max()
}
