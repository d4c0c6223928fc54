use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::version::{parse_build, parse_numeric, parse_prerelease, Identifier, Version};
use super::SemverError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    Gte,
    Gt,
    Lte,
    Lt,
    Eq,
}

impl Op {
    pub fn symbol(self) -> &'static str {
        match self {
            Op::Gte => ">=",
            Op::Gt => ">",
            Op::Lte => "<=",
            Op::Lt => "<",
            Op::Eq => "=",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Op> {
        Some(match s {
            ">=" => Op::Gte,
            ">" => Op::Gt,
            "<=" => Op::Lte,
            "<" => Op::Lt,
            "=" => Op::Eq,
            _ => return None,
        })
    }
}

/// A single relational bound on the candidate version.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Comparator {
    pub op: Op,
    pub bound: Version,
}

impl Comparator {
    pub fn new(op: Op, bound: Version) -> Self {
        Comparator { op, bound }
    }

    pub fn matches(&self, v: &Version) -> bool {
        match self.op {
            Op::Gte => v >= &self.bound,
            Op::Gt => v > &self.bound,
            Op::Lte => v <= &self.bound,
            Op::Lt => v < &self.bound,
            Op::Eq => v == &self.bound,
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op {
            Op::Eq => write!(f, "{}", self.bound.minimal()),
            op => write!(f, "{}{}", op.symbol(), self.bound.minimal()),
        }
    }
}

/// A version range in disjunctive normal form: the candidate satisfies the
/// constraint iff every comparator of at least one conjunct holds.
///
/// An empty conjunct is universally true (for release versions).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConstraintDnf {
    disjuncts: Vec<Vec<Comparator>>,
}

impl ConstraintDnf {
    /// Builds a DNF from raw disjuncts. An empty list is normalized to the
    /// universally-true form since the type requires at least one conjunct.
    pub fn from_disjuncts(disjuncts: Vec<Vec<Comparator>>) -> Self {
        if disjuncts.is_empty() {
            return ConstraintDnf::any();
        }
        ConstraintDnf { disjuncts }
    }

    pub fn any() -> Self {
        ConstraintDnf {
            disjuncts: vec![Vec::new()],
        }
    }

    pub fn parse(s: &str) -> Result<Self, SemverError> {
        let disjuncts = s
            .split("||")
            .map(|part| parse_range(part).map_err(|reason| malformed(s, reason)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ConstraintDnf { disjuncts })
    }

    pub fn disjuncts(&self) -> &[Vec<Comparator>] {
        &self.disjuncts
    }

    /// Evaluates every comparator, aggregates each conjunct with AND, then
    /// the conjuncts with OR. Prerelease versions only pass a conjunct that
    /// carries a prerelease bound on the same major.minor.patch.
    pub fn satisfied_by(&self, v: &Version) -> bool {
        self.disjuncts
            .iter()
            .any(|conjunct| conjunct_satisfied(conjunct, v))
    }
}

fn conjunct_satisfied(conjunct: &[Comparator], v: &Version) -> bool {
    if !conjunct.iter().all(|c| c.matches(v)) {
        return false;
    }
    if !v.is_prerelease() {
        return true;
    }
    conjunct
        .iter()
        .any(|c| c.bound.is_prerelease() && c.bound.same_core(v))
}

fn malformed(input: &str, reason: String) -> SemverError {
    SemverError::MalformedRange {
        input: input.to_string(),
        reason,
    }
}

impl fmt::Display for ConstraintDnf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, conjunct) in self.disjuncts.iter().enumerate() {
            if i > 0 {
                f.write_str(" || ")?;
            }
            if conjunct.is_empty() {
                f.write_str("*")?;
                continue;
            }
            for (j, comparator) in conjunct.iter().enumerate() {
                if j > 0 {
                    f.write_str(" ")?;
                }
                write!(f, "{comparator}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for ConstraintDnf {
    type Err = SemverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConstraintDnf::parse(s)
    }
}

impl Serialize for ConstraintDnf {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConstraintDnf {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        ConstraintDnf::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A possibly-incomplete version such as `1`, `1.2.x` or `*`.
#[derive(Debug, Clone, PartialEq)]
struct Partial {
    major: Option<u64>,
    minor: Option<u64>,
    patch: Option<u64>,
    prerelease: Vec<Identifier>,
}

impl Partial {
    fn zero_filled(&self) -> Version {
        Version::new(
            self.major.unwrap_or(0),
            self.minor.unwrap_or(0),
            self.patch.unwrap_or(0),
        )
        .with_prerelease(self.prerelease.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RangeOp {
    Cmp(Op),
    Tilde,
    Caret,
}

fn is_wildcard(s: &str) -> bool {
    matches!(s, "x" | "X" | "*")
}

fn parse_partial(token: &str) -> Result<Partial, String> {
    let bad = |why: &str| format!("{why} in {token:?}");
    let token = token.strip_prefix('v').unwrap_or(token);
    if token.is_empty() {
        return Err(bad("missing version"));
    }

    let (rest, build) = match token.split_once('+') {
        Some((rest, build)) => (rest, Some(build)),
        None => (token, None),
    };
    if let Some(build) = build {
        parse_build(build).map_err(|e| bad(e))?;
    }
    let (core, pre) = match rest.split_once('-') {
        Some((core, pre)) => (core, Some(pre)),
        None => (rest, None),
    };

    let parts: Vec<&str> = core.split('.').collect();
    if parts.len() > 3 {
        return Err(bad("too many version components"));
    }
    let mut nums: [Option<u64>; 3] = [None; 3];
    let mut seen_wildcard = false;
    for (slot, part) in nums.iter_mut().zip(&parts) {
        if is_wildcard(part) {
            seen_wildcard = true;
        } else if seen_wildcard {
            return Err(bad("number after wildcard"));
        } else {
            *slot = Some(parse_numeric(part).map_err(|e| bad(e))?);
        }
    }

    let prerelease = match pre {
        Some(pre) => {
            if nums.iter().any(Option::is_none) {
                return Err(bad("prerelease on incomplete version"));
            }
            parse_prerelease(pre).map_err(|e| bad(e))?
        }
        None => Vec::new(),
    };

    Ok(Partial {
        major: nums[0],
        minor: nums[1],
        patch: nums[2],
        prerelease,
    })
}

fn split_operator(token: &str) -> (Option<RangeOp>, &str) {
    const OPS: [(&str, RangeOp); 8] = [
        (">=", RangeOp::Cmp(Op::Gte)),
        ("<=", RangeOp::Cmp(Op::Lte)),
        ("~>", RangeOp::Tilde),
        (">", RangeOp::Cmp(Op::Gt)),
        ("<", RangeOp::Cmp(Op::Lt)),
        ("=", RangeOp::Cmp(Op::Eq)),
        ("~", RangeOp::Tilde),
        ("^", RangeOp::Caret),
    ];
    for (sym, op) in OPS {
        if let Some(rest) = token.strip_prefix(sym) {
            return (Some(op), rest);
        }
    }
    (None, token)
}

/// Splits a conjunction into (operator, partial) pairs, allowing whitespace
/// between an operator and its version (`>= 1.2.3`).
fn simple_terms(range: &str) -> Result<Vec<(Option<RangeOp>, &str)>, String> {
    let mut terms = Vec::new();
    let mut words = range.split_whitespace().peekable();
    while let Some(word) = words.next() {
        let (op, rest) = split_operator(word);
        if op.is_some() && rest.is_empty() {
            match words.next() {
                Some(next) => {
                    if split_operator(next).0.is_some() {
                        return Err(format!("operator {word:?} followed by operator"));
                    }
                    terms.push((op, next));
                }
                None => return Err(format!("dangling operator {word:?}")),
            }
        } else {
            if op.is_some() && split_operator(rest).0.is_some() {
                return Err(format!("doubled operator in {word:?}"));
            }
            terms.push((op, rest));
        }
    }
    Ok(terms)
}

fn parse_range(range: &str) -> Result<Vec<Comparator>, String> {
    let words: Vec<&str> = range.split_whitespace().collect();
    if words.is_empty() {
        return Ok(Vec::new());
    }
    if words.len() == 3 && words[1] == "-" {
        return hyphen(parse_partial(words[0])?, parse_partial(words[2])?);
    }
    let mut comparators = Vec::new();
    for (op, token) in simple_terms(range)? {
        let partial = parse_partial(token)?;
        comparators.extend(desugar(op, partial));
    }
    Ok(comparators)
}

fn cmp(op: Op, major: u64, minor: u64, patch: u64) -> Comparator {
    Comparator::new(op, Version::new(major, minor, patch))
}

fn empty_set() -> Vec<Comparator> {
    vec![Comparator::new(Op::Lt, Version::minimum())]
}

fn desugar(op: Option<RangeOp>, p: Partial) -> Vec<Comparator> {
    use Op::*;

    let Some(major) = p.major else {
        return match op {
            Some(RangeOp::Cmp(Gt)) | Some(RangeOp::Cmp(Lt)) => empty_set(),
            _ => Vec::new(),
        };
    };

    match op {
        None | Some(RangeOp::Cmp(Eq)) => match (p.minor, p.patch) {
            (None, _) => vec![cmp(Gte, major, 0, 0), cmp(Lt, major + 1, 0, 0)],
            (Some(minor), None) => vec![cmp(Gte, major, minor, 0), cmp(Lt, major, minor + 1, 0)],
            (Some(_), Some(_)) => vec![Comparator::new(Eq, p.zero_filled())],
        },
        Some(RangeOp::Cmp(Gt)) => match (p.minor, p.patch) {
            (None, _) => vec![cmp(Gte, major + 1, 0, 0)],
            (Some(minor), None) => vec![cmp(Gte, major, minor + 1, 0)],
            (Some(_), Some(_)) => vec![Comparator::new(Gt, p.zero_filled())],
        },
        Some(RangeOp::Cmp(Gte)) => vec![Comparator::new(Gte, p.zero_filled())],
        Some(RangeOp::Cmp(Lt)) => vec![Comparator::new(Lt, p.zero_filled())],
        Some(RangeOp::Cmp(Lte)) => match (p.minor, p.patch) {
            (None, _) => vec![cmp(Lt, major + 1, 0, 0)],
            (Some(minor), None) => vec![cmp(Lt, major, minor + 1, 0)],
            (Some(_), Some(_)) => vec![Comparator::new(Lte, p.zero_filled())],
        },
        Some(RangeOp::Tilde) => match (p.minor, p.patch) {
            (None, _) => vec![cmp(Gte, major, 0, 0), cmp(Lt, major + 1, 0, 0)],
            (Some(minor), _) => vec![
                Comparator::new(Gte, p.zero_filled()),
                cmp(Lt, major, minor + 1, 0),
            ],
        },
        Some(RangeOp::Caret) => {
            let upper = match (p.minor, p.patch) {
                (None, _) => cmp(Lt, major + 1, 0, 0),
                (Some(minor), None) if major == 0 => cmp(Lt, 0, minor + 1, 0),
                (Some(minor), Some(patch)) if major == 0 && minor == 0 => cmp(Lt, 0, 0, patch + 1),
                (Some(minor), Some(_)) if major == 0 => cmp(Lt, 0, minor + 1, 0),
                _ => cmp(Lt, major + 1, 0, 0),
            };
            vec![Comparator::new(Gte, p.zero_filled()), upper]
        }
    }
}

fn hyphen(from: Partial, to: Partial) -> Result<Vec<Comparator>, String> {
    let mut out = Vec::new();
    if from.major.is_some() {
        out.push(Comparator::new(Op::Gte, from.zero_filled()));
    }
    if let Some(major) = to.major {
        out.push(match (to.minor, to.patch) {
            (None, _) => cmp(Op::Lt, major + 1, 0, 0),
            (Some(minor), None) => cmp(Op::Lt, major, minor + 1, 0),
            (Some(_), Some(_)) => Comparator::new(Op::Lte, to.zero_filled()),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(s: &str) -> ConstraintDnf {
        ConstraintDnf::parse(s).unwrap_or_else(|e| panic!("{s:?}: {e}"))
    }

    fn v(s: &str) -> Version {
        Version::parse(s).unwrap()
    }

    #[test]
    fn documented_range_example() {
        let dnf = c("12 || ~13.0.1");
        assert_eq!(dnf.to_string(), ">=12.0.0 <13.0.0 || >=13.0.1 <13.1.0");
        assert_eq!(dnf.disjuncts().len(), 2);
        assert_eq!(
            dnf.disjuncts()[0],
            vec![cmp(Op::Gte, 12, 0, 0), cmp(Op::Lt, 13, 0, 0)]
        );
        assert_eq!(
            dnf.disjuncts()[1],
            vec![cmp(Op::Gte, 13, 0, 1), cmp(Op::Lt, 13, 1, 0)]
        );
    }

    #[test]
    fn wildcards_are_a_single_empty_conjunct() {
        for s in ["*", "", "  ", "x", "X", ">=*", "<=*", "~*", "^*", "x.x.x"] {
            assert_eq!(c(s), ConstraintDnf::any(), "{s:?}");
        }
    }

    #[test]
    fn desugaring_table() {
        let table = [
            ("^1.2.3", ">=1.2.3 <2.0.0"),
            ("^0.2.3", ">=0.2.3 <0.3.0"),
            ("^0.0.3", ">=0.0.3 <0.0.4"),
            ("^1.2.x", ">=1.2.0 <2.0.0"),
            ("^0.0.x", ">=0.0.0 <0.1.0"),
            ("^0.0", ">=0.0.0 <0.1.0"),
            ("^1.x", ">=1.0.0 <2.0.0"),
            ("^0.x", ">=0.0.0 <1.0.0"),
            ("^1.2.3-beta.2", ">=1.2.3-beta.2 <2.0.0"),
            ("~1.2.3", ">=1.2.3 <1.3.0"),
            ("~1.2", ">=1.2.0 <1.3.0"),
            ("~1", ">=1.0.0 <2.0.0"),
            ("~>1.2.3", ">=1.2.3 <1.3.0"),
            ("~1.2.3-beta.2", ">=1.2.3-beta.2 <1.3.0"),
            ("1.2.3 - 2.3.4", ">=1.2.3 <=2.3.4"),
            ("1.2 - 2.3.4", ">=1.2.0 <=2.3.4"),
            ("1.2.3 - 2.3", ">=1.2.3 <2.4.0"),
            ("1.2.3 - 2", ">=1.2.3 <3.0.0"),
            ("* - 2", "<3.0.0"),
            ("1.2.3 - *", ">=1.2.3"),
            ("1.x", ">=1.0.0 <2.0.0"),
            ("1.2.x", ">=1.2.0 <1.3.0"),
            ("1.2", ">=1.2.0 <1.3.0"),
            ("=1", ">=1.0.0 <2.0.0"),
            ("1.2.3", "1.2.3"),
            ("=1.2.3", "1.2.3"),
            ("v1.2.3", "1.2.3"),
            ("1.2.3+build", "1.2.3"),
            (">1", ">=2.0.0"),
            (">1.2", ">=1.3.0"),
            (">1.2.3", ">1.2.3"),
            (">=1", ">=1.0.0"),
            ("<1.2", "<1.2.0"),
            ("<=1", "<2.0.0"),
            ("<=1.2", "<1.3.0"),
            ("<=1.2.3", "<=1.2.3"),
            (">*", "<0.0.0-0"),
            ("<*", "<0.0.0-0"),
            (">= 1.2.3 < 2", ">=1.2.3 <2.0.0"),
            ("^ 1.2", ">=1.2.0 <2.0.0"),
            (">=1.2.3 <1.0.0", ">=1.2.3 <1.0.0"),
            ("<1.2.2", "<1.2.2"),
        ];
        for (input, expected) in table {
            assert_eq!(c(input).to_string(), expected, "{input:?}");
        }
    }

    #[test]
    fn malformed_ranges() {
        for bad in [
            "latest",
            "git+https://github.com/a/b.git",
            "file:../x",
            "http://example.com/x.tgz",
            "1.2.3.4",
            ">=",
            ">= >= 1",
            "^",
            "01.2.3",
            "1.x.3",
            "1.2-beta",
            "npm:foo@1",
            ">>1",
        ] {
            assert!(
                matches!(
                    ConstraintDnf::parse(bad),
                    Err(SemverError::MalformedRange { .. })
                ),
                "{bad:?} should be malformed"
            );
        }
    }

    #[test]
    fn empty_sets_are_not_errors() {
        let dnf = c(">=2.0.0 <1.0.0");
        assert!(!dnf.satisfied_by(&v("1.5.0")));
        assert!(!c(">*").satisfied_by(&v("0.0.0")));
    }

    #[test]
    fn satisfaction_examples() {
        let dnf = c("12 || ~13.0.1");
        assert!(dnf.satisfied_by(&v("13.0.5")));
        assert!(!dnf.satisfied_by(&v("13.1.0")));
        assert!(dnf.satisfied_by(&v("12.9.9")));
        assert!(!dnf.satisfied_by(&v("13.0.0")));
        assert!(ConstraintDnf::any().satisfied_by(&v("0.0.1")));
        assert!(!ConstraintDnf::any().satisfied_by(&v("1.0.0-rc.1")));
    }

    #[test]
    fn prerelease_gating() {
        assert!(!c("^1.0.0").satisfied_by(&v("1.0.0-beta")));
        assert!(!c("^1.0.0").satisfied_by(&v("1.2.0-beta")));
        assert!(c("^1.2.3-beta.2").satisfied_by(&v("1.2.3-beta.4")));
        assert!(!c("^1.2.3-beta.2").satisfied_by(&v("1.2.4-beta.4")));
        assert!(c(">=1.0.0-rc.1").satisfied_by(&v("1.0.0-rc.2")));
        assert!(c("1.0.0-rc.1").satisfied_by(&v("1.0.0-rc.1")));
        assert!(!c("<1.2.2").satisfied_by(&v("1.2.2-beta")));
    }

    #[test]
    fn canonical_round_trip() {
        for s in ["12 || ~13.0.1", "*", "^0.0.3-rc.1 || >=4", "<0.0.0-0", "|| 1.2"] {
            let dnf = c(s);
            assert_eq!(c(&dnf.to_string()), dnf, "{s:?}");
        }
    }
}
