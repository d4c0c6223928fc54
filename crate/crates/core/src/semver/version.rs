use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::SemverError;

/// Largest integer a registry client can represent exactly (2^53 - 1).
pub const MAX_SAFE_INTEGER: u64 = 9_007_199_254_740_991;

/// One dot-separated prerelease identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Identifier {
    Numeric(u64),
    AlphaNumeric(String),
}

impl Ord for Identifier {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Identifier::Numeric(a), Identifier::Numeric(b)) => a.cmp(b),
            (Identifier::Numeric(_), Identifier::AlphaNumeric(_)) => Ordering::Less,
            (Identifier::AlphaNumeric(_), Identifier::Numeric(_)) => Ordering::Greater,
            (Identifier::AlphaNumeric(a), Identifier::AlphaNumeric(b)) => a.cmp(b),
        }
    }
}

impl PartialOrd for Identifier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Identifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Identifier::Numeric(n) => write!(f, "{n}"),
            Identifier::AlphaNumeric(s) => f.write_str(s),
        }
    }
}

/// A semantic version. Equality, ordering and hashing ignore `build`.
#[derive(Clone, Debug)]
pub struct Version {
    pub major: u64,
    pub minor: u64,
    pub patch: u64,
    pub prerelease: Vec<Identifier>,
    pub build: Vec<String>,
}

impl Version {
    pub const fn new(major: u64, minor: u64, patch: u64) -> Self {
        Version {
            major,
            minor,
            patch,
            prerelease: Vec::new(),
            build: Vec::new(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, SemverError> {
        let input = s.trim();
        let err = |reason: &str| SemverError::MalformedVersion {
            input: s.to_string(),
            reason: reason.to_string(),
        };

        let (rest, build) = match input.split_once('+') {
            Some((rest, build)) => (rest, Some(build)),
            None => (input, None),
        };
        let (core, pre) = match rest.split_once('-') {
            Some((core, pre)) => (core, Some(pre)),
            None => (rest, None),
        };

        let parts: Vec<&str> = core.split('.').collect();
        if parts.len() != 3 {
            return Err(err("expected MAJOR.MINOR.PATCH"));
        }
        let mut nums = [0u64; 3];
        for (slot, part) in nums.iter_mut().zip(&parts) {
            *slot = parse_numeric(part).map_err(|reason| err(reason))?;
        }

        let prerelease = match pre {
            Some(pre) => parse_prerelease(pre).map_err(|reason| err(reason))?,
            None => Vec::new(),
        };
        let build = match build {
            Some(build) => parse_build(build).map_err(|reason| err(reason))?,
            None => Vec::new(),
        };

        Ok(Version {
            major: nums[0],
            minor: nums[1],
            patch: nums[2],
            prerelease,
            build,
        })
    }

    pub fn is_prerelease(&self) -> bool {
        !self.prerelease.is_empty()
    }

    /// Same (major, minor, patch) triple, ignoring prerelease and build.
    pub fn same_core(&self, other: &Version) -> bool {
        self.major == other.major && self.minor == other.minor && self.patch == other.patch
    }

    pub fn with_prerelease(mut self, prerelease: Vec<Identifier>) -> Self {
        self.prerelease = prerelease;
        self
    }

    /// Text key whose byte order equals version precedence, for range
    /// checks inside SQL. Core numbers are zero-padded to 16 digits; a
    /// release sorts after every prerelease of the same core via `~`.
    pub fn sort_key(&self) -> String {
        let mut key = format!("{:016}.{:016}.{:016}", self.major, self.minor, self.patch);
        if self.prerelease.is_empty() {
            key.push('~');
        } else {
            key.push('-');
            for (i, id) in self.prerelease.iter().enumerate() {
                if i > 0 {
                    key.push(' ');
                }
                match id {
                    Identifier::Numeric(n) => key.push_str(&format!("0{n:016}")),
                    Identifier::AlphaNumeric(s) => {
                        key.push('1');
                        key.push_str(s);
                    }
                }
            }
        }
        key
    }

    /// Dot-joined prerelease identifiers, empty for releases.
    pub fn prerelease_str(&self) -> String {
        self.prerelease.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(".")
    }

    /// The smallest version of all: `0.0.0-0`.
    pub fn minimum() -> Self {
        Version::new(0, 0, 0).with_prerelease(vec![Identifier::Numeric(0)])
    }
}

pub(crate) fn parse_numeric(part: &str) -> Result<u64, &'static str> {
    if part.is_empty() {
        return Err("empty numeric component");
    }
    if !part.bytes().all(|b| b.is_ascii_digit()) {
        return Err("non-numeric component");
    }
    if part.len() > 1 && part.starts_with('0') {
        return Err("leading zero in numeric component");
    }
    match part.parse::<u64>() {
        Ok(n) if n <= MAX_SAFE_INTEGER => Ok(n),
        _ => Err("numeric component too large"),
    }
}

pub(crate) fn parse_prerelease(pre: &str) -> Result<Vec<Identifier>, &'static str> {
    pre.split('.')
        .map(|ident| {
            if ident.is_empty() {
                return Err("empty prerelease identifier");
            }
            if !ident.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-') {
                return Err("invalid character in prerelease identifier");
            }
            if ident.bytes().all(|b| b.is_ascii_digit()) {
                parse_numeric(ident).map(Identifier::Numeric)
            } else {
                Ok(Identifier::AlphaNumeric(ident.to_string()))
            }
        })
        .collect()
}

pub(crate) fn parse_build(build: &str) -> Result<Vec<String>, &'static str> {
    build
        .split('.')
        .map(|ident| {
            if ident.is_empty() {
                Err("empty build identifier")
            } else if !ident.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-') {
                Err("invalid character in build identifier")
            } else {
                Ok(ident.to_string())
            }
        })
        .collect()
}

impl PartialEq for Version {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Version {}

impl Hash for Version {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.major.hash(state);
        self.minor.hash(state);
        self.patch.hash(state);
        self.prerelease.hash(state);
    }
}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        self.major
            .cmp(&other.major)
            .then(self.minor.cmp(&other.minor))
            .then(self.patch.cmp(&other.patch))
            .then_with(|| match (self.is_prerelease(), other.is_prerelease()) {
                (false, false) => Ordering::Equal,
                (false, true) => Ordering::Greater,
                (true, false) => Ordering::Less,
                // Vec ordering is lexicographic with shorter-prefix-first,
                // which is exactly prerelease precedence.
                (true, true) => self.prerelease.cmp(&other.prerelease),
            })
    }
}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Renders the full version including build metadata.
impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.minimal())?;
        if !self.build.is_empty() {
            write!(f, "+{}", self.build.join("."))?;
        }
        Ok(())
    }
}

impl Version {
    /// Renders without build metadata, the form used inside constraints.
    pub fn minimal(&self) -> MinimalVersion<'_> {
        MinimalVersion(self)
    }
}

pub struct MinimalVersion<'a>(&'a Version);

impl fmt::Display for MinimalVersion<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.0;
        write!(f, "{}.{}.{}", v.major, v.minor, v.patch)?;
        if !v.prerelease.is_empty() {
            f.write_str("-")?;
            for (i, ident) in v.prerelease.iter().enumerate() {
                if i > 0 {
                    f.write_str(".")?;
                }
                write!(f, "{ident}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Version {
    type Err = SemverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Version::parse(s)
    }
}

impl Serialize for Version {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Version {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Version::parse(&s).map_err(serde::de::Error::custom)
    }
}
