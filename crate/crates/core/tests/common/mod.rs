#![allow(dead_code)]

pub mod semver_oracle;

use rand::seq::IndexedRandom;
use rand::Rng;

const NUMS: [&str; 5] = ["0", "1", "2", "3", "13"];
const PRES: [&str; 6] = ["alpha", "alpha.1", "beta", "0", "rc.2", "beta.11"];

/// A version string over a small alphabet so ranges hit their edges.
pub fn random_version(rng: &mut impl Rng) -> String {
    let mut s = format!("{}.{}.{}", NUMS.choose(rng).unwrap(), NUMS.choose(rng).unwrap(), NUMS.choose(rng).unwrap());
    if rng.random_bool(0.25) {
        s.push('-');
        s.push_str(PRES.choose(rng).unwrap());
    }
    if rng.random_bool(0.05) {
        s.push_str("+b7");
    }
    s
}

fn random_partial(rng: &mut impl Rng) -> String {
    let wild = ["x", "X", "*"];
    let n = rng.random_range(0..=3);
    let mut parts: Vec<String> = (0..n).map(|_| NUMS.choose(rng).unwrap().to_string()).collect();
    if n < 3 && rng.random_bool(0.4) {
        parts.push(wild.choose(rng).unwrap().to_string());
    }
    if parts.is_empty() {
        return wild.choose(rng).unwrap().to_string();
    }
    let mut s = parts.join(".");
    if n == 3 && rng.random_bool(0.3) {
        s.push('-');
        s.push_str(PRES.choose(rng).unwrap());
    }
    if rng.random_bool(0.05) {
        s.insert(0, 'v');
    }
    s
}

fn random_term(rng: &mut impl Rng) -> String {
    let ops = ["", "=", ">", ">=", "<", "<=", "~", "~>", "^"];
    let op = ops.choose(rng).unwrap();
    let space = if !op.is_empty() && rng.random_bool(0.1) { " " } else { "" };
    format!("{op}{space}{}", random_partial(rng))
}

/// A range expression from the supported grammar.
pub fn random_range(rng: &mut impl Rng) -> String {
    let disjuncts = rng.random_range(1..=3);
    (0..disjuncts)
        .map(|_| {
            if rng.random_bool(0.15) {
                format!("{} - {}", random_partial(rng), random_partial(rng))
            } else if rng.random_bool(0.03) {
                String::new()
            } else {
                let n = rng.random_range(1..=3);
                (0..n).map(|_| random_term(rng)).collect::<Vec<_>>().join(" ")
            }
        })
        .collect::<Vec<_>>()
        .join(" || ")
}

pub fn fixture_path(rel: &str) -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn fixture_ranges() -> Vec<String> {
    std::fs::read_to_string(fixture_path("semver/ranges.txt"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}
