//! Parses a few ranges, prints their canonical form and resolves them
//! against a version list.

use registry_follower::semver::{max_satisfying, parse_constraint, parse_version, satisfies, Version};

fn main() {
    let published: Vec<Version> = ["1.0.0", "1.2.3", "1.3.0-beta.1", "1.3.0", "2.0.0", "12.0.4", "13.0.2"]
        .iter()
        .map(|s| parse_version(s).unwrap())
        .collect();

    for range in ["^1.2.0", "~1.2", "12 || ~13.0.1", ">=1.3.0-beta.0 <1.3.0", "1.x - 2", "*"] {
        let c = parse_constraint(range).unwrap();
        let best = max_satisfying(&published, &c).map(ToString::to_string).unwrap_or_else(|| "-".into());
        println!("{range:<24} {:<40} best {best}", c.to_string());
    }

    let beta = parse_version("1.3.0-beta.1").unwrap();
    println!("1.3.0-beta.1 in ^1.0.0: {}", satisfies(&beta, &parse_constraint("^1.0.0").unwrap()));
    println!("1.3.0-beta.1 in ^1.3.0-beta.0: {}", satisfies(&beta, &parse_constraint("^1.3.0-beta.0").unwrap()));

    match parse_constraint(">=1.2.3 <<2") {
        Ok(c) => println!("unexpectedly parsed {c}"),
        Err(e) => println!("rejected: {e}"),
    }
}
