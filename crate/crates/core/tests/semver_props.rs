mod common;

use std::cmp::Ordering;

use common::semver_oracle as reference;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use registry_follower::semver::{max_satisfying, parse_constraint, parse_version, satisfies, ConstraintDnf, Version};

fn version_from(seed: u64) -> String {
    common::random_version(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn range_from(seed: u64) -> String {
    common::random_range(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn probes() -> Vec<Version> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    (0..200).map(|_| parse_version(&common::random_version(&mut rng)).unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn ordering_matches_semver_precedence(a in any::<u64>(), b in any::<u64>()) {
        let (sa, sb) = (version_from(a), version_from(b));
        let ours = parse_version(&sa).unwrap().cmp(&parse_version(&sb).unwrap());
        let theirs = semver::Version::parse(&sa).unwrap().cmp_precedence(&semver::Version::parse(&sb).unwrap());
        prop_assert_eq!(ours, theirs, "{} vs {}", sa, sb);
        let mine = reference::cmp_v(&reference::parse_v(&sa).unwrap(), &reference::parse_v(&sb).unwrap());
        prop_assert_eq!(ours, mine);
    }

    #[test]
    fn ordering_is_total_and_transitive(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
        let [a, b, c] = [a, b, c].map(|s| parse_version(&version_from(s)).unwrap());
        prop_assert_eq!(a.cmp(&b), b.cmp(&a).reverse());
        if a <= b && b <= c {
            prop_assert!(a <= c);
        }
    }

    #[test]
    fn sorting_ignores_input_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vs: Vec<Version> = (0..12).map(|_| parse_version(&common::random_version(&mut rng)).unwrap()).collect();
        let mut sorted = vs.clone();
        sorted.sort();
        vs.reverse();
        vs.sort();
        let keys = |v: &[Version]| v.iter().map(|x| x.sort_key()).collect::<Vec<_>>();
        prop_assert_eq!(keys(&vs), keys(&sorted));
    }

    #[test]
    fn satisfies_matches_reference(r in any::<u64>(), v in any::<u64>()) {
        let (range, version) = (range_from(r), version_from(v));
        let want = reference::satisfies(&range, &reference::parse_v(&version).unwrap());
        match parse_constraint(&range) {
            Ok(c) => prop_assert_eq!(Some(satisfies(&parse_version(&version).unwrap(), &c)), want, "{:?} {}", range, version),
            Err(e) => prop_assert!(want.is_none(), "{:?} rejected: {}", range, e),
        }
    }

    #[test]
    fn satisfies_is_comparator_by_comparator(r in any::<u64>()) {
        let c = match parse_constraint(&range_from(r)) {
            Ok(c) => c,
            Err(_) => return Ok(()),
        };
        for v in probes() {
            let brute = c.disjuncts().iter().any(|conj| {
                let all = conj.iter().all(|cmp| match v.cmp(&cmp.bound) {
                    Ordering::Less => matches!(cmp.op.symbol(), "<" | "<="),
                    Ordering::Equal => matches!(cmp.op.symbol(), "<=" | ">=" | "="),
                    Ordering::Greater => matches!(cmp.op.symbol(), ">" | ">="),
                });
                all && (!v.is_prerelease() || conj.iter().any(|cmp| cmp.bound.is_prerelease() && cmp.bound.same_core(&v)))
            });
            prop_assert_eq!(satisfies(&v, &c), brute, "{} {}", v, c);
        }
    }

    #[test]
    fn canonical_text_round_trips(r in any::<u64>()) {
        let c = match parse_constraint(&range_from(r)) {
            Ok(c) => c,
            Err(_) => return Ok(()),
        };
        let again: ConstraintDnf = parse_constraint(&c.to_string()).unwrap();
        prop_assert_eq!(again.to_string(), c.to_string());
        for v in probes() {
            prop_assert_eq!(satisfies(&v, &again), satisfies(&v, &c), "{} on {}", c, v);
        }
    }

    #[test]
    fn max_satisfying_is_a_greatest_member(r in any::<u64>(), seed in any::<u64>()) {
        let c = match parse_constraint(&range_from(r)) {
            Ok(c) => c,
            Err(_) => return Ok(()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vs: Vec<Version> = (0..10).map(|_| parse_version(&common::random_version(&mut rng)).unwrap()).collect();
        match max_satisfying(&vs, &c) {
            Some(best) => {
                prop_assert!(vs.contains(best) && satisfies(best, &c));
                prop_assert!(vs.iter().all(|v| v <= best || !satisfies(v, &c)));
            }
            None => prop_assert!(vs.iter().all(|v| !satisfies(v, &c))),
        }
    }
}

#[test]
fn documented_range_resolves() {
    let c = parse_constraint("12 || ~13.0.1").unwrap();
    assert_eq!(c.to_string(), ">=12.0.0 <13.0.0 || >=13.0.1 <13.1.0");
    let vs: Vec<Version> = ["12.0.0", "13.0.1", "13.0.5", "13.1.0"].iter().map(|s| parse_version(s).unwrap()).collect();
    assert_eq!(max_satisfying(&vs, &c).unwrap().to_string(), "13.0.5");
    assert!(max_satisfying(&Vec::<Version>::new(), &c).is_none());
    let beta = [parse_version("1.0.0-beta").unwrap()];
    assert!(max_satisfying(&beta, &parse_constraint("^1.0.0").unwrap()).is_none());
}
