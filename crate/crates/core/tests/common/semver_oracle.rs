//! Brute-force reference for version ordering and range satisfaction.
//! Works on plain tuples and evaluates range text directly, term by term,
//! without building any intermediate constraint form.

use std::cmp::Ordering;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pre {
    Num(u64),
    Alpha(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct V {
    pub core: (u64, u64, u64),
    pub pre: Vec<Pre>,
}

fn numeric(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

fn pre_ids(s: &str) -> Option<Vec<Pre>> {
    s.split('.')
        .map(|id| {
            if id.is_empty() || !id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-') {
                None
            } else if id.bytes().all(|b| b.is_ascii_digit()) {
                numeric(id).map(Pre::Num)
            } else {
                Some(Pre::Alpha(id.to_string()))
            }
        })
        .collect()
}

pub fn parse_v(s: &str) -> Option<V> {
    let s = s.split('+').next()?;
    let (core, pre) = match s.find('-') {
        Some(i) => (&s[..i], Some(&s[i + 1..])),
        None => (s, None),
    };
    let nums: Vec<u64> = core.split('.').map(numeric).collect::<Option<_>>()?;
    if nums.len() != 3 {
        return None;
    }
    Some(V { core: (nums[0], nums[1], nums[2]), pre: pre.map(pre_ids).unwrap_or(Some(vec![]))? })
}

/// Semver precedence.
pub fn cmp_v(a: &V, b: &V) -> Ordering {
    a.core.cmp(&b.core).then_with(|| match (a.pre.is_empty(), b.pre.is_empty()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (false, false) => {
            for (x, y) in a.pre.iter().zip(&b.pre) {
                let o = match (x, y) {
                    (Pre::Num(m), Pre::Num(n)) => m.cmp(n),
                    (Pre::Num(_), Pre::Alpha(_)) => Ordering::Less,
                    (Pre::Alpha(_), Pre::Num(_)) => Ordering::Greater,
                    (Pre::Alpha(m), Pre::Alpha(n)) => m.cmp(n),
                };
                if o != Ordering::Equal {
                    return o;
                }
            }
            a.pre.len().cmp(&b.pre.len())
        }
    })
}

/// A version as written in a range: missing or wildcard parts are `None`.
#[derive(Debug, Clone)]
struct Partial {
    parts: [Option<u64>; 3],
    pre: Vec<Pre>,
}

impl Partial {
    fn filled(&self) -> V {
        V { core: (self.parts[0].unwrap_or(0), self.parts[1].unwrap_or(0), self.parts[2].unwrap_or(0)), pre: self.pre.clone() }
    }

    fn specified(&self) -> usize {
        self.parts.iter().take_while(|p| p.is_some()).count()
    }
}

fn release(a: u64, b: u64, c: u64) -> V {
    V { core: (a, b, c), pre: vec![] }
}

fn parse_partial(s: &str) -> Option<Partial> {
    let s = s.strip_prefix('v').unwrap_or(s).split('+').next()?;
    if s.is_empty() {
        return None;
    }
    let (core, pre) = match s.find('-') {
        Some(i) => (&s[..i], Some(&s[i + 1..])),
        None => (s, None),
    };
    let fields: Vec<&str> = core.split('.').collect();
    if fields.len() > 3 {
        return None;
    }
    let mut parts = [None; 3];
    let mut wild = false;
    for (i, f) in fields.iter().enumerate() {
        if matches!(*f, "x" | "X" | "*") {
            wild = true;
        } else if wild {
            return None;
        } else {
            parts[i] = Some(numeric(f)?);
        }
    }
    let pre = match pre {
        Some(p) if parts.iter().all(Option::is_some) => pre_ids(p)?,
        Some(_) => return None,
        None => vec![],
    };
    Some(Partial { parts, pre })
}

/// One term's membership test plus the prerelease bound it contributes.
struct Term {
    test: Box<dyn Fn(&V) -> bool>,
    pre_bound: Option<(u64, u64, u64)>,
}

fn ge(b: V) -> Box<dyn Fn(&V) -> bool> {
    Box::new(move |v| cmp_v(v, &b) != Ordering::Less)
}
fn gt(b: V) -> Box<dyn Fn(&V) -> bool> {
    Box::new(move |v| cmp_v(v, &b) == Ordering::Greater)
}
fn lt(b: V) -> Box<dyn Fn(&V) -> bool> {
    Box::new(move |v| cmp_v(v, &b) == Ordering::Less)
}
fn le(b: V) -> Box<dyn Fn(&V) -> bool> {
    Box::new(move |v| cmp_v(v, &b) != Ordering::Greater)
}
fn both(a: Box<dyn Fn(&V) -> bool>, b: Box<dyn Fn(&V) -> bool>) -> Box<dyn Fn(&V) -> bool> {
    Box::new(move |v| a(v) && b(v))
}

/// First version past everything the partial names: 1 -> 2.0.0, 1.2 -> 1.3.0.
fn past(p: &Partial) -> V {
    match p.specified() {
        1 => release(p.parts[0].unwrap() + 1, 0, 0),
        2 => release(p.parts[0].unwrap(), p.parts[1].unwrap() + 1, 0),
        _ => unreachable!(),
    }
}

fn term(op: &str, p: Partial) -> Term {
    let pre_bound = (!p.pre.is_empty()).then(|| p.filled().core);
    let n = p.specified();
    let base = p.filled();
    let test: Box<dyn Fn(&V) -> bool> = if n == 0 {
        if op == ">" || op == "<" {
            Box::new(|_| false)
        } else {
            Box::new(|_| true)
        }
    } else {
        let (a, b, c) = base.core;
        match op {
            "" | "=" if n == 3 => {
                let b = base.clone();
                Box::new(move |v| cmp_v(v, &b) == Ordering::Equal)
            }
            "" | "=" => both(ge(base.clone()), lt(past(&p))),
            ">" if n == 3 => gt(base.clone()),
            ">" => ge(past(&p)),
            ">=" => ge(base.clone()),
            "<" => lt(base.clone()),
            "<=" if n == 3 => le(base.clone()),
            "<=" => lt(past(&p)),
            "~" | "~>" if n == 1 => both(ge(base.clone()), lt(release(a + 1, 0, 0))),
            "~" | "~>" => both(ge(base.clone()), lt(release(a, b + 1, 0))),
            "^" => {
                let upper = if a > 0 || n == 1 {
                    release(a + 1, 0, 0)
                } else if n == 2 || b > 0 {
                    release(0, b + 1, 0)
                } else {
                    release(0, 0, c + 1)
                };
                both(ge(base.clone()), lt(upper))
            }
            other => panic!("oracle: unknown operator {other:?}"),
        }
    };
    Term { test, pre_bound }
}

const OPS: [&str; 9] = [">=", "<=", "~>", ">", "<", "=", "~", "^", ""];

fn split_op(word: &str) -> (&str, &str) {
    for op in OPS {
        if let Some(rest) = word.strip_prefix(op) {
            return (op, rest);
        }
    }
    unreachable!()
}

fn conjunct(text: &str) -> Option<Vec<Term>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() == 3 && words[1] == "-" {
        let lo = parse_partial(words[0])?;
        let hi = parse_partial(words[2])?;
        let mut terms = Vec::new();
        if lo.specified() > 0 {
            terms.push(Term { pre_bound: (!lo.pre.is_empty()).then(|| lo.filled().core), test: ge(lo.filled()) });
        }
        match hi.specified() {
            0 => {}
            3 => terms.push(Term { pre_bound: (!hi.pre.is_empty()).then(|| hi.filled().core), test: le(hi.filled()) }),
            _ => terms.push(Term { pre_bound: None, test: lt(past(&hi)) }),
        }
        return Some(terms);
    }
    let mut terms = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let (op, mut rest) = split_op(words[i]);
        if !op.is_empty() && rest.is_empty() {
            i += 1;
            rest = words.get(i)?;
            if !split_op(rest).0.is_empty() {
                return None;
            }
        } else if !op.is_empty() && !split_op(rest).0.is_empty() {
            return None;
        }
        terms.push(term(op, parse_partial(rest)?));
        i += 1;
    }
    Some(terms)
}

/// `None` when the range text is outside the grammar.
pub fn satisfies(range: &str, v: &V) -> Option<bool> {
    let mut any = false;
    for part in range.split("||") {
        let terms = conjunct(part)?;
        let all = terms.iter().all(|t| (t.test)(v));
        let gate = v.pre.is_empty() || terms.iter().any(|t| t.pre_bound == Some(v.core));
        any |= all && gate;
    }
    Some(any)
}

pub fn max_satisfying<'a>(range: &str, vs: &'a [V]) -> Option<&'a V> {
    let mut best: Option<&V> = None;
    for v in vs {
        if satisfies(range, v)? && best.is_none_or(|b| cmp_v(v, b) == Ordering::Greater) {
            best = Some(v);
        }
    }
    best
}

pub fn show(v: &V) -> String {
    let mut s = format!("{}.{}.{}", v.core.0, v.core.1, v.core.2);
    if !v.pre.is_empty() {
        let ids: Vec<String> = v
            .pre
            .iter()
            .map(|p| match p {
                Pre::Num(n) => n.to_string(),
                Pre::Alpha(a) => a.clone(),
            })
            .collect();
        s.push('-');
        s.push_str(&ids.join("."));
    }
    s
}
