//! Injectable time source. Everything that reads the time goes through a
//! [`Clock`] so that leases, backoff, ticket expiry, latency accounting and
//! rate limiting can run against a simulated clock in tests.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, TimeDelta, Utc};

pub type Timestamp = DateTime<Utc>;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;

    /// Blocks (real clock) or advances time (simulated clock).
    fn sleep(&self, d: Duration);
}

pub type SharedClock = Arc<dyn Clock>;

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Utc::now()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Manually driven clock. `sleep` advances it instead of blocking.
#[derive(Debug)]
pub struct SimClock {
    now: Mutex<Timestamp>,
}

impl SimClock {
    pub fn new(start: Timestamp) -> Self {
        SimClock {
            now: Mutex::new(start),
        }
    }

    pub fn shared(start: Timestamp) -> Arc<SimClock> {
        Arc::new(SimClock::new(start))
    }

    pub fn advance(&self, d: Duration) {
        let mut now = self.now.lock().unwrap();
        *now += to_delta(d);
    }

    /// Moves the clock forward to `t`; never moves it backwards.
    pub fn advance_to(&self, t: Timestamp) {
        let mut now = self.now.lock().unwrap();
        if t > *now {
            *now = t;
        }
    }
}

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

pub fn to_delta(d: Duration) -> TimeDelta {
    TimeDelta::from_std(d).unwrap_or(TimeDelta::MAX)
}

/// Fixed-width RFC 3339 (millisecond precision, `Z` suffix), so stored
/// timestamps sort lexicographically in time order.
pub fn format_ts(t: &Timestamp) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn parse_ts(s: &str) -> Option<Timestamp> {
    DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

/// Parses `90`, `90s`, `15m`, `24h`, `7d`.
pub fn parse_duration(s: &str) -> Option<Duration> {
    let s = s.trim();
    let (digits, unit) = match s.find(|c: char| !c.is_ascii_digit()) {
        Some(i) => s.split_at(i),
        None => (s, "s"),
    };
    let n: u64 = digits.parse().ok()?;
    let secs = match unit {
        "s" => n,
        "m" => n.checked_mul(60)?,
        "h" => n.checked_mul(3600)?,
        "d" => n.checked_mul(86_400)?,
        _ => return None,
    };
    Some(Duration::from_secs(secs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_clock_sleep_advances() {
        let start = parse_ts("2023-05-10T00:00:00Z").unwrap();
        let clock = SimClock::new(start);
        clock.sleep(Duration::from_secs(90));
        assert_eq!(clock.now() - start, TimeDelta::seconds(90));
        clock.advance_to(start);
        assert_eq!(clock.now() - start, TimeDelta::seconds(90));
    }

    #[test]
    fn timestamps_sort_lexicographically() {
        let a = parse_ts("2023-01-01T00:00:00.5Z").unwrap();
        let b = parse_ts("2023-01-01T00:00:10Z").unwrap();
        assert!(format_ts(&a) < format_ts(&b));
        assert_eq!(format_ts(&a), "2023-01-01T00:00:00.500Z");
        assert_eq!(parse_ts(&format_ts(&b)), Some(b));
    }

    #[test]
    fn durations() {
        assert_eq!(parse_duration("24h"), Some(Duration::from_secs(86_400)));
        assert_eq!(parse_duration("15m"), Some(Duration::from_secs(900)));
        assert_eq!(parse_duration("30"), Some(Duration::from_secs(30)));
        assert_eq!(parse_duration("2d"), Some(Duration::from_secs(172_800)));
        assert_eq!(parse_duration("h"), None);
        assert_eq!(parse_duration("3w"), None);
    }
}
