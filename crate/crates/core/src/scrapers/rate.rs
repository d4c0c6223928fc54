use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::{to_delta, SharedClock, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateBudget {
    pub requests_per_interval: u32,
    #[serde(with = "secs")]
    pub interval: Duration,
    /// Max packages per bulk metrics request.
    pub batch_size: usize,
}

impl Default for RateBudget {
    fn default() -> Self {
        RateBudget { requests_per_interval: 1, interval: Duration::from_secs(60), batch_size: 128 }
    }
}

impl RateBudget {
    pub fn validate(&self) -> Result<(), String> {
        if self.requests_per_interval == 0 {
            return Err("requests_per_interval must be positive".into());
        }
        if self.interval.is_zero() {
            return Err("interval must be positive".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        Ok(())
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_secs)
    }
}

/// Sliding-window limiter: at most `requests_per_interval` requests in any
/// half-open window `(t - interval, t]`.
pub struct RateLimiter {
    budget: RateBudget,
    clock: SharedClock,
    sent: VecDeque<Timestamp>,
}

impl RateLimiter {
    pub fn new(budget: RateBudget, clock: SharedClock) -> Self {
        RateLimiter { budget, clock, sent: VecDeque::new() }
    }

    fn prune(&mut self, now: Timestamp) {
        let horizon = now - to_delta(self.budget.interval);
        while self.sent.front().is_some_and(|t| *t <= horizon) {
            self.sent.pop_front();
        }
    }

    /// Earliest time the next request may be sent.
    pub fn next_permit(&mut self) -> Timestamp {
        let now = self.clock.now();
        self.prune(now);
        if self.sent.len() < self.budget.requests_per_interval as usize {
            now
        } else {
            let oldest = self.sent[self.sent.len() - self.budget.requests_per_interval as usize];
            (oldest + to_delta(self.budget.interval)).max(now)
        }
    }

    /// Waits (on the clock) for a permit and records the request.
    pub fn acquire(&mut self) -> Timestamp {
        let at = self.next_permit();
        let now = self.clock.now();
        if at > now {
            self.clock.sleep((at - now).to_std().unwrap_or_default());
        }
        let now = self.clock.now();
        self.prune(now);
        self.sent.push_back(now);
        now
    }
}
