//! Changes-feed ingest: poll, normalize against stored state, apply.
//!
//! Each event is applied in its own transaction together with the feed
//! cursor, so stopping at any point and resuming from the stored cursor
//! yields the same store as an uninterrupted run.

mod apply;
mod feed;
mod normalize;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use tracing::{debug, info, warn};

pub use apply::{apply, dead_letter_event, ApplySummary};
pub use feed::{parse_changes_page, MAX_BODY_BYTES, ChangeEvent, ChangesFeed, ChangesPage, FeedError, HttpChangesFeed, SeqToken, VecFeed};
pub use normalize::{json_digest, normalize, parse_repository, NewVersion, NormalizeError, NormalizedUpdate, RejectedVersion, Repository};

use crate::clock::SharedClock;
use crate::store::{Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error(transparent)]
    Feed(#[from] FeedError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl IngestError {
    pub fn kind(&self) -> &'static str {
        match self {
            IngestError::Feed(e) => e.kind(),
            IngestError::Store(e) => e.kind(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub events: usize,
    pub pages: usize,
    pub invalid_events: usize,
    pub resyncs: usize,
    pub applied: ApplySummary,
    pub cursor: String,
}

pub struct Ingestor {
    store: Arc<Store>,
    feed: Arc<dyn ChangesFeed>,
    clock: SharedClock,
    page_size: usize,
    start: SeqToken,
}

impl Ingestor {
    pub fn new(store: Arc<Store>, feed: Arc<dyn ChangesFeed>, clock: SharedClock) -> Self {
        Ingestor { store, feed, clock, page_size: 100, start: SeqToken::start() }
    }

    pub fn with_page_size(mut self, n: usize) -> Self {
        self.page_size = n.max(1);
        self
    }

    /// Cursor used when the store has none yet.
    pub fn with_start(mut self, start: SeqToken) -> Self {
        self.start = start;
        self
    }

    pub fn cursor(&self) -> Result<SeqToken, StoreError> {
        Ok(self.store.cursor(self.feed.feed_id())?.map(SeqToken).unwrap_or_else(|| self.start.clone()))
    }

    /// Applies one event in its own transaction. The flag is set when the
    /// event was dead-lettered as a whole.
    pub fn ingest_event(&self, event: &ChangeEvent) -> Result<(ApplySummary, bool), StoreError> {
        let feed_id = self.feed.feed_id();
        let now = self.clock.now();
        self.store.with_tx(|tx| {
            let known = tx.known_package(&event.package_name)?;
            match normalize(event, known.as_ref(), now) {
                Ok(update) => {
                    let summary = apply(tx, feed_id, &update)?;
                    debug!(seq = %event.seq, package = %event.package_name, writes = summary.writes(), "applied");
                    Ok((summary, false))
                }
                Err(e) => {
                    warn!(seq = %event.seq, package = %event.package_name, error = %e, "dead-lettered event");
                    Ok((dead_letter_event(tx, feed_id, event, &e.to_string(), &now)?, true))
                }
            }
        })
    }

    /// Fetches and applies one page. Returns the number of events.
    pub fn poll_once(&self, report: &mut IngestReport) -> Result<usize, IngestError> {
        let cursor = self.cursor()?;
        let page = match self.feed.poll(&cursor, self.page_size) {
            Ok(page) => page,
            Err(FeedError::CursorExpired(reason)) => {
                // Full resync: every step of apply is idempotent.
                warn!(%cursor, %reason, "cursor expired, restarting from the start token");
                report.resyncs += 1;
                self.store.with_tx(|tx| tx.set_cursor(self.feed.feed_id(), self.start.as_str()))?;
                self.feed.poll(&self.start, self.page_size)?
            }
            Err(e) => return Err(e.into()),
        };
        report.pages += 1;
        for event in &page.events {
            let (summary, invalid) = self.ingest_event(event)?;
            report.invalid_events += invalid as usize;
            report.applied.add(&summary);
            report.events += 1;
        }
        if page.next_cursor != self.cursor()? {
            self.store.with_tx(|tx| tx.set_cursor(self.feed.feed_id(), page.next_cursor.as_str()))?;
        }
        report.cursor = self.cursor()?.0;
        Ok(page.events.len())
    }

    /// Polls until the feed returns an empty page.
    pub fn drain(&self) -> Result<IngestReport, IngestError> {
        let mut report = IngestReport::default();
        while self.poll_once(&mut report)? > 0 {}
        report.cursor = self.cursor()?.0;
        Ok(report)
    }

    /// Follows the feed until `stop` is set. Transient failures are retried
    /// with the same cursor after `idle`.
    pub fn run(&self, stop: &AtomicBool, idle: Duration) -> Result<IngestReport, IngestError> {
        let mut report = IngestReport::default();
        while !stop.load(Ordering::SeqCst) {
            match self.poll_once(&mut report) {
                Ok(0) => self.clock.sleep(idle),
                Ok(_) => {}
                Err(IngestError::Feed(e)) => {
                    warn!(error = %e, kind = e.kind(), "feed poll failed; retrying");
                    self.clock.sleep(idle);
                }
                Err(IngestError::Store(e)) if e.is_transient() => {
                    warn!(error = %e, "store unavailable; retrying");
                    self.clock.sleep(idle);
                }
                Err(e) => return Err(e),
            }
        }
        info!(events = report.events, cursor = %report.cursor, "ingest stopped");
        Ok(report)
    }
}
