use std::fmt;
use std::sync::Mutex;
use std::time::Duration;

use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

/// Position in a changes feed. Opaque: CouchDB-style feeds use numbers or
/// strings, both kept verbatim as text.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct SeqToken(pub String);

impl SeqToken {
    /// The designated start token: everything the feed has.
    pub fn start() -> Self {
        SeqToken("0".into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SeqToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for SeqToken {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) => Ok(SeqToken(s)),
            Value::Number(n) => Ok(SeqToken(n.to_string())),
            other => Err(serde::de::Error::custom(format!("unsupported seq token {other}"))),
        }
    }
}

/// One row of the feed. `doc` is the full manifest for a live package.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeEvent {
    pub seq: SeqToken,
    pub package_name: String,
    pub deleted: bool,
    pub doc: Option<Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangesPage {
    pub events: Vec<ChangeEvent>,
    /// Resume point after the last returned event.
    pub next_cursor: SeqToken,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeedError {
    #[error("feed unavailable: {0}")]
    Unavailable(String),
    #[error("cursor expired: {0}")]
    CursorExpired(String),
    #[error("malformed feed response: {0}")]
    Malformed(String),
}

impl FeedError {
    pub fn kind(&self) -> &'static str {
        match self {
            FeedError::Unavailable(_) => "feed-unavailable",
            FeedError::CursorExpired(_) => "cursor-expired",
            FeedError::Malformed(_) => "feed-malformed",
        }
    }
}

pub trait ChangesFeed: Send + Sync {
    /// Stable identifier under which the cursor is persisted.
    fn feed_id(&self) -> &str;

    fn poll(&self, cursor: &SeqToken, limit: usize) -> Result<ChangesPage, FeedError>;
}

#[derive(Deserialize)]
struct WireRow {
    seq: SeqToken,
    id: String,
    #[serde(default)]
    deleted: bool,
    #[serde(default)]
    doc: Option<Value>,
}

#[derive(Deserialize)]
struct WirePage {
    results: Vec<WireRow>,
    last_seq: Option<SeqToken>,
}

/// Parses a `_changes` response body.
pub fn parse_changes_page(body: &str, cursor: &SeqToken) -> Result<ChangesPage, FeedError> {
    let page: WirePage = serde_json::from_str(body).map_err(|e| FeedError::Malformed(e.to_string()))?;
    let events: Vec<ChangeEvent> = page
        .results
        .into_iter()
        .map(|r| ChangeEvent {
            seq: r.seq,
            package_name: r.id,
            deleted: r.deleted,
            doc: if r.deleted { None } else { r.doc },
        })
        .collect();
    let next_cursor = match events.last() {
        Some(last) => page.last_seq.unwrap_or_else(|| last.seq.clone()),
        None => cursor.clone(),
    };
    Ok(ChangesPage { events, next_cursor })
}

/// `GET {base}/_changes?since=..&limit=..&include_docs=true`, polled in
/// normal (non-continuous) mode.
pub struct HttpChangesFeed {
    feed_id: String,
    base_url: String,
    agent: ureq::Agent,
}

impl HttpChangesFeed {
    pub fn new(feed_id: impl Into<String>, base_url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        HttpChangesFeed { feed_id: feed_id.into(), base_url: base_url.into().trim_end_matches('/').to_string(), agent }
    }
}

/// Upper bound on one response body. A page of documents that each list a
/// package's full history can run far past the HTTP client's default.
pub const MAX_BODY_BYTES: u64 = 1 << 30;

impl ChangesFeed for HttpChangesFeed {
    fn feed_id(&self) -> &str {
        &self.feed_id
    }

    fn poll(&self, cursor: &SeqToken, limit: usize) -> Result<ChangesPage, FeedError> {
        let url = format!(
            "{}/_changes?since={}&limit={}&include_docs=true",
            self.base_url,
            utf8_percent_encode(cursor.as_str(), NON_ALPHANUMERIC),
            limit.max(1)
        );
        let mut response = self.agent.get(&url).call().map_err(|e| FeedError::Unavailable(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES)
            .read_to_string()
            .map_err(|e| FeedError::Unavailable(e.to_string()))?;
        match status {
            200 => parse_changes_page(&body, cursor),
            400 | 410 => Err(FeedError::CursorExpired(format!("HTTP {status} for since={cursor}"))),
            s if s == 429 || s >= 500 => Err(FeedError::Unavailable(format!("HTTP {s}"))),
            s => Err(FeedError::Malformed(format!("unexpected HTTP {s}"))),
        }
    }
}

/// An in-memory feed over a fixed list of events.
pub struct VecFeed {
    feed_id: String,
    events: Mutex<Vec<ChangeEvent>>,
}

impl VecFeed {
    pub fn new(feed_id: impl Into<String>, events: Vec<ChangeEvent>) -> Self {
        VecFeed { feed_id: feed_id.into(), events: Mutex::new(events) }
    }

    pub fn push(&self, event: ChangeEvent) {
        self.events.lock().unwrap().push(event);
    }
}

impl ChangesFeed for VecFeed {
    fn feed_id(&self) -> &str {
        &self.feed_id
    }

    fn poll(&self, cursor: &SeqToken, limit: usize) -> Result<ChangesPage, FeedError> {
        let events = self.events.lock().unwrap();
        let from = if *cursor == SeqToken::start() {
            0
        } else {
            events
                .iter()
                .position(|e| e.seq == *cursor)
                .map(|i| i + 1)
                .ok_or_else(|| FeedError::CursorExpired(cursor.to_string()))?
        };
        let page: Vec<ChangeEvent> = events.iter().skip(from).take(limit.max(1)).cloned().collect();
        let next_cursor = page.last().map_or_else(|| cursor.clone(), |e| e.seq.clone());
        Ok(ChangesPage { events: page, next_cursor })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn ev(seq: u32, name: &str) -> ChangeEvent {
        ChangeEvent { seq: SeqToken(seq.to_string()), package_name: name.into(), deleted: false, doc: Some(json!({})) }
    }

    #[test]
    fn parses_wire_shape() {
        let body = json!({
            "results": [
                {"seq": 1, "id": "a", "doc": {"name": "a"}},
                {"seq": "2-g1AAAA", "id": "b", "deleted": true},
            ],
            "last_seq": "2-g1AAAA"
        })
        .to_string();
        let page = parse_changes_page(&body, &SeqToken::start()).unwrap();
        assert_eq!(page.events.len(), 2);
        assert_eq!(page.events[0].seq, SeqToken("1".into()));
        assert!(page.events[1].deleted && page.events[1].doc.is_none());
        assert_eq!(page.next_cursor.as_str(), "2-g1AAAA");
    }

    #[test]
    fn vec_feed_pages() {
        let feed = VecFeed::new("f", vec![ev(1, "a"), ev(2, "b"), ev(3, "c")]);
        let page = feed.poll(&SeqToken::start(), 2).unwrap();
        assert_eq!(page.events.len(), 2);
        assert_eq!(page.next_cursor.as_str(), "2");
        let page = feed.poll(&page.next_cursor, 2).unwrap();
        assert_eq!(page.events.len(), 1);
        let end = feed.poll(&page.next_cursor, 5).unwrap();
        assert!(end.events.is_empty());
        assert_eq!(end.next_cursor.as_str(), "3");
    }
}
