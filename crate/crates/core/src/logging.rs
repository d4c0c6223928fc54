//! Log output: one JSON object per line on stderr, or plain text.
//! Correlation ids (`seq`, `job`, `ticket`, `worker`) are ordinary event
//! fields and come out as top-level keys.

use std::io::Write;
use std::sync::Mutex;

use serde_json::{Map, Value};
use tracing::field::{Field, Visit};
use tracing::{Event, Level, Subscriber};
use tracing_subscriber::filter::LevelFilter;
use tracing_subscriber::layer::{Context, SubscriberExt};
use tracing_subscriber::util::SubscriberInitExt;
use tracing_subscriber::Layer;

use crate::config::LogFormat;

pub struct JsonLayer<W> {
    out: Mutex<W>,
}

impl<W: Write> JsonLayer<W> {
    pub fn new(out: W) -> Self {
        JsonLayer { out: Mutex::new(out) }
    }
}

struct Fields<'a>(&'a mut Map<String, Value>);

impl Visit for Fields<'_> {
    fn record_debug(&mut self, field: &Field, value: &dyn std::fmt::Debug) {
        self.0.insert(field.name().into(), Value::from(format!("{value:?}")));
    }
    fn record_str(&mut self, field: &Field, value: &str) {
        self.0.insert(field.name().into(), Value::from(value));
    }
    fn record_i64(&mut self, field: &Field, value: i64) {
        self.0.insert(field.name().into(), Value::from(value));
    }
    fn record_u64(&mut self, field: &Field, value: u64) {
        self.0.insert(field.name().into(), Value::from(value));
    }
    fn record_f64(&mut self, field: &Field, value: f64) {
        self.0.insert(field.name().into(), Value::from(value));
    }
    fn record_bool(&mut self, field: &Field, value: bool) {
        self.0.insert(field.name().into(), Value::from(value));
    }
}

/// Renders one event as a JSON object.
pub fn event_json(event: &Event<'_>) -> Value {
    let meta = event.metadata();
    let mut map = Map::new();
    map.insert("ts".into(), Value::from(crate::clock::format_ts(&chrono::Utc::now())));
    map.insert("level".into(), Value::from(meta.level().as_str()));
    map.insert("target".into(), Value::from(meta.target()));
    event.record(&mut Fields(&mut map));
    Value::Object(map)
}

impl<S: Subscriber, W: Write + Send + 'static> Layer<S> for JsonLayer<W> {
    fn on_event(&self, event: &Event<'_>, _ctx: Context<'_, S>) {
        let line = event_json(event);
        let mut out = self.out.lock().unwrap_or_else(|p| p.into_inner());
        let _ = serde_json::to_writer(&mut *out, &line);
        let _ = out.write_all(b"\n");
    }
}

/// Installs the global subscriber. A second call is a no-op.
pub fn init(format: LogFormat, level: Level) {
    let filter = LevelFilter::from_level(level);
    let _ = match format {
        LogFormat::Json => tracing_subscriber::registry()
            .with(JsonLayer::new(std::io::stderr()).with_filter(filter))
            .try_init(),
        LogFormat::Text => tracing_subscriber::registry()
            .with(tracing_subscriber::fmt::layer().with_writer(std::io::stderr).with_filter(filter))
            .try_init(),
    };
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[derive(Clone, Default)]
    struct Buf(Arc<Mutex<Vec<u8>>>);

    impl Write for Buf {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn one_object_per_line() {
        let buf = Buf::default();
        let subscriber = tracing_subscriber::registry().with(JsonLayer::new(buf.clone()));
        tracing::subscriber::with_default(subscriber, || {
            tracing::info!(job = 7, seq = "42", "downloaded");
            tracing::warn!(ticket = 3u64, ok = false, "abandoned");
        });
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["message"], "downloaded");
        assert_eq!(lines[0]["job"], 7);
        assert_eq!(lines[0]["seq"], "42");
        assert_eq!(lines[1]["level"], "WARN");
        assert_eq!(lines[1]["ticket"], 3);
    }
}
