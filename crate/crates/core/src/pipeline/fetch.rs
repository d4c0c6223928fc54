use std::collections::HashMap;
use std::io::Read;
use std::sync::Mutex;
use std::time::Duration;

/// Body of a successful fetch.
pub struct Download {
    /// From `Content-Length`, when the server sent one.
    pub size: Option<u64>,
    pub body: Box<dyn Read + Send>,
}

pub enum FetchResponse {
    Ok(Download),
    Status(u16),
}

/// Plain GET of a tarball URL. `Err` means a transport failure.
pub trait Fetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<FetchResponse, String>;
}

pub struct HttpFetcher {
    agent: ureq::Agent,
}

impl HttpFetcher {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpFetcher { agent }
    }
}

impl Default for HttpFetcher {
    fn default() -> Self {
        HttpFetcher::new(Duration::from_secs(600))
    }
}

impl Fetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<FetchResponse, String> {
        let response = self.agent.get(url).call().map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        if status != 200 {
            return Ok(FetchResponse::Status(status));
        }
        let body = response.into_body();
        let size = body.content_length();
        Ok(FetchResponse::Ok(Download { size, body: Box::new(body.into_reader()) }))
    }
}

/// Canned responses keyed by URL, for tests and examples. Each URL serves
/// its scripted statuses in order, then its body forever.
#[derive(Default)]
pub struct StaticFetcher {
    entries: Mutex<HashMap<String, (Vec<u16>, Option<Vec<u8>>)>>,
}

impl StaticFetcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, url: &str, bytes: impl Into<Vec<u8>>) {
        self.entries.lock().unwrap().entry(url.to_string()).or_default().1 = Some(bytes.into());
    }

    /// Statuses to return (in order) before the body is served.
    pub fn fail_first(&self, url: &str, statuses: &[u16]) {
        self.entries.lock().unwrap().entry(url.to_string()).or_default().0.extend_from_slice(statuses);
    }
}

impl Fetcher for StaticFetcher {
    fn fetch(&self, url: &str) -> Result<FetchResponse, String> {
        let mut entries = self.entries.lock().unwrap();
        let Some((faults, body)) = entries.get_mut(url) else {
            return Ok(FetchResponse::Status(404));
        };
        if !faults.is_empty() {
            return Ok(FetchResponse::Status(faults.remove(0)));
        }
        match body {
            Some(bytes) => Ok(FetchResponse::Ok(Download {
                size: Some(bytes.len() as u64),
                body: Box::new(std::io::Cursor::new(bytes.clone())),
            })),
            None => Ok(FetchResponse::Status(404)),
        }
    }
}
