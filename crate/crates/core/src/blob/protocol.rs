//! Manager wire protocol: each message is a 4-byte big-endian length followed
//! by that many bytes of UTF-8 JSON. One request gets exactly one response on
//! the same connection; connections may be reused for any number of requests.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, warn};

use super::{BlobError, BlobKey, BlobLocation, ManagerApi, SizeStats, TicketId, WriteTicket};

pub const MAX_FRAME: u32 = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Request {
    Reserve { key: BlobKey, size: u64 },
    Commit { ticket: TicketId, checksum: String },
    Lookup { key: BlobKey },
    Stats { threshold: Option<u64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

pub fn write_frame<T: Serialize>(w: &mut impl Write, msg: &T) -> io::Result<()> {
    let body = serde_json::to_vec(msg)?;
    let len = u32::try_from(body.len())
        .ok()
        .filter(|&n| n <= MAX_FRAME)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream before a length prefix.
pub fn read_frame<T: DeserializeOwned>(r: &mut impl Read) -> io::Result<Option<T>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body).map(Some).map_err(io::Error::from)
}

pub fn dispatch(manager: &dyn ManagerApi, request: Request) -> Response {
    let result = match request {
        Request::Reserve { key, size } => manager.reserve(&key, size).map(to_value),
        Request::Commit { ticket, checksum } => manager.commit(ticket, &checksum).map(to_value),
        Request::Lookup { key } => manager.lookup(&key).map(to_value),
        Request::Stats { threshold } => manager.stats(threshold).map(to_value),
    };
    match result {
        Ok(v) => Response { ok: true, result: Some(v), error: None },
        Err(e) => Response {
            ok: false,
            result: None,
            error: Some(ErrorBody { kind: e.kind().to_string(), message: e.to_string() }),
        },
    }
}

fn to_value<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("manager results serialize")
}

fn handle_connection(manager: Arc<dyn ManagerApi>, mut stream: TcpStream) {
    let peer = stream.peer_addr().ok();
    loop {
        let request: Request = match read_frame(&mut stream) {
            Ok(Some(r)) => r,
            Ok(None) => break,
            Err(e) => {
                if e.kind() == io::ErrorKind::InvalidData {
                    let reply = Response {
                        ok: false,
                        result: None,
                        error: Some(ErrorBody { kind: "protocol".into(), message: e.to_string() }),
                    };
                    let _ = write_frame(&mut stream, &reply);
                }
                debug!(?peer, error = %e, "manager connection closed");
                break;
            }
        };
        let response = dispatch(manager.as_ref(), request);
        if let Err(e) = write_frame(&mut stream, &response) {
            debug!(?peer, error = %e, "manager reply failed");
            break;
        }
    }
}

/// Accepts connections until `stop` is set, one thread per connection.
pub fn serve_manager(listener: TcpListener, manager: Arc<dyn ManagerApi>, stop: Arc<AtomicBool>) -> io::Result<()> {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        match stream {
            Ok(stream) => {
                let _ = stream.set_nodelay(true);
                let manager = manager.clone();
                std::thread::spawn(move || handle_connection(manager, stream));
            }
            Err(e) => warn!(error = %e, "accept failed"),
        }
    }
    Ok(())
}

/// A manager listening on a background thread.
pub struct ManagerServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<io::Result<()>>>,
}

impl ManagerServer {
    pub fn start(addr: impl ToSocketAddrs, manager: Arc<dyn ManagerApi>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || serve_manager(listener, manager, flag));
        Ok(ManagerServer { addr, stop, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        if let Some(handle) = self.handle.take() {
            self.stop.store(true, Ordering::SeqCst);
            // Wake the accept loop.
            let _ = TcpStream::connect(self.addr);
            let _ = handle.join();
        }
    }
}

impl Drop for ManagerServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Client side of the protocol with a small connection pool.
pub struct RemoteManager {
    addr: String,
    pool: Mutex<Vec<TcpStream>>,
    timeout: Duration,
}

impl RemoteManager {
    pub fn new(addr: impl Into<String>) -> Self {
        RemoteManager { addr: addr.into(), pool: Mutex::new(Vec::new()), timeout: Duration::from_secs(60) }
    }

    fn connect(&self) -> io::Result<TcpStream> {
        let stream = TcpStream::connect(&self.addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(self.timeout))?;
        Ok(stream)
    }

    fn exchange(stream: &mut TcpStream, request: &Request) -> io::Result<Response> {
        write_frame(stream, request)?;
        read_frame(stream)?.ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "manager closed connection"))
    }

    fn call<T: DeserializeOwned>(&self, request: Request) -> Result<T, BlobError> {
        let pooled = self.pool.lock().unwrap().pop();
        let (stream, response) = match pooled {
            Some(mut stream) => match Self::exchange(&mut stream, &request) {
                Ok(r) => (stream, r),
                // A pooled connection may have gone stale; retry once on a
                // fresh one unless the request could already have applied.
                Err(_) if !matches!(request, Request::Commit { .. }) => {
                    let mut stream = self.connect()?;
                    let r = Self::exchange(&mut stream, &request)?;
                    (stream, r)
                }
                Err(e) => return Err(e.into()),
            },
            None => {
                let mut stream = self.connect()?;
                let r = Self::exchange(&mut stream, &request)?;
                (stream, r)
            }
        };
        let _ = stream.set_read_timeout(Some(self.timeout));
        self.pool.lock().unwrap().push(stream);
        if response.ok {
            let value = response.result.unwrap_or(Value::Null);
            serde_json::from_value(value).map_err(|e| BlobError::Protocol(e.to_string()))
        } else {
            let body = response
                .error
                .unwrap_or(ErrorBody { kind: "protocol".into(), message: "error without body".into() });
            Err(decode_error(&request, body))
        }
    }
}

fn decode_error(request: &Request, body: ErrorBody) -> BlobError {
    let key = match request {
        Request::Reserve { key, .. } | Request::Lookup { key } => Some(key.clone()),
        _ => None,
    };
    let ticket = match request {
        Request::Commit { ticket, .. } => *ticket,
        _ => 0,
    };
    match body.kind.as_str() {
        "already-stored" => BlobError::AlreadyStored(key.unwrap_or_else(|| BlobKey::new(body.message))),
        "not-found" => BlobError::NotFound(key.unwrap_or_else(|| BlobKey::new(body.message))),
        "store-full" => BlobError::StoreFull,
        "zero-length" => BlobError::ZeroLength,
        "ticket-expired" => BlobError::TicketExpired(ticket),
        "unknown-ticket" => BlobError::UnknownTicket(ticket),
        "checksum-mismatch" => BlobError::ChecksumMismatch {
            ticket,
            expected: match request {
                Request::Commit { checksum, .. } => checksum.clone(),
                _ => String::new(),
            },
            found: body.message,
        },
        "io-failure" => BlobError::Io(io::Error::other(body.message)),
        _ => BlobError::Protocol(format!("{}: {}", body.kind, body.message)),
    }
}

impl ManagerApi for RemoteManager {
    fn reserve(&self, key: &BlobKey, size: u64) -> Result<WriteTicket, BlobError> {
        self.call(Request::Reserve { key: key.clone(), size })
    }

    fn commit(&self, ticket: TicketId, checksum: &str) -> Result<BlobLocation, BlobError> {
        self.call(Request::Commit { ticket, checksum: checksum.to_string() })
    }

    fn lookup(&self, key: &BlobKey) -> Result<BlobLocation, BlobError> {
        self.call(Request::Lookup { key: key.clone() })
    }

    fn stats(&self, threshold: Option<u64>) -> Result<SizeStats, BlobError> {
        self.call(Request::Stats { threshold })
    }
}
