//! Pluggable duplex message delivery between the aggregator and each
//! registered party. Two implementations share one interface: in-process
//! channels for simulation/tests and a TCP wire for real deployments.
//!
//! Wire format (TCP): each frame is a 4-byte big-endian unsigned length
//! followed by that many bytes of UTF-8 JSON — one message envelope.
//! The in-process transport carries the same encoded envelope bytes
//! through a channel, so both paths exercise the same codec.
//!
//! Connections have exactly one reader; writes are serialized by an
//! internal lock. The aggregator listens, parties dial out, so no ports
//! need opening on the party side.

use std::collections::HashMap;
use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use crate::error::{FedError, Result};
use crate::protocol::MessageEnvelope;

/// Upper bound on one frame body. Oversized sends fail before anything
/// is written; oversized receive headers poison the connection.
pub const DEFAULT_MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

const POLL_SLICE: Duration = Duration::from_millis(25);

/// Where a peer can be reached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Key into the process-wide listener table.
    InProcess { key: String },
    /// `host:port`.
    Tcp { addr: String },
}

impl Endpoint {
    pub fn in_process(key: impl Into<String>) -> Self {
        Endpoint::InProcess { key: key.into() }
    }

    pub fn tcp(addr: impl Into<String>) -> Self {
        Endpoint::Tcp { addr: addr.into() }
    }

    pub fn describe(&self) -> String {
        match self {
            Endpoint::InProcess { key } => format!("in-process:{key}"),
            Endpoint::Tcp { addr } => format!("tcp:{addr}"),
        }
    }
}

/// Prefixes a frame header; fails (writing nothing) when the body
/// exceeds the cap.
pub fn encode_frame(body: &[u8], max_len: usize) -> Result<Vec<u8>> {
    if body.len() > max_len {
        return Err(FedError::Transport(format!(
            "frame too large: {} bytes exceeds cap {max_len}",
            body.len()
        )));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

/// Reads the header of a buffered frame: `Some(body_len)` once four
/// bytes are available.
pub fn decode_frame_len(buf: &[u8], max_len: usize) -> Result<Option<usize>> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > max_len {
        return Err(FedError::Transport(format!(
            "incoming frame of {len} bytes exceeds cap {max_len}"
        )));
    }
    Ok(Some(len))
}

enum ConnInner {
    InProc {
        tx: Mutex<Option<mpsc::Sender<Vec<u8>>>>,
        rx: Mutex<mpsc::Receiver<Vec<u8>>>,
        closed: AtomicBool,
    },
    Tcp {
        writer: Mutex<TcpStream>,
        reader: Mutex<TcpReadState>,
        closed: AtomicBool,
    },
}

struct TcpReadState {
    stream: TcpStream,
    buf: Vec<u8>,
}

/// One duplex connection. Envelopes are delivered exactly once, in FIFO
/// order per direction.
pub struct Connection {
    inner: ConnInner,
    peer: String,
    max_frame_len: usize,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection").field("peer", &self.peer).finish()
    }
}

impl Connection {
    /// A human-readable peer locator for logs and the registry.
    pub fn peer_desc(&self) -> &str {
        &self.peer
    }

    /// Serializes, frames, and delivers one envelope.
    pub fn send(&self, envelope: &MessageEnvelope) -> Result<()> {
        let body = envelope.to_bytes()?;
        if body.len() > self.max_frame_len {
            return Err(FedError::Transport(format!(
                "frame too large: {} bytes exceeds cap {}",
                body.len(),
                self.max_frame_len
            )));
        }
        match &self.inner {
            ConnInner::InProc { tx, closed, .. } => {
                if closed.load(Ordering::SeqCst) {
                    return Err(FedError::Transport("connection closed".into()));
                }
                let guard = tx.lock().expect("in-proc tx lock");
                match guard.as_ref() {
                    Some(sender) => sender
                        .send(body)
                        .map_err(|_| FedError::Transport("connection closed by peer".into())),
                    None => Err(FedError::Transport("connection closed".into())),
                }
            }
            ConnInner::Tcp { writer, closed, .. } => {
                if closed.load(Ordering::SeqCst) {
                    return Err(FedError::Transport("connection closed".into()));
                }
                let frame = encode_frame(&body, self.max_frame_len)?;
                let mut stream = writer.lock().expect("tcp writer lock");
                stream
                    .write_all(&frame)
                    .and_then(|_| stream.flush())
                    .map_err(|e| FedError::Transport(format!("send failed: {e}")))
            }
        }
    }

    /// Blocks until one complete envelope arrives.
    pub fn recv(&self) -> Result<MessageEnvelope> {
        match self.recv_deadline(None)? {
            Some(env) => Ok(env),
            None => unreachable!("no deadline means no timeout"),
        }
    }

    /// Waits up to `timeout`; `Ok(None)` on timeout.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<MessageEnvelope>> {
        self.recv_deadline(Some(Instant::now() + timeout))
    }

    fn recv_deadline(&self, deadline: Option<Instant>) -> Result<Option<MessageEnvelope>> {
        let body = match &self.inner {
            ConnInner::InProc { rx, closed, .. } => {
                let rx = rx.lock().expect("in-proc rx lock");
                loop {
                    if closed.load(Ordering::SeqCst) {
                        return Err(FedError::Transport("connection closed".into()));
                    }
                    match rx.recv_timeout(slice_until(deadline)) {
                        Ok(bytes) => break bytes,
                        Err(mpsc::RecvTimeoutError::Timeout) => {
                            if past(deadline) {
                                return Ok(None);
                            }
                        }
                        Err(mpsc::RecvTimeoutError::Disconnected) => {
                            return Err(FedError::Transport(
                                "connection closed by peer".into(),
                            ))
                        }
                    }
                }
            }
            ConnInner::Tcp { reader, closed, .. } => {
                let mut state = reader.lock().expect("tcp reader lock");
                loop {
                    if closed.load(Ordering::SeqCst) {
                        return Err(FedError::Transport("connection closed".into()));
                    }
                    if let Some(len) = decode_frame_len(&state.buf, self.max_frame_len)? {
                        if state.buf.len() >= 4 + len {
                            let body: Vec<u8> = state.buf[4..4 + len].to_vec();
                            state.buf.drain(..4 + len);
                            break body;
                        }
                    }
                    state
                        .stream
                        .set_read_timeout(Some(slice_until(deadline)))
                        .map_err(|e| FedError::Transport(e.to_string()))?;
                    let mut chunk = [0u8; 8192];
                    match state.stream.read(&mut chunk) {
                        Ok(0) => {
                            return if state.buf.is_empty() {
                                Err(FedError::Transport("connection closed by peer".into()))
                            } else {
                                Err(FedError::Transport("partial frame at EOF".into()))
                            }
                        }
                        Ok(n) => state.buf.extend_from_slice(&chunk[..n]),
                        Err(e)
                            if e.kind() == ErrorKind::WouldBlock
                                || e.kind() == ErrorKind::TimedOut =>
                        {
                            if past(deadline) {
                                return Ok(None);
                            }
                        }
                        Err(e) => {
                            return Err(FedError::Transport(format!("recv failed: {e}")))
                        }
                    }
                }
            }
        };
        MessageEnvelope::from_bytes(&body).map(Some)
    }

    /// Half-closes the connection: pending receives on both sides wake
    /// with a transport error once drained.
    pub fn close(&self) {
        match &self.inner {
            ConnInner::InProc { tx, closed, .. } => {
                closed.store(true, Ordering::SeqCst);
                tx.lock().expect("in-proc tx lock").take();
            }
            ConnInner::Tcp { writer, closed, .. } => {
                closed.store(true, Ordering::SeqCst);
                let stream = writer.lock().expect("tcp writer lock");
                let _ = stream.shutdown(std::net::Shutdown::Both);
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        self.close();
    }
}

fn slice_until(deadline: Option<Instant>) -> Duration {
    match deadline {
        Some(d) => d.saturating_duration_since(Instant::now()).min(POLL_SLICE),
        None => POLL_SLICE,
    }
    .max(Duration::from_millis(1))
}

fn past(deadline: Option<Instant>) -> bool {
    matches!(deadline, Some(d) if Instant::now() >= d)
}

// ---------------------------------------------------------------------------
// Listeners

fn in_proc_table() -> &'static Mutex<HashMap<String, mpsc::Sender<Connection>>> {
    static TABLE: OnceLock<Mutex<HashMap<String, mpsc::Sender<Connection>>>> = OnceLock::new();
    TABLE.get_or_init(|| Mutex::new(HashMap::new()))
}

enum ListenerInner {
    InProc { rx: Mutex<mpsc::Receiver<Connection>> },
    Tcp { listener: TcpListener },
}

/// An accepting endpoint owned by the aggregator.
pub struct Listener {
    inner: ListenerInner,
    endpoint: Endpoint,
    closed: AtomicBool,
}

impl std::fmt::Debug for Listener {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Listener").field("endpoint", &self.endpoint).finish()
    }
}

impl Listener {
    /// The bound endpoint; for `Tcp` with port 0 this carries the
    /// kernel-chosen port.
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Waits up to `timeout` for one inbound connection.
    pub fn accept_timeout(&self, timeout: Duration) -> Result<Option<Connection>> {
        let deadline = Instant::now() + timeout;
        loop {
            if self.closed.load(Ordering::SeqCst) {
                return Err(FedError::Transport("listener closed".into()));
            }
            match &self.inner {
                ListenerInner::InProc { rx } => {
                    let rx = rx.lock().expect("accept rx lock");
                    match rx.recv_timeout(slice_until(Some(deadline))) {
                        Ok(conn) => return Ok(Some(conn)),
                        Err(mpsc::RecvTimeoutError::Timeout) => {}
                        Err(mpsc::RecvTimeoutError::Disconnected) => {
                            return Err(FedError::Transport("listener closed".into()))
                        }
                    }
                }
                ListenerInner::Tcp { listener } => match listener.accept() {
                    Ok((stream, peer)) => {
                        stream
                            .set_nonblocking(false)
                            .map_err(|e| FedError::Transport(e.to_string()))?;
                        return Ok(Some(tcp_connection(stream, format!("tcp:{peer}"))?));
                    }
                    Err(e)
                        if e.kind() == ErrorKind::WouldBlock
                            || e.kind() == ErrorKind::TimedOut =>
                    {
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Err(e) => return Err(FedError::Transport(format!("accept failed: {e}"))),
                },
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
        }
    }

    /// Stops accepting; pending and future `accept_timeout` calls error
    /// out. The in-process key becomes reusable.
    pub fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        if let Endpoint::InProcess { key } = &self.endpoint {
            in_proc_table().lock().expect("in-proc table lock").remove(key);
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.close();
    }
}

fn tcp_connection(stream: TcpStream, peer: String) -> Result<Connection> {
    stream
        .set_nodelay(true)
        .map_err(|e| FedError::Transport(e.to_string()))?;
    let reader = stream
        .try_clone()
        .map_err(|e| FedError::Transport(e.to_string()))?;
    Ok(Connection {
        inner: ConnInner::Tcp {
            writer: Mutex::new(stream),
            reader: Mutex::new(TcpReadState { stream: reader, buf: Vec::new() }),
            closed: AtomicBool::new(false),
        },
        peer,
        max_frame_len: DEFAULT_MAX_FRAME_LEN,
    })
}

fn in_proc_pair(key: &str) -> (Connection, Connection) {
    let (a_tx, a_rx) = mpsc::channel();
    let (b_tx, b_rx) = mpsc::channel();
    let dialer = Connection {
        inner: ConnInner::InProc {
            tx: Mutex::new(Some(a_tx)),
            rx: Mutex::new(b_rx),
            closed: AtomicBool::new(false),
        },
        peer: format!("in-process:{key}"),
        max_frame_len: DEFAULT_MAX_FRAME_LEN,
    };
    let accepted = Connection {
        inner: ConnInner::InProc {
            tx: Mutex::new(Some(b_tx)),
            rx: Mutex::new(a_rx),
            closed: AtomicBool::new(false),
        },
        peer: format!("in-process:{key}:peer"),
        max_frame_len: DEFAULT_MAX_FRAME_LEN,
    };
    (dialer, accepted)
}

/// Binds an accepting endpoint. TCP addresses may use port 0 to let the
/// kernel pick; the returned listener reports the actual port.
pub fn listen(endpoint: &Endpoint) -> Result<Listener> {
    match endpoint {
        Endpoint::InProcess { key } => {
            let mut table = in_proc_table().lock().expect("in-proc table lock");
            if table.contains_key(key) {
                return Err(FedError::Transport(format!(
                    "in-process key {key:?} already bound"
                )));
            }
            let (tx, rx) = mpsc::channel();
            table.insert(key.clone(), tx);
            Ok(Listener {
                inner: ListenerInner::InProc { rx: Mutex::new(rx) },
                endpoint: endpoint.clone(),
                closed: AtomicBool::new(false),
            })
        }
        Endpoint::Tcp { addr } => {
            let listener = TcpListener::bind(addr)
                .map_err(|e| FedError::Transport(format!("cannot bind {addr}: {e}")))?;
            listener
                .set_nonblocking(true)
                .map_err(|e| FedError::Transport(e.to_string()))?;
            let actual = listener
                .local_addr()
                .map_err(|e| FedError::Transport(e.to_string()))?;
            Ok(Listener {
                inner: ListenerInner::Tcp { listener },
                endpoint: Endpoint::tcp(actual.to_string()),
                closed: AtomicBool::new(false),
            })
        }
    }
}

/// Dials a listener.
pub fn connect(endpoint: &Endpoint) -> Result<Connection> {
    match endpoint {
        Endpoint::InProcess { key } => {
            let table = in_proc_table().lock().expect("in-proc table lock");
            let accept_tx = table.get(key).ok_or_else(|| {
                FedError::Transport(format!("no listener at in-process key {key:?}"))
            })?;
            let (dialer, accepted) = in_proc_pair(key);
            accept_tx
                .send(accepted)
                .map_err(|_| FedError::Transport(format!("listener at {key:?} closed")))?;
            Ok(dialer)
        }
        Endpoint::Tcp { addr } => {
            let stream = TcpStream::connect(addr)
                .map_err(|e| FedError::Transport(format!("cannot connect to {addr}: {e}")))?;
            tcp_connection(stream, format!("tcp:{addr}"))
        }
    }
}
