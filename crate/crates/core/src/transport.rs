//! Topic-based publish-subscribe over stream sockets, plus UDP node
//! discovery beacons.
//!
//! Wire frame (little-endian): magic `52 4D 53 47` ("RMSG"), version u8,
//! topic_len u16, topic bytes (UTF-8), seq u64, timestamp_ns u64,
//! payload_len u32, payload. A subscriber opens its connection with one
//! frame on the reserved topic `=subscribe` whose payload is
//! newline-separated topic names.
//!
//! Delivery is at-most-once with per-topic FIFO. Each subscriber has a
//! bounded send queue; overflow drops the oldest frame for that
//! subscriber.

use std::collections::HashMap;
use std::io::{BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

pub const FRAME_MAGIC: [u8; 4] = [0x52, 0x4D, 0x53, 0x47];
pub const FRAME_VERSION: u8 = 1;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
pub const SUBSCRIBE_TOPIC: &str = "=subscribe";
pub const SUBSCRIBER_QUEUE: usize = 256;
pub const BEACON_PERIOD: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageEnvelope {
    pub topic: String,
    pub seq: u64,
    pub timestamp_ns: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("frame too large: {0} bytes (cap {MAX_PAYLOAD})")]
    FrameTooLarge(usize),
    #[error("publisher not bound")]
    NotBound,
    #[error("connect failure: {0}")]
    ConnectFailure(String),
    #[error("corrupt frame: {0}")]
    CorruptFrame(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn encode_frame(env: &MessageEnvelope) -> Result<Vec<u8>, TransportError> {
    if env.payload.len() > MAX_PAYLOAD {
        return Err(TransportError::FrameTooLarge(env.payload.len()));
    }
    let topic = env.topic.as_bytes();
    let mut buf = Vec::with_capacity(4 + 1 + 2 + topic.len() + 8 + 8 + 4 + env.payload.len());
    buf.extend_from_slice(&FRAME_MAGIC);
    buf.push(FRAME_VERSION);
    buf.extend_from_slice(&(topic.len() as u16).to_le_bytes());
    buf.extend_from_slice(topic);
    buf.extend_from_slice(&env.seq.to_le_bytes());
    buf.extend_from_slice(&env.timestamp_ns.to_le_bytes());
    buf.extend_from_slice(&(env.payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(&env.payload);
    Ok(buf)
}

pub fn read_frame(reader: &mut impl Read) -> Result<MessageEnvelope, TransportError> {
    let mut head = [0u8; 7];
    reader.read_exact(&mut head)?;
    if head[0..4] != FRAME_MAGIC {
        return Err(TransportError::CorruptFrame(format!("bad magic {:02x?}", &head[0..4])));
    }
    if head[4] != FRAME_VERSION {
        return Err(TransportError::CorruptFrame(format!("bad version {}", head[4])));
    }
    let topic_len = u16::from_le_bytes([head[5], head[6]]) as usize;
    let mut topic = vec![0u8; topic_len];
    reader.read_exact(&mut topic)?;
    let topic = String::from_utf8(topic)
        .map_err(|e| TransportError::CorruptFrame(format!("topic not utf8: {e}")))?;
    let mut tail = [0u8; 20];
    reader.read_exact(&mut tail)?;
    let seq = u64::from_le_bytes(tail[0..8].try_into().unwrap());
    let timestamp_ns = u64::from_le_bytes(tail[8..16].try_into().unwrap());
    let payload_len = u32::from_le_bytes(tail[16..20].try_into().unwrap()) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(TransportError::CorruptFrame(format!("payload {payload_len} over cap")));
    }
    let mut payload = vec![0u8; payload_len];
    reader.read_exact(&mut payload)?;
    Ok(MessageEnvelope { topic, seq, timestamp_ns, payload })
}

struct SubscriberSlot {
    topics: Vec<String>,
    tx: SyncSender<Vec<u8>>,
}

/// Accepts subscribers and fans frames out to them. One IO writer thread
/// per subscriber connection.
/// Binds with SO_REUSEADDR so a restarted publisher can reclaim its
/// fixed port while connections from its previous life sit in TIME_WAIT
/// (supervised sensor processes restart on the same endpoint).
fn bind_reuseaddr(addr: &str) -> std::io::Result<TcpListener> {
    use std::net::ToSocketAddrs;
    use std::os::fd::FromRawFd;

    let sockaddr = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "no address"))?;
    let std::net::SocketAddr::V4(v4) = sockaddr else {
        return TcpListener::bind(addr); // v6: no restart-on-fixed-port use case
    };
    unsafe {
        let fd = libc::socket(libc::AF_INET, libc::SOCK_STREAM | libc::SOCK_CLOEXEC, 0);
        if fd < 0 {
            return Err(std::io::Error::last_os_error());
        }
        let one: libc::c_int = 1;
        libc::setsockopt(
            fd,
            libc::SOL_SOCKET,
            libc::SO_REUSEADDR,
            &one as *const _ as *const libc::c_void,
            std::mem::size_of::<libc::c_int>() as libc::socklen_t,
        );
        let sin = libc::sockaddr_in {
            sin_family: libc::AF_INET as libc::sa_family_t,
            sin_port: v4.port().to_be(),
            sin_addr: libc::in_addr { s_addr: u32::from_ne_bytes(v4.ip().octets()) },
            sin_zero: [0; 8],
        };
        if libc::bind(
            fd,
            &sin as *const _ as *const libc::sockaddr,
            std::mem::size_of::<libc::sockaddr_in>() as libc::socklen_t,
        ) < 0
            || libc::listen(fd, 128) < 0
        {
            let err = std::io::Error::last_os_error();
            libc::close(fd);
            return Err(err);
        }
        Ok(TcpListener::from_raw_fd(fd))
    }
}

pub struct Publisher {
    local_addr: SocketAddr,
    inner: Arc<PublisherInner>,
    _accept: std::thread::JoinHandle<()>,
}

struct PublisherInner {
    subscribers: Mutex<Vec<SubscriberSlot>>,
    seqs: Mutex<HashMap<String, u64>>,
    drops: AtomicU64,
    shutdown: AtomicBool,
}

impl Publisher {
    pub fn bind(addr: &str) -> Result<Self, TransportError> {
        let listener = bind_reuseaddr(addr)?;
        let local_addr = listener.local_addr()?;
        let inner = Arc::new(PublisherInner {
            subscribers: Mutex::new(Vec::new()),
            seqs: Mutex::new(HashMap::new()),
            drops: AtomicU64::new(0),
            shutdown: AtomicBool::new(false),
        });
        let accept_inner = inner.clone();
        let accept = std::thread::Builder::new()
            .name("pub-accept".into())
            .spawn(move || accept_loop(listener, accept_inner))
            .expect("spawn accept thread");
        Ok(Self { local_addr, inner, _accept: accept })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Frames dropped due to subscriber queue overflow.
    pub fn drop_count(&self) -> u64 {
        self.inner.drops.load(Ordering::Relaxed)
    }

    pub fn subscriber_count(&self) -> usize {
        self.inner.subscribers.lock().unwrap().len()
    }

    /// Publishes one payload on a topic; per-topic seq assigned here.
    pub fn publish(&self, topic: &str, timestamp_ns: u64, payload: &[u8]) -> Result<u64, TransportError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(TransportError::FrameTooLarge(payload.len()));
        }
        let seq = {
            let mut seqs = self.inner.seqs.lock().unwrap();
            let s = seqs.entry(topic.to_owned()).or_insert(0);
            *s += 1;
            *s
        };
        let frame = encode_frame(&MessageEnvelope {
            topic: topic.to_owned(),
            seq,
            timestamp_ns,
            payload: payload.to_vec(),
        })?;
        let mut subs = self.inner.subscribers.lock().unwrap();
        subs.retain(|slot| {
            if !slot.topics.iter().any(|t| t == topic) {
                return true;
            }
            match slot.tx.try_send(frame.clone()) {
                Ok(()) => true,
                Err(TrySendError::Full(_)) => {
                    // Sensor streams prefer freshness; drop and count.
                    self.inner.drops.fetch_add(1, Ordering::Relaxed);
                    true
                }
                Err(TrySendError::Disconnected(_)) => false,
            }
        });
        Ok(seq)
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        // Dropping the senders ends each subscriber's writer loop, which
        // closes its connection.
        self.inner.subscribers.lock().unwrap().clear();
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.local_addr);
    }
}

fn accept_loop(listener: TcpListener, inner: Arc<PublisherInner>) {
    for stream in listener.incoming() {
        if inner.shutdown.load(Ordering::SeqCst) {
            return;
        }
        let Ok(stream) = stream else { continue };
        let inner = inner.clone();
        std::thread::Builder::new()
            .name("pub-sub-io".into())
            .spawn(move || {
                let _ = serve_subscriber(stream, inner);
            })
            .expect("spawn subscriber io thread");
    }
}

fn serve_subscriber(stream: TcpStream, inner: Arc<PublisherInner>) -> Result<(), TransportError> {
    stream.set_nodelay(true).ok();
    let mut reader = BufReader::new(stream.try_clone()?);
    let handshake = read_frame(&mut reader)?;
    if handshake.topic != SUBSCRIBE_TOPIC {
        return Err(TransportError::CorruptFrame("missing subscribe handshake".into()));
    }
    let topics: Vec<String> = String::from_utf8_lossy(&handshake.payload)
        .lines()
        .map(str::to_owned)
        .filter(|t| !t.is_empty())
        .collect();
    let (tx, rx) = std::sync::mpsc::sync_channel::<Vec<u8>>(SUBSCRIBER_QUEUE);
    inner.subscribers.lock().unwrap().push(SubscriberSlot { topics, tx });
    let mut stream = stream;
    // Writer: forward queued frames until the subscriber hangs up.
    while let Ok(frame) = rx.recv() {
        if stream.write_all(&frame).is_err() {
            break;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubscriberItem {
    Frame(MessageEnvelope),
    /// Publisher connection lost; the stream ends after this.
    Disconnected,
}

/// Connects to a publisher and yields frames for the requested topics.
pub struct Subscription {
    rx: Receiver<SubscriberItem>,
    corrupt: Arc<AtomicU64>,
}

impl Subscription {
    pub fn recv_timeout(&self, timeout: Duration) -> Option<SubscriberItem> {
        self.rx.recv_timeout(timeout).ok()
    }

    pub fn try_recv(&self) -> Option<SubscriberItem> {
        self.rx.try_recv().ok()
    }

    pub fn corrupt_count(&self) -> u64 {
        self.corrupt.load(Ordering::Relaxed)
    }

    pub fn iter(&self) -> impl Iterator<Item = SubscriberItem> + '_ {
        self.rx.iter()
    }
}

pub fn subscribe(addr: &str, topics: &[&str]) -> Result<Subscription, TransportError> {
    let stream = TcpStream::connect_timeout(
        &addr
            .parse()
            .map_err(|e| TransportError::ConnectFailure(format!("bad addr {addr}: {e}")))?,
        Duration::from_secs(2),
    )
    .map_err(|e| TransportError::ConnectFailure(format!("{addr}: {e}")))?;
    stream.set_nodelay(true).ok();
    let handshake = encode_frame(&MessageEnvelope {
        topic: SUBSCRIBE_TOPIC.to_owned(),
        seq: 0,
        timestamp_ns: 0,
        payload: topics.join("\n").into_bytes(),
    })?;
    let mut write_half = stream.try_clone()?;
    write_half.write_all(&handshake)?;

    let (tx, rx) = std::sync::mpsc::sync_channel(SUBSCRIBER_QUEUE * 4);
    let corrupt = Arc::new(AtomicU64::new(0));
    let corrupt_clone = corrupt.clone();
    std::thread::Builder::new()
        .name("sub-io".into())
        .spawn(move || {
            let mut reader = BufReader::new(stream);
            loop {
                match read_frame(&mut reader) {
                    Ok(env) => {
                        if tx.send(SubscriberItem::Frame(env)).is_err() {
                            return;
                        }
                    }
                    Err(TransportError::CorruptFrame(_)) => {
                        // Stream framing is lost after a corrupt header;
                        // count it and resynchronize by disconnecting.
                        corrupt_clone.fetch_add(1, Ordering::Relaxed);
                        let _ = tx.send(SubscriberItem::Disconnected);
                        return;
                    }
                    Err(_) => {
                        let _ = tx.send(SubscriberItem::Disconnected);
                        return;
                    }
                }
            }
        })
        .expect("spawn subscriber thread");
    Ok(Subscription { rx, corrupt })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Beacon {
    pub node_name: String,
    pub endpoint: String,
    pub topics: Vec<String>,
}

impl Beacon {
    pub fn to_datagram(&self) -> Vec<u8> {
        format!(
            "RAPIDBEACON 1 {} {} {}",
            self.node_name,
            self.endpoint,
            self.topics.join(",")
        )
        .into_bytes()
    }

    pub fn parse(datagram: &[u8]) -> Option<Beacon> {
        let text = std::str::from_utf8(datagram).ok()?;
        let mut parts = text.split_whitespace();
        if parts.next()? != "RAPIDBEACON" || parts.next()? != "1" {
            return None;
        }
        Some(Beacon {
            node_name: parts.next()?.to_owned(),
            endpoint: parts.next()?.to_owned(),
            topics: parts
                .next()
                .map(|t| t.split(',').filter(|s| !s.is_empty()).map(str::to_owned).collect())
                .unwrap_or_default(),
        })
    }
}

/// Periodically announces a node to `target` (a UDP address, typically a
/// broadcast or loopback port) until the returned shutdown flag is set.
pub fn announce(
    beacon: Beacon,
    target: String,
) -> Result<(Arc<AtomicBool>, std::thread::JoinHandle<()>), TransportError> {
    let socket = UdpSocket::bind("0.0.0.0:0")?;
    socket.set_broadcast(true).ok();
    let stop = Arc::new(AtomicBool::new(false));
    let stop_clone = stop.clone();
    let handle = std::thread::Builder::new()
        .name("beacon".into())
        .spawn(move || {
            let datagram = beacon.to_datagram();
            while !stop_clone.load(Ordering::SeqCst) {
                let _ = socket.send_to(&datagram, &target);
                std::thread::sleep(BEACON_PERIOD);
            }
        })
        .expect("spawn beacon thread");
    Ok((stop, handle))
}

#[derive(Debug, Default)]
pub struct DiscoveryResult {
    pub nodes: Vec<Beacon>,
    pub warnings: Vec<String>,
}

/// Listens on a UDP port for `window` and returns the deduplicated set of
/// nodes heard. Two nodes announcing the same name from different
/// endpoints produce a DuplicateName warning.
pub fn discover(listen_addr: &str, window: Duration) -> Result<DiscoveryResult, TransportError> {
    let socket = UdpSocket::bind(listen_addr)?;
    socket.set_read_timeout(Some(Duration::from_millis(100)))?;
    let deadline = Instant::now() + window;
    let mut result = DiscoveryResult::default();
    let mut buf = [0u8; 2048];
    while Instant::now() < deadline {
        match socket.recv_from(&mut buf) {
            Ok((n, _)) => {
                if let Some(beacon) = Beacon::parse(&buf[..n]) {
                    match result.nodes.iter().find(|b| b.node_name == beacon.node_name) {
                        None => result.nodes.push(beacon),
                        Some(existing) if existing.endpoint == beacon.endpoint => {}
                        Some(existing) => {
                            let warning = format!(
                                "DuplicateName: {} announced from both {} and {}",
                                beacon.node_name, existing.endpoint, beacon.endpoint
                            );
                            if !result.warnings.contains(&warning) {
                                result.warnings.push(warning);
                            }
                        }
                    }
                }
            }
            Err(ref e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(result)
}
