//! Framed two-party channels over in-process pipes or loopback TCP.
//!
//! Wire frame: 4-byte big-endian payload length, 1-byte message type, payload.
//! Each endpoint counts its own traffic; a round is a send followed by a
//! receive on the same endpoint, and [`Endpoint::exchange`] (simultaneous
//! send and receive) is one round.

use std::future::Future;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::error::{Error, Result};

pub const FRAME_HEADER_BYTES: usize = 5;
pub const MAX_FRAME_PAYLOAD: usize = 1 << 31;
const DUPLEX_CAPACITY: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    ShareUpload = 1,
    TripleBlock = 2,
    AndOpen = 3,
    OpenIndex = 4,
    Result = 5,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Self::ShareUpload,
            2 => Self::TripleBlock,
            3 => Self::AndOpen,
            4 => Self::OpenIndex,
            5 => Self::Result,
            _ => return Err(Error::Protocol(format!("unknown message type {v}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub bandwidth_bps: f64,
    pub rtt: f64,
}

impl Default for NetConfig {
    /// 1 Gbit/s, 1 ms round trip.
    fn default() -> Self {
        Self {
            bandwidth_bps: 1e9,
            rtt: 1e-3,
        }
    }
}

impl NetConfig {
    pub fn new(bandwidth_bps: f64, rtt: f64) -> Result<Self> {
        let c = Self { bandwidth_bps, rtt };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) || !(self.rtt > 0.0 && self.rtt.is_finite()) {
            return Err(Error::Config("bandwidth and round-trip time must be positive".into()));
        }
        Ok(())
    }
}

/// Traffic counters for one endpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EndpointStats {
    pub rounds: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
}

impl EndpointStats {
    pub fn since(&self, earlier: &EndpointStats) -> EndpointStats {
        EndpointStats {
            rounds: self.rounds - earlier.rounds,
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            bytes_received: self.bytes_received - earlier.bytes_received,
            frames_sent: self.frames_sent - earlier.frames_sent,
            frames_received: self.frames_received - earlier.frames_received,
        }
    }
}

/// Counters for a two-party session.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ChannelStats {
    pub rounds: u64,
    pub bytes_sent: [u64; 2],
    pub wall_time: f64,
}

impl ChannelStats {
    pub fn from_endpoints(a: &EndpointStats, b: &EndpointStats, wall_time: Duration) -> Self {
        Self {
            rounds: a.rounds.max(b.rounds),
            bytes_sent: [a.bytes_sent, b.bytes_sent],
            wall_time: wall_time.as_secs_f64(),
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_sent[0] + self.bytes_sent[1]
    }

    pub fn add(&mut self, other: &ChannelStats) {
        self.rounds += other.rounds;
        self.bytes_sent[0] += other.bytes_sent[0];
        self.bytes_sent[1] += other.bytes_sent[1];
        self.wall_time += other.wall_time;
    }
}

/// `rounds·rtt + total_bytes·8/bandwidth`
pub fn simulated_time(stats: &ChannelStats, config: &NetConfig) -> f64 {
    stats.rounds as f64 * config.rtt + stats.total_bytes() as f64 * 8.0 / config.bandwidth_bps
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub msg: MsgType,
    pub payload: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetMode {
    InProc,
    Socket,
}

impl NetMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(Self::InProc),
            "socket" => Ok(Self::Socket),
            _ => Err(Error::Config(format!("unknown network mode {s:?}"))),
        }
    }

    /// `VC_NET_MODE` wins over `default` when set.
    pub fn resolve(default: NetMode) -> Result<Self> {
        match std::env::var("VC_NET_MODE") {
            Ok(v) if !v.is_empty() => Self::parse(&v),
            _ => Ok(default),
        }
    }
}

type BoxRead = Box<dyn AsyncRead + Unpin + Send>;
type BoxWrite = Box<dyn AsyncWrite + Unpin + Send>;

enum Io {
    /// Socket not yet registered with a runtime.
    PendingTcp(std::net::TcpStream),
    Split(BoxRead, BoxWrite),
}

/// One side of a framed channel. Owned by exactly one party.
pub struct Endpoint {
    io: Option<Io>,
    stats: EndpointStats,
    sent_since_recv: bool,
    transcript: Option<Vec<TranscriptEntry>>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint").field("stats", &self.stats).finish()
    }
}

impl Endpoint {
    pub fn from_io<R, W>(reader: R, writer: W) -> Self
    where
        R: AsyncRead + Unpin + Send + 'static,
        W: AsyncWrite + Unpin + Send + 'static,
    {
        Self::new(Io::Split(Box::new(reader), Box::new(writer)))
    }

    fn new(io: Io) -> Self {
        Self {
            io: Some(io),
            stats: EndpointStats::default(),
            sent_since_recv: false,
            transcript: None,
        }
    }

    pub fn stats(&self) -> EndpointStats {
        self.stats
    }

    /// Starts keeping a copy of every frame sent and received.
    pub fn record_transcript(&mut self) {
        self.transcript.get_or_insert_with(Vec::new);
    }

    pub fn take_transcript(&mut self) -> Vec<TranscriptEntry> {
        self.transcript.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn halves(&mut self) -> Result<(&mut BoxRead, &mut BoxWrite)> {
        if let Some(Io::PendingTcp(_)) = self.io {
            let Some(Io::PendingTcp(std)) = self.io.take() else {
                unreachable!()
            };
            let tcp = tokio::net::TcpStream::from_std(std)?;
            let (r, w) = tcp.into_split();
            self.io = Some(Io::Split(Box::new(r), Box::new(w)));
        }
        match self.io.as_mut() {
            Some(Io::Split(r, w)) => Ok((r, w)),
            _ => Err(Error::ChannelClosed),
        }
    }

    fn encode(msg: MsgType, payload: &[u8]) -> Result<Vec<u8>> {
        if payload.len() >= MAX_FRAME_PAYLOAD {
            return Err(Error::FrameTooLarge(payload.len()));
        }
        let mut frame = Vec::with_capacity(FRAME_HEADER_BYTES + payload.len());
        frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        frame.push(msg as u8);
        frame.extend_from_slice(payload);
        Ok(frame)
    }

    async fn write_frame(w: &mut BoxWrite, frame: &[u8]) -> Result<()> {
        w.write_all(frame).await.map_err(closed)?;
        w.flush().await.map_err(closed)?;
        Ok(())
    }

    async fn read_frame(r: &mut BoxRead) -> Result<(MsgType, Vec<u8>)> {
        let mut header = [0u8; FRAME_HEADER_BYTES];
        r.read_exact(&mut header).await.map_err(closed)?;
        let len = u32::from_be_bytes(header[..4].try_into().expect("4 bytes")) as usize;
        if len >= MAX_FRAME_PAYLOAD {
            return Err(Error::FrameTooLarge(len));
        }
        let msg = MsgType::from_u8(header[4])?;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload).await.map_err(closed)?;
        Ok((msg, payload))
    }

    fn note_sent(&mut self, msg: MsgType, payload: &[u8]) {
        self.stats.bytes_sent += (FRAME_HEADER_BYTES + payload.len()) as u64;
        self.stats.frames_sent += 1;
        if let Some(t) = self.transcript.as_mut() {
            t.push(TranscriptEntry {
                direction: Direction::Sent,
                msg,
                payload: payload.to_vec(),
            });
        }
    }

    fn note_received(&mut self, msg: MsgType, payload: &[u8]) {
        self.stats.bytes_received += (FRAME_HEADER_BYTES + payload.len()) as u64;
        self.stats.frames_received += 1;
        if let Some(t) = self.transcript.as_mut() {
            t.push(TranscriptEntry {
                direction: Direction::Received,
                msg,
                payload: payload.to_vec(),
            });
        }
    }

    pub async fn send(&mut self, msg: MsgType, payload: &[u8]) -> Result<()> {
        let frame = Self::encode(msg, payload)?;
        let (_, w) = self.halves()?;
        Self::write_frame(w, &frame).await?;
        self.note_sent(msg, payload);
        self.sent_since_recv = true;
        Ok(())
    }

    pub async fn recv(&mut self) -> Result<(MsgType, Vec<u8>)> {
        let (r, _) = self.halves()?;
        let (msg, payload) = Self::read_frame(r).await?;
        self.note_received(msg, &payload);
        if self.sent_since_recv {
            self.stats.rounds += 1;
            self.sent_since_recv = false;
        }
        Ok((msg, payload))
    }

    /// Receives a frame and checks its type.
    pub async fn recv_expect(&mut self, expected: MsgType) -> Result<Vec<u8>> {
        let (msg, payload) = self.recv().await?;
        if msg != expected {
            return Err(Error::Protocol(format!("expected {expected:?}, got {msg:?}")));
        }
        Ok(payload)
    }

    /// Sends and receives concurrently so that two parties exchanging large
    /// frames cannot block each other. Counts one round.
    pub async fn exchange(&mut self, msg: MsgType, payload: &[u8]) -> Result<Vec<u8>> {
        let frame = Self::encode(msg, payload)?;
        let (r, w) = self.halves()?;
        let (sent, received) = tokio::join!(Self::write_frame(w, &frame), Self::read_frame(r));
        sent?;
        let (got, reply) = received?;
        self.note_sent(msg, payload);
        self.note_received(got, &reply);
        self.stats.rounds += 1;
        self.sent_since_recv = false;
        if got != msg {
            return Err(Error::Protocol(format!("expected {msg:?}, got {got:?}")));
        }
        Ok(reply)
    }
}

fn closed(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof
        | std::io::ErrorKind::BrokenPipe
        | std::io::ErrorKind::ConnectionReset
        | std::io::ErrorKind::ConnectionAborted => Error::ChannelClosed,
        _ => Error::Io(e),
    }
}

/// A connected pair of endpoints with zeroed counters.
pub fn connect_pair(mode: NetMode) -> Result<(Endpoint, Endpoint)> {
    match mode {
        NetMode::InProc => {
            let (a, b) = tokio::io::duplex(DUPLEX_CAPACITY);
            let (ar, aw) = tokio::io::split(a);
            let (br, bw) = tokio::io::split(b);
            Ok((Endpoint::from_io(ar, aw), Endpoint::from_io(br, bw)))
        }
        NetMode::Socket => {
            let listener = std::net::TcpListener::bind(("127.0.0.1", 0))?;
            let addr = listener.local_addr()?;
            let a = std::net::TcpStream::connect(addr)?;
            let (b, _) = listener.accept()?;
            for s in [&a, &b] {
                s.set_nodelay(true)?;
                s.set_nonblocking(true)?;
            }
            Ok((Endpoint::new(Io::PendingTcp(a)), Endpoint::new(Io::PendingTcp(b))))
        }
    }
}

/// How concurrently-running roles are scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    /// All roles on one thread, interleaved at await points.
    Interleaved,
    /// One OS thread (and runtime) per role.
    Threaded,
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_current_thread().enable_all().build()?)
}

/// Drives one future to completion on a fresh single-threaded runtime.
pub fn block_on<F: Future>(f: F) -> Result<F::Output> {
    Ok(runtime()?.block_on(f))
}

fn join_thread<T>(h: std::thread::JoinHandle<Result<T>>) -> Result<T> {
    h.join()
        .map_err(|_| Error::Protocol("party thread panicked".into()))?
}

/// Runs two roles to completion under `exec`.
pub fn run_two<A, B>(exec: Exec, a: A, b: B) -> Result<(A::Output, B::Output)>
where
    A: Future + Send + 'static,
    B: Future + Send + 'static,
    A::Output: Send + 'static,
    B::Output: Send + 'static,
{
    match exec {
        Exec::Interleaved => block_on(async { tokio::join!(a, b) }),
        Exec::Threaded => {
            let ha = std::thread::spawn(move || block_on(a));
            let hb = std::thread::spawn(move || block_on(b));
            let ra = join_thread(ha);
            let rb = join_thread(hb);
            Ok((ra?, rb?))
        }
    }
}

/// Runs a homogeneous set of roles to completion under `exec`; outputs keep
/// the input order.
pub fn run_all<F>(exec: Exec, roles: Vec<F>) -> Result<Vec<F::Output>>
where
    F: Future + Send + 'static,
    F::Output: Send + 'static,
{
    match exec {
        Exec::Interleaved => block_on(futures_join_all(roles)),
        Exec::Threaded => {
            let handles: Vec<_> = roles.into_iter().map(|f| std::thread::spawn(move || block_on(f))).collect();
            handles.into_iter().map(join_thread).collect()
        }
    }
}

async fn futures_join_all<F>(roles: Vec<F>) -> Vec<F::Output>
where
    F: Future + 'static,
    F::Output: 'static,
{
    let local = tokio::task::LocalSet::new();
    local
        .run_until(async move {
            let handles: Vec<_> = roles
                .into_iter()
                .map(|f| tokio::task::spawn_local(f))
                .collect();
            let mut out = Vec::with_capacity(handles.len());
            for h in handles {
                out.push(h.await.expect("role task panicked"));
            }
            out
        })
        .await
}

/// Wall-clock timer used by the protocol layers.
pub struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Self(Instant::now())
    }

    pub fn elapsed(&self) -> Duration {
        self.0.elapsed()
    }
}
