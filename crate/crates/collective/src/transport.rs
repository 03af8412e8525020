//! Point-to-point frame delivery between ranks.
//!
//! Sends never block: every link has an unbounded outbound queue, so a ring
//! step in which all ranks send before receiving cannot deadlock. Receives
//! are per-peer and bounded by a timeout.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{IpAddr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{CommError, Result};
use crate::frame::Frame;

pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn world(&self) -> usize;
    fn send(&self, to: usize, frame: Frame) -> Result<()>;
    fn recv(&self, from: usize, timeout: Duration) -> Result<Frame>;
    fn kind(&self) -> TransportKind;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    Channel,
    Tcp,
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            TransportKind::Channel => "channel",
            TransportKind::Tcp => "tcp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "channel" => Some(TransportKind::Channel),
            "tcp" => Some(TransportKind::Tcp),
            _ => None,
        }
    }
}

type Inbound = std::result::Result<Frame, String>;

/// Per-peer queues; the entry for the own rank is empty.
struct Mailbox {
    rank: usize,
    world: usize,
    out: Vec<Option<Sender<Inbound>>>,
    inbox: Vec<Option<Receiver<Inbound>>>,
}

impl Mailbox {
    fn send(&self, to: usize, frame: Frame) -> Result<()> {
        let tx = self
            .out
            .get(to)
            .and_then(|t| t.as_ref())
            .ok_or_else(|| CommError::Protocol(format!("rank {} cannot send to rank {to}", self.rank)))?;
        tx.send(Ok(frame)).map_err(|_| CommError::transport(to, "peer disconnected"))
    }

    fn recv(&self, from: usize, timeout: Duration) -> Result<Frame> {
        let rx = self
            .inbox
            .get(from)
            .and_then(|r| r.as_ref())
            .ok_or_else(|| CommError::Protocol(format!("rank {} cannot receive from rank {from}", self.rank)))?;
        match rx.recv_timeout(timeout) {
            Ok(Ok(f)) => Ok(f),
            Ok(Err(reason)) => Err(CommError::transport(from, reason)),
            Err(RecvTimeoutError::Timeout) => Err(CommError::transport(
                from,
                format!("no message within {timeout:?} (waiting on rank {})", self.rank),
            )),
            Err(RecvTimeoutError::Disconnected) => Err(CommError::transport(from, "peer disconnected")),
        }
    }
}

/// In-process transport over message channels.
pub struct ChannelTransport {
    mb: Mailbox,
}

/// A fully connected set of `world` channel transports, indexed by rank.
pub fn channel_mesh(world: usize) -> Result<Vec<ChannelTransport>> {
    if world == 0 {
        return Err(CommError::Config("world size must be at least 1".into()));
    }
    let mut out: Vec<Vec<Option<Sender<Inbound>>>> = (0..world).map(|_| vec![None; world]).collect();
    let mut inbox: Vec<Vec<Option<Receiver<Inbound>>>> = (0..world).map(|_| (0..world).map(|_| None).collect()).collect();
    for from in 0..world {
        for to in 0..world {
            if from == to {
                continue;
            }
            let (tx, rx) = channel::<Inbound>();
            out[from][to] = Some(tx);
            inbox[to][from] = Some(rx);
        }
    }
    Ok(out
        .into_iter()
        .zip(inbox)
        .enumerate()
        .map(|(rank, (out, inbox))| ChannelTransport {
            mb: Mailbox { rank, world, out, inbox },
        })
        .collect())
}

impl Transport for ChannelTransport {
    fn rank(&self) -> usize {
        self.mb.rank
    }
    fn world(&self) -> usize {
        self.mb.world
    }
    fn send(&self, to: usize, frame: Frame) -> Result<()> {
        self.mb.send(to, frame)
    }
    fn recv(&self, from: usize, timeout: Duration) -> Result<Frame> {
        self.mb.recv(from, timeout)
    }
    fn kind(&self) -> TransportKind {
        TransportKind::Channel
    }
}

/// Length-prefixed frames over one TCP connection per rank pair.
pub struct TcpTransport {
    mb: Mailbox,
}

impl Transport for TcpTransport {
    fn rank(&self) -> usize {
        self.mb.rank
    }
    fn world(&self) -> usize {
        self.mb.world
    }
    fn send(&self, to: usize, frame: Frame) -> Result<()> {
        self.mb.send(to, frame)
    }
    fn recv(&self, from: usize, timeout: Duration) -> Result<Frame> {
        self.mb.recv(from, timeout)
    }
    fn kind(&self) -> TransportKind {
        TransportKind::Tcp
    }
}

const HELLO_MAGIC: &[u8; 4] = b"BNNR";

fn io_err(rank: usize, what: &str, e: impl std::fmt::Display) -> CommError {
    CommError::transport(rank, format!("{what}: {e}"))
}

fn write_hello(s: &mut TcpStream, rank: usize, world: usize, port: u16) -> std::io::Result<()> {
    let mut b = HELLO_MAGIC.to_vec();
    b.extend_from_slice(&(rank as u32).to_le_bytes());
    b.extend_from_slice(&(world as u32).to_le_bytes());
    b.extend_from_slice(&port.to_le_bytes());
    s.write_all(&b)
}

fn read_hello(s: &mut TcpStream) -> std::io::Result<(usize, usize, u16)> {
    let mut b = [0u8; 14];
    s.read_exact(&mut b)?;
    if &b[..4] != HELLO_MAGIC {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "bad handshake magic"));
    }
    let rank = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes")) as usize;
    let world = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes")) as usize;
    let port = u16::from_le_bytes(b[12..14].try_into().expect("2 bytes"));
    Ok((rank, world, port))
}

fn connect_retry(addr: SocketAddr, deadline: Instant) -> std::io::Result<TcpStream> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn accept_before(listener: &TcpListener, deadline: Instant) -> std::io::Result<TcpStream> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                return Ok(s);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(std::io::Error::new(std::io::ErrorKind::TimedOut, "no peer connected in time"));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e),
        }
    }
}

/// Starts the reader and writer threads of one established link.
fn attach(rank: usize, peer: usize, stream: TcpStream) -> Result<(Sender<Inbound>, Receiver<Inbound>)> {
    stream.set_nodelay(true).map_err(|e| io_err(peer, "set_nodelay", e))?;
    let read_half = stream.try_clone().map_err(|e| io_err(peer, "clone stream", e))?;
    let (tx, rx) = channel::<Inbound>();
    let (itx, irx) = channel::<Inbound>();
    thread::spawn(move || {
        let mut w = BufWriter::new(stream);
        for f in rx.into_iter().flatten() {
            if f.write_to(&mut w).and_then(|_| w.flush()).is_err() {
                break;
            }
        }
        if let Ok(s) = w.into_inner() {
            let _ = s.shutdown(Shutdown::Write);
        }
    });
    thread::spawn(move || {
        let mut r = BufReader::new(read_half);
        loop {
            match Frame::read_from(&mut r) {
                Ok(Some(f)) => {
                    if itx.send(Ok(f)).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let _ = itx.send(Err(format!("link {peer}→{rank}: {e}")));
                    break;
                }
            }
        }
    });
    Ok((tx, irx))
}

impl TcpTransport {
    /// Joins a `world`-rank mesh. Rank 0 passes the listener bound at
    /// `coordinator`; other ranks connect to it, learn every peer's listening
    /// address and connect pairwise (higher rank dials lower).
    pub fn connect(
        rank: usize,
        world: usize,
        coordinator: SocketAddr,
        listener: Option<TcpListener>,
        timeout: Duration,
    ) -> Result<Self> {
        if world == 0 || rank >= world {
            return Err(CommError::Config(format!("rank {rank} outside world of {world}")));
        }
        let deadline = Instant::now() + timeout;
        let mut links: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();
        if rank == 0 {
            let listener = match listener {
                Some(l) => l,
                None => TcpListener::bind(coordinator).map_err(|e| io_err(0, "bind coordinator", e))?,
            };
            let mut table: Vec<Option<(IpAddr, u16)>> = vec![None; world];
            table[0] = Some((coordinator.ip(), listener.local_addr().map_err(|e| io_err(0, "local addr", e))?.port()));
            for _ in 1..world {
                let mut s = accept_before(&listener, deadline).map_err(|e| io_err(0, "accept worker", e))?;
                let (r, w, port) = read_hello(&mut s).map_err(|e| io_err(0, "worker handshake", e))?;
                if w != world || r == 0 || r >= world || links[r].is_some() {
                    return Err(CommError::Protocol(format!(
                        "worker handshake claims rank {r} of {w}, expected a fresh rank of {world}"
                    )));
                }
                let ip = s.peer_addr().map_err(|e| io_err(r, "peer addr", e))?.ip();
                table[r] = Some((ip, port));
                links[r] = Some(s);
            }
            let mut msg = (world as u32).to_le_bytes().to_vec();
            for (ip, port) in table.iter().map(|e| e.expect("every rank registered")) {
                let ip = ip.to_string();
                msg.push(ip.len() as u8);
                msg.extend_from_slice(ip.as_bytes());
                msg.extend_from_slice(&port.to_le_bytes());
            }
            for (r, s) in links.iter_mut().enumerate().skip(1) {
                s.as_mut().expect("connected").write_all(&msg).map_err(|e| io_err(r, "send address table", e))?;
            }
        } else {
            let own = TcpListener::bind((coordinator.ip(), 0)).map_err(|e| io_err(rank, "bind", e))?;
            let port = own.local_addr().map_err(|e| io_err(rank, "local addr", e))?.port();
            let mut s = connect_retry(coordinator, deadline).map_err(|e| io_err(0, "connect to coordinator", e))?;
            write_hello(&mut s, rank, world, port).map_err(|e| io_err(0, "handshake", e))?;
            s.set_read_timeout(Some(timeout)).map_err(|e| io_err(0, "timeout", e))?;
            let table = read_table(&mut s, world).map_err(|e| io_err(0, "address table", e))?;
            s.set_read_timeout(None).map_err(|e| io_err(0, "timeout", e))?;
            links[0] = Some(s);
            for (peer, &(ip, port)) in table.iter().enumerate().take(rank).skip(1) {
                let mut p = connect_retry(SocketAddr::new(ip, port), deadline).map_err(|e| io_err(peer, "connect", e))?;
                write_hello(&mut p, rank, world, 0).map_err(|e| io_err(peer, "handshake", e))?;
                links[peer] = Some(p);
            }
            for _ in rank + 1..world {
                let mut p = accept_before(&own, deadline).map_err(|e| io_err(rank, "accept peer", e))?;
                let (r, w, _) = read_hello(&mut p).map_err(|e| io_err(rank, "peer handshake", e))?;
                if w != world || r <= rank || r >= world || links[r].is_some() {
                    return Err(CommError::Protocol(format!("unexpected peer handshake from rank {r} of {w}")));
                }
                links[r] = Some(p);
            }
        }
        let mut out: Vec<Option<Sender<Inbound>>> = vec![None; world];
        let mut inbox: Vec<Option<Receiver<Inbound>>> = (0..world).map(|_| None).collect();
        for (peer, link) in links.into_iter().enumerate() {
            if let Some(s) = link {
                let (tx, rx) = attach(rank, peer, s)?;
                out[peer] = Some(tx);
                inbox[peer] = Some(rx);
            }
        }
        Ok(Self {
            mb: Mailbox { rank, world, out, inbox },
        })
    }
}

fn read_table(s: &mut TcpStream, world: usize) -> std::io::Result<Vec<(IpAddr, u16)>> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut n = [0u8; 4];
    s.read_exact(&mut n)?;
    if u32::from_le_bytes(n) as usize != world {
        return Err(bad("address table size differs from the world size"));
    }
    (0..world)
        .map(|_| {
            let mut len = [0u8; 1];
            s.read_exact(&mut len)?;
            let mut ip = vec![0u8; len[0] as usize];
            s.read_exact(&mut ip)?;
            let mut port = [0u8; 2];
            s.read_exact(&mut port)?;
            let ip: IpAddr = String::from_utf8(ip)
                .ok()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("unparseable address"))?;
            Ok((ip, u16::from_le_bytes(port)))
        })
        .collect()
}

/// A `world`-rank TCP mesh on the loopback interface, built in this process.
pub fn tcp_mesh_local(world: usize, timeout: Duration) -> Result<Vec<TcpTransport>> {
    if world == 0 {
        return Err(CommError::Config("world size must be at least 1".into()));
    }
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| io_err(0, "bind", e))?;
    let addr = listener.local_addr().map_err(|e| io_err(0, "local addr", e))?;
    let handles: Vec<_> = (1..world)
        .map(|r| thread::spawn(move || TcpTransport::connect(r, world, addr, None, timeout)))
        .collect();
    let mut all = vec![TcpTransport::connect(0, world, addr, Some(listener), timeout)?];
    for h in handles {
        all.push(h.join().map_err(|_| CommError::Protocol("connect thread panicked".into()))??);
    }
    Ok(all)
}
