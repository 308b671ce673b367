//! Reliable FIFO-per-link message delivery.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::message::{ProtocolMessage, Role};
use crate::error::{Error, Result};

pub type Link = (Role, Role);

/// Ordered, lossless delivery between roles.
///
/// Implementations never reorder messages on one link. Receivers poll with
/// [`Transport::try_recv`]; [`Transport::idle`] is called by the scheduler
/// when no role could make progress.
pub trait Transport {
    fn send(&mut self, msg: ProtocolMessage) -> Result<()>;
    fn try_recv(&mut self, from: Role, to: Role) -> Result<Option<ProtocolMessage>>;
    /// Waits for in-flight data, or reports a stall if none can arrive.
    fn idle(&mut self) -> Result<()>;
    /// Bytes sent per link, in wire-frame size.
    fn link_bytes(&self) -> BTreeMap<Link, u64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inproc,
    Tcp,
}

impl std::str::FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(TransportKind::Inproc),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(Error::InvalidArgument(format!("unknown transport {other}"))),
        }
    }
}

pub fn make_transport(kind: TransportKind) -> Box<dyn Transport> {
    match kind {
        TransportKind::Inproc => Box::new(InProcTransport::default()),
        TransportKind::Tcp => Box::new(TcpTransport::new(Duration::from_secs(30))),
    }
}

/// Deterministic in-memory queues, one per link.
#[derive(Debug, Default)]
pub struct InProcTransport {
    queues: HashMap<Link, VecDeque<ProtocolMessage>>,
    bytes: BTreeMap<Link, u64>,
}

impl Transport for InProcTransport {
    fn send(&mut self, msg: ProtocolMessage) -> Result<()> {
        let link = (msg.from, msg.to);
        *self.bytes.entry(link).or_default() += msg.wire_len() as u64;
        self.queues.entry(link).or_default().push_back(msg);
        Ok(())
    }

    fn try_recv(&mut self, from: Role, to: Role) -> Result<Option<ProtocolMessage>> {
        Ok(self.queues.get_mut(&(from, to)).and_then(VecDeque::pop_front))
    }

    fn idle(&mut self) -> Result<()> {
        Err(Error::Protocol(
            "relay stalled: no role can progress and no message is in flight".into(),
        ))
    }

    fn link_bytes(&self) -> BTreeMap<Link, u64> {
        self.bytes.clone()
    }
}

struct TcpLink {
    writer: BufWriter<TcpStream>,
    inbox: Receiver<Result<ProtocolMessage>>,
    reader: Option<JoinHandle<()>>,
}

/// One loopback TCP connection per link, framed with
/// [`ProtocolMessage::encode_frame`]. A reader thread per link decodes
/// frames into a channel so that senders never block on a full socket.
pub struct TcpTransport {
    links: HashMap<Link, TcpLink>,
    bytes: BTreeMap<Link, u64>,
    timeout: Duration,
    idle_since: Option<Instant>,
}

impl TcpTransport {
    pub fn new(timeout: Duration) -> Self {
        Self {
            links: HashMap::new(),
            bytes: BTreeMap::new(),
            timeout,
            idle_since: None,
        }
    }

    fn link(&mut self, from: Role, to: Role) -> Result<&mut TcpLink> {
        if let std::collections::hash_map::Entry::Vacant(e) = self.links.entry((from, to)) {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            let out = TcpStream::connect(addr)?;
            let (inc, _) = listener.accept()?;
            out.set_nodelay(true)?;
            let (tx, rx) = mpsc::channel();
            let reader = std::thread::spawn(move || {
                let mut r = BufReader::new(inc);
                loop {
                    match ProtocolMessage::read_frame(&mut r, from, to) {
                        Ok(m) => {
                            if tx.send(Ok(m)).is_err() {
                                return;
                            }
                        }
                        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                            return
                        }
                        Err(e) => {
                            let _ = tx.send(Err(e));
                            return;
                        }
                    }
                }
            });
            e.insert(TcpLink {
                    writer: BufWriter::new(out),
                    inbox: rx,
                    reader: Some(reader),
                });
        }
        Ok(self.links.get_mut(&(from, to)).unwrap())
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: ProtocolMessage) -> Result<()> {
        let (from, to) = (msg.from, msg.to);
        let n = msg.wire_len() as u64;
        let link = self.link(from, to)?;
        msg.write_frame(&mut link.writer)?;
        link.writer.flush()?;
        *self.bytes.entry((from, to)).or_default() += n;
        Ok(())
    }

    fn try_recv(&mut self, from: Role, to: Role) -> Result<Option<ProtocolMessage>> {
        let Some(link) = self.links.get_mut(&(from, to)) else {
            return Ok(None);
        };
        match link.inbox.try_recv() {
            Ok(Ok(m)) => {
                self.idle_since = None;
                Ok(Some(m))
            }
            Ok(Err(e)) => Err(e),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => {
                Err(Error::Protocol(format!("link {from}->{to} closed")))
            }
        }
    }

    fn idle(&mut self) -> Result<()> {
        let since = *self.idle_since.get_or_insert_with(Instant::now);
        if since.elapsed() > self.timeout {
            return Err(Error::Protocol("tcp relay timed out waiting for frames".into()));
        }
        std::thread::sleep(Duration::from_micros(50));
        Ok(())
    }

    fn link_bytes(&self) -> BTreeMap<Link, u64> {
        self.bytes.clone()
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for (_, mut link) in self.links.drain() {
            let _ = link.writer.flush();
            let _ = link.writer.get_ref().shutdown(std::net::Shutdown::Write);
            if let Some(h) = link.reader.take() {
                let _ = h.join();
            }
        }
    }
}
