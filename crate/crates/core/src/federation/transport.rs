//! Server and client endpoints. Every transport carries the same encoded
//! frames; the in-process queue exists so tests and single-host runs skip the
//! socket layer.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{read_frame, write_frame, RoundMessage};
use super::{FederationError, Result};

/// What the server's single collector sees.
#[derive(Debug)]
pub enum LinkEvent {
    Frame { client_id: u32, frame: Vec<u8> },
    Closed { client_id: u32, reason: String },
}

pub trait ServerTransport {
    /// Connected client ids in ascending order.
    fn client_ids(&self) -> Vec<u32>;
    fn send(&mut self, client_id: u32, frame: &[u8]) -> Result<()>;
    /// `Ok(None)` when nothing arrived within `timeout`.
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<LinkEvent>>;
}

pub trait ClientTransport {
    fn client_id(&self) -> u32;
    fn send(&mut self, frame: &[u8]) -> Result<()>;
    /// `Ok(None)` when the server went away.
    fn recv(&mut self) -> Result<Option<Vec<u8>>>;
}

pub struct InProcessServer {
    links: BTreeMap<u32, Sender<Vec<u8>>>,
    events: Receiver<LinkEvent>,
}

pub struct InProcessClient {
    client_id: u32,
    inbox: Receiver<Vec<u8>>,
    events: Sender<LinkEvent>,
}

/// One server endpoint wired to a client endpoint per id.
pub fn in_process(client_ids: &[u32]) -> (InProcessServer, Vec<InProcessClient>) {
    let (event_tx, event_rx) = mpsc::channel();
    let mut links = BTreeMap::new();
    let mut clients = Vec::new();
    for &client_id in client_ids {
        let (tx, rx) = mpsc::channel();
        links.insert(client_id, tx);
        clients.push(InProcessClient { client_id, inbox: rx, events: event_tx.clone() });
    }
    (InProcessServer { links, events: event_rx }, clients)
}

impl ServerTransport for InProcessServer {
    fn client_ids(&self) -> Vec<u32> {
        self.links.keys().copied().collect()
    }

    fn send(&mut self, client_id: u32, frame: &[u8]) -> Result<()> {
        let link = self.links.get(&client_id).ok_or_else(|| FederationError::Transport(format!("unknown client {client_id}")))?;
        link.send(frame.to_vec()).map_err(|_| FederationError::Transport(format!("client {client_id} disconnected")))
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<LinkEvent>> {
        match self.events.recv_timeout(timeout) {
            Ok(ev) => Ok(Some(ev)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(FederationError::Transport("all clients disconnected".into())),
        }
    }
}

impl ClientTransport for InProcessClient {
    fn client_id(&self) -> u32 {
        self.client_id
    }

    fn send(&mut self, frame: &[u8]) -> Result<()> {
        self.events
            .send(LinkEvent::Frame { client_id: self.client_id, frame: frame.to_vec() })
            .map_err(|_| FederationError::Transport("server disconnected".into()))
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>> {
        Ok(self.inbox.recv().ok())
    }
}

impl Drop for InProcessClient {
    fn drop(&mut self) {
        let _ = self.events.send(LinkEvent::Closed { client_id: self.client_id, reason: "endpoint dropped".into() });
    }
}

pub struct TcpServer {
    writers: BTreeMap<u32, TcpStream>,
    events: Receiver<LinkEvent>,
    // Keeps the channel open while no reader thread is alive.
    _events_tx: Sender<LinkEvent>,
}

impl TcpServer {
    /// Accept exactly `expected` clients. Each must open with a Hello frame;
    /// duplicate ids are refused. A reader thread per connection forwards
    /// frames to the shared collector.
    pub fn accept(listener: &TcpListener, expected: usize, timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        listener.set_nonblocking(true).map_err(|e| FederationError::Transport(e.to_string()))?;
        let (tx, rx) = mpsc::channel();
        let mut writers = BTreeMap::new();
        while writers.len() < expected {
            let stream = match listener.accept() {
                Ok((stream, _)) => stream,
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(FederationError::Timeout {
                            round: 0,
                            missing: Vec::new(),
                            collected: writers.keys().copied().collect(),
                            detail: format!("{} of {expected} clients connected", writers.len()),
                        });
                    }
                    thread::sleep(Duration::from_millis(5));
                    continue;
                }
                Err(e) => return Err(FederationError::Transport(e.to_string())),
            };
            let io = |e: std::io::Error| FederationError::Transport(e.to_string());
            stream.set_nonblocking(false).map_err(io)?;
            stream.set_nodelay(true).map_err(io)?;
            stream.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1)))).map_err(io)?;
            let mut reader = BufReader::new(stream.try_clone().map_err(io)?);
            let hello = read_frame(&mut reader)?.ok_or_else(|| FederationError::Protocol { field: "msg_type", detail: "connection closed before hello".into() })?;
            let client_id = match RoundMessage::decode(&hello)? {
                RoundMessage::Hello { client_id } => client_id,
                other => return Err(FederationError::Protocol { field: "msg_type", detail: format!("expected hello, got {other:?}") }),
            };
            if writers.contains_key(&client_id) {
                return Err(FederationError::Protocol { field: "client_id", detail: format!("client {client_id} connected twice") });
            }
            stream.set_read_timeout(None).map_err(io)?;
            let events = tx.clone();
            thread::spawn(move || loop {
                match read_frame(&mut reader) {
                    Ok(Some(frame)) => {
                        if events.send(LinkEvent::Frame { client_id, frame }).is_err() {
                            break;
                        }
                    }
                    Ok(None) => {
                        let _ = events.send(LinkEvent::Closed { client_id, reason: "connection closed".into() });
                        break;
                    }
                    Err(e) => {
                        let _ = events.send(LinkEvent::Closed { client_id, reason: e.to_string() });
                        break;
                    }
                }
            });
            writers.insert(client_id, stream);
        }
        Ok(Self { writers, events: rx, _events_tx: tx })
    }
}

impl ServerTransport for TcpServer {
    fn client_ids(&self) -> Vec<u32> {
        self.writers.keys().copied().collect()
    }

    fn send(&mut self, client_id: u32, frame: &[u8]) -> Result<()> {
        let stream = self.writers.get_mut(&client_id).ok_or_else(|| FederationError::Transport(format!("unknown client {client_id}")))?;
        write_frame(stream, frame)
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<LinkEvent>> {
        match self.events.recv_timeout(timeout) {
            Ok(ev) => Ok(Some(ev)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(FederationError::Transport("collector closed".into())),
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        for stream in self.writers.values() {
            let _ = stream.shutdown(std::net::Shutdown::Both);
        }
    }
}

pub struct TcpClient {
    client_id: u32,
    stream: TcpStream,
    reader: BufReader<TcpStream>,
}

impl TcpClient {
    /// Connect, retrying until `timeout`, and introduce ourselves.
    pub fn connect(addr: SocketAddr, client_id: u32, timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        let stream = loop {
            match TcpStream::connect(addr) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    log::debug!("client {client_id}: connect to {addr} failed ({e}), retrying");
                    thread::sleep(Duration::from_millis(50));
                }
                Err(e) => return Err(FederationError::Transport(format!("connect to {addr}: {e}"))),
            }
        };
        let io = |e: std::io::Error| FederationError::Transport(e.to_string());
        stream.set_nodelay(true).map_err(io)?;
        let reader = BufReader::new(stream.try_clone().map_err(io)?);
        let mut client = Self { client_id, stream, reader };
        let hello = RoundMessage::Hello { client_id }.encode()?;
        client.send(&hello)?;
        Ok(client)
    }
}

impl ClientTransport for TcpClient {
    fn client_id(&self) -> u32 {
        self.client_id
    }

    fn send(&mut self, frame: &[u8]) -> Result<()> {
        write_frame(&mut self.stream, frame)
    }

    fn recv(&mut self) -> Result<Option<Vec<u8>>> {
        read_frame(&mut self.reader)
    }
}
