//! Minimal TCP broker and client.
//!
//! Frames are single-line UTF-8 JSON objects terminated by `\n`:
//!
//! ```text
//! client -> server   {"op":"pub","key":K,"payload":B64}
//!                    {"op":"sub","key":K}
//! server -> client   {"op":"msg","key":K,"payload":B64}
//!                    {"op":"ok"}
//!                    {"op":"err","reason":R}
//! ```
//!
//! Every `pub` and `sub` is answered with `ok` or `err`. A connection holds
//! at most one subscription; after `ok` the server streams `msg` frames on
//! it. The server routes through a [`MemoryBroker`], so it shares the
//! in-memory broker's ordering and retention semantics.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{
    validate_routing_key, BrokerConfig, BrokerHandle, Envelope, MemoryBroker, SubQueue, Subscription,
    TransportError,
};
use crate::timebase::Duration;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Frame {
    Pub { key: String, payload: String },
    Sub { key: String },
    Msg { key: String, payload: String },
    Ok,
    Err { reason: String },
}

impl Frame {
    pub fn to_line(&self) -> Vec<u8> {
        let mut line = serde_json::to_vec(self).expect("frame serialization is infallible");
        line.push(b'\n');
        line
    }

    pub fn parse(line: &[u8]) -> Result<Frame, TransportError> {
        let trimmed = line.strip_suffix(b"\n").unwrap_or(line);
        let trimmed = trimmed.strip_suffix(b"\r").unwrap_or(trimmed);
        serde_json::from_slice(trimmed).map_err(|e| TransportError::Protocol(e.to_string()))
    }
}

/// Longest accepted line: a max-size payload after base64 plus framing.
fn line_limit(max_frame: usize) -> u64 {
    (max_frame as u64).div_ceil(3) * 4 + 4096
}

fn read_frame<R: BufRead>(reader: &mut R, limit: u64) -> Result<Option<Frame>, TransportError> {
    let mut buf = Vec::new();
    let n = reader.by_ref().take(limit).read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() != Some(&b'\n') {
        if n as u64 >= limit {
            return Err(TransportError::FrameTooLarge {
                size: n,
                max: limit as usize,
            });
        }
        // EOF in the middle of a frame.
        return Ok(None);
    }
    Frame::parse(&buf).map(Some)
}

fn decode_payload(payload: &str, max: usize) -> Result<Vec<u8>, TransportError> {
    let bytes = B64
        .decode(payload)
        .map_err(|e| TransportError::Protocol(format!("bad base64 payload: {e}")))?;
    if bytes.len() > max {
        return Err(TransportError::FrameTooLarge {
            size: bytes.len(),
            max,
        });
    }
    Ok(bytes)
}

/// A bound TCP broker. [`TcpBroker::serve`] blocks; [`TcpBroker::spawn`]
/// runs it on a background thread.
pub struct TcpBroker {
    listener: TcpListener,
    broker: MemoryBroker,
    shutdown: Arc<AtomicBool>,
}

impl TcpBroker {
    pub fn bind(addr: impl ToSocketAddrs, config: BrokerConfig) -> std::io::Result<TcpBroker> {
        let listener = TcpListener::bind(addr)?;
        Ok(TcpBroker {
            listener,
            broker: MemoryBroker::new(config),
            shutdown: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until shut down.
    pub fn serve(self) -> std::io::Result<()> {
        self.listener.set_nonblocking(true)?;
        // Each worker with a handle on its socket, to unblock its reads on
        // shutdown.
        let mut workers: Vec<(JoinHandle<()>, TcpStream)> = Vec::new();
        while !self.shutdown.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    debug!("tcp broker: connection from {peer}");
                    stream.set_nonblocking(false)?;
                    let handle = stream.try_clone()?;
                    let broker = self.broker.clone();
                    let shutdown = Arc::clone(&self.shutdown);
                    let worker = thread::spawn(move || {
                        if let Err(e) = serve_connection(stream, broker, shutdown) {
                            debug!("tcp broker: connection {peer} ended: {e}");
                        }
                    });
                    workers.push((worker, handle));
                    workers.retain(|(w, _)| !w.is_finished());
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(std::time::Duration::from_millis(2));
                }
                Err(e) => return Err(e),
            }
        }
        self.broker.close();
        for (w, stream) in workers {
            let _ = stream.shutdown(Shutdown::Both);
            let _ = w.join();
        }
        Ok(())
    }

    pub fn spawn(self) -> std::io::Result<TcpBrokerHandle> {
        let addr = self.local_addr()?;
        let shutdown = Arc::clone(&self.shutdown);
        let thread = thread::spawn(move || {
            if let Err(e) = self.serve() {
                warn!("tcp broker stopped: {e}");
            }
        });
        Ok(TcpBrokerHandle {
            addr,
            shutdown,
            thread: Some(thread),
        })
    }
}

/// Background TCP broker; shuts down on drop.
pub struct TcpBrokerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl TcpBrokerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for TcpBrokerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn send(writer: &Mutex<TcpStream>, frame: &Frame) -> std::io::Result<()> {
    let mut w = writer.lock().unwrap_or_else(|e| e.into_inner());
    w.write_all(&frame.to_line())?;
    w.flush()
}

fn serve_connection(
    stream: TcpStream,
    broker: MemoryBroker,
    shutdown: Arc<AtomicBool>,
) -> Result<(), TransportError> {
    let config = broker.config();
    let limit = line_limit(config.max_frame);
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut reader = BufReader::new(stream.try_clone()?);
    let conn_done = Arc::new(AtomicBool::new(false));
    let mut forwarder: Option<JoinHandle<()>> = None;

    let result = loop {
        let frame = match read_frame(&mut reader, limit) {
            Ok(Some(f)) => f,
            Ok(None) => break Ok(()),
            Err(e) => {
                let _ = send(&writer, &Frame::Err { reason: e.to_string() });
                break Err(e);
            }
        };
        let reply = match frame {
            Frame::Pub { key, payload } => decode_payload(&payload, config.max_frame)
                .and_then(|bytes| Envelope::new(key, bytes))
                .and_then(|env| broker.publish(env)),
            Frame::Sub { key } if forwarder.is_none() => match broker.subscribe_local(&key) {
                Ok(mut sub) => {
                    send(&writer, &Frame::Ok)?;
                    let writer = Arc::clone(&writer);
                    let done = Arc::clone(&conn_done);
                    let shutdown = Arc::clone(&shutdown);
                    forwarder = Some(thread::spawn(move || loop {
                        if done.load(Ordering::SeqCst) || shutdown.load(Ordering::SeqCst) {
                            break;
                        }
                        match sub.poll(256, Duration::from_millis(50)) {
                            Ok(batch) => {
                                for env in batch {
                                    let frame = Frame::Msg {
                                        key: env.routing_key().to_string(),
                                        payload: B64.encode(&env.payload),
                                    };
                                    if send(&writer, &frame).is_err() {
                                        return;
                                    }
                                }
                            }
                            Err(_) => return,
                        }
                    }));
                    continue;
                }
                Err(e) => Err(e),
            },
            Frame::Sub { .. } => Err(TransportError::Protocol(
                "only one subscription per connection".into(),
            )),
            other => Err(TransportError::Protocol(format!(
                "unexpected frame from client: {other:?}"
            ))),
        };
        let frame = match reply {
            Ok(()) => Frame::Ok,
            Err(e) => Frame::Err { reason: e.to_string() },
        };
        send(&writer, &frame)?;
    };
    conn_done.store(true, Ordering::SeqCst);
    let _ = reader.get_ref().shutdown(Shutdown::Both);
    if let Some(f) = forwarder {
        let _ = f.join();
    }
    result
}

struct PubConn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Client connection to a [`TcpBroker`].
pub struct TcpBrokerClient {
    addr: SocketAddr,
    config: BrokerConfig,
    conn: Mutex<Option<PubConn>>,
    closed: AtomicBool,
}

impl TcpBrokerClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<TcpBrokerClient, TransportError> {
        TcpBrokerClient::connect_with(addr, BrokerConfig::default())
    }

    pub fn connect_with(
        addr: impl ToSocketAddrs,
        config: BrokerConfig,
    ) -> Result<TcpBrokerClient, TransportError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let addr = stream.peer_addr()?;
        let conn = PubConn {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        };
        Ok(TcpBrokerClient {
            addr,
            config,
            conn: Mutex::new(Some(conn)),
            closed: AtomicBool::new(false),
        })
    }
}

fn expect_ok<R: BufRead>(reader: &mut R, limit: u64) -> Result<(), TransportError> {
    match read_frame(reader, limit)? {
        Some(Frame::Ok) => Ok(()),
        Some(Frame::Err { reason }) => Err(TransportError::Remote(reason)),
        Some(other) => Err(TransportError::Protocol(format!(
            "expected ok, got {other:?}"
        ))),
        None => Err(TransportError::Closed),
    }
}

impl BrokerHandle for TcpBrokerClient {
    fn publish(&self, env: Envelope) -> Result<(), TransportError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(TransportError::Closed);
        }
        if env.payload.len() > self.config.max_frame {
            return Err(TransportError::FrameTooLarge {
                size: env.payload.len(),
                max: self.config.max_frame,
            });
        }
        let frame = Frame::Pub {
            key: env.routing_key().to_string(),
            payload: B64.encode(&env.payload),
        };
        let mut guard = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        let conn = guard.as_mut().ok_or(TransportError::Closed)?;
        conn.writer.write_all(&frame.to_line())?;
        conn.writer.flush()?;
        expect_ok(&mut conn.reader, line_limit(self.config.max_frame))
    }

    fn subscribe(&self, routing_key: &str) -> Result<Box<dyn Subscription>, TransportError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(TransportError::Closed);
        }
        validate_routing_key(routing_key)?;
        let limit = line_limit(self.config.max_frame);
        let mut stream = TcpStream::connect(self.addr)?;
        stream.set_nodelay(true)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        stream.write_all(
            &Frame::Sub {
                key: routing_key.to_string(),
            }
            .to_line(),
        )?;
        stream.flush()?;
        expect_ok(&mut reader, limit)?;

        let queue = Arc::new(SubQueue::new(self.config.retention_cap));
        let sink = Arc::clone(&queue);
        let max = self.config.max_frame;
        let reader_thread = thread::spawn(move || {
            loop {
                match read_frame(&mut reader, limit) {
                    Ok(Some(Frame::Msg { key, payload })) => {
                        match decode_payload(&payload, max).and_then(|b| Envelope::new(key, b)) {
                            Ok(env) => sink.push(env),
                            Err(e) => warn!("tcp subscription: dropping bad frame: {e}"),
                        }
                    }
                    Ok(Some(other)) => debug!("tcp subscription: ignoring {other:?}"),
                    Ok(None) | Err(_) => break,
                }
            }
            sink.close();
        });
        Ok(Box::new(TcpSubscription {
            key: routing_key.to_string(),
            queue,
            stream,
            reader: Some(reader_thread),
        }))
    }

    fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        let mut guard = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(conn) = guard.take() {
            let _ = conn.writer.shutdown(Shutdown::Both);
        }
    }

    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }
}

pub struct TcpSubscription {
    key: String,
    queue: Arc<SubQueue>,
    stream: TcpStream,
    reader: Option<JoinHandle<()>>,
}

impl Subscription for TcpSubscription {
    fn routing_key(&self) -> &str {
        &self.key
    }

    fn poll(&mut self, max_count: usize, deadline: Duration) -> Result<Vec<Envelope>, TransportError> {
        self.queue.pop(max_count, deadline)
    }

    fn pending(&self) -> usize {
        self.queue.len()
    }

    fn dropped(&self) -> u64 {
        self.queue.dropped()
    }
}

impl Drop for TcpSubscription {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(t) = self.reader.take() {
            let _ = t.join();
        }
    }
}
