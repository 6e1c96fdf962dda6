//! Reliable, ordered frame links between two nodes.
//!
//! A [`Link`] is one node's end of a bidirectional channel, split into a
//! sending half and a receiving half so a node's transport workers can drive
//! them independently of its compute worker.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};

use super::frame::{deserialize_frame, parse_header, serialize_frame, Frame, HEADER_LEN};
use super::RuntimeError;

pub trait FrameSink: Send {
    fn send(&mut self, frame: &Frame) -> Result<(), RuntimeError>;
    /// Signals end of stream to the peer.
    fn close(&mut self) {}
}

pub trait FrameSource: Send {
    /// Next frame, waiting no later than `deadline`.
    fn recv(&mut self, deadline: Instant) -> Result<Frame, RuntimeError>;
}

pub struct Link {
    pub sink: Box<dyn FrameSink>,
    pub source: Box<dyn FrameSource>,
}

impl Link {
    pub fn send(&mut self, frame: &Frame) -> Result<(), RuntimeError> {
        self.sink.send(frame)
    }

    pub fn recv(&mut self, deadline: Instant) -> Result<Frame, RuntimeError> {
        self.source.recv(deadline)
    }
}

struct ChannelSink {
    tx: Option<Sender<Vec<u8>>>,
    mbps: Option<f64>,
}

impl FrameSink for ChannelSink {
    fn send(&mut self, frame: &Frame) -> Result<(), RuntimeError> {
        let bytes = serialize_frame(frame)?;
        if let Some(mbps) = self.mbps {
            thread::sleep(Duration::from_secs_f64(bytes.len() as f64 * 8.0 / (mbps * 1e6)));
        }
        let tx = self.tx.as_ref().ok_or(RuntimeError::Disconnected)?;
        tx.send(bytes).map_err(|_| RuntimeError::Disconnected)
    }

    fn close(&mut self) {
        self.tx = None;
    }
}

struct ChannelSource {
    rx: Receiver<Vec<u8>>,
}

impl FrameSource for ChannelSource {
    fn recv(&mut self, deadline: Instant) -> Result<Frame, RuntimeError> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.rx.recv_timeout(wait) {
            Ok(bytes) => Ok(deserialize_frame(&bytes)?),
            Err(RecvTimeoutError::Timeout) => Err(RuntimeError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(RuntimeError::Disconnected),
        }
    }
}

/// Two connected in-process endpoints. With `mbps`, every frame occupies the
/// sending side for its encoded size at that rate.
pub fn in_process_pair(mbps: Option<f64>) -> (Link, Link) {
    let (a_tx, a_rx) = unbounded();
    let (b_tx, b_rx) = unbounded();
    let a = Link {
        sink: Box::new(ChannelSink { tx: Some(a_tx), mbps }),
        source: Box::new(ChannelSource { rx: b_rx }),
    };
    let b = Link {
        sink: Box::new(ChannelSink { tx: Some(b_tx), mbps }),
        source: Box::new(ChannelSource { rx: a_rx }),
    };
    (a, b)
}

struct TcpSink {
    stream: TcpStream,
}

impl FrameSink for TcpSink {
    fn send(&mut self, frame: &Frame) -> Result<(), RuntimeError> {
        let bytes = serialize_frame(frame)?;
        self.stream.write_all(&bytes).map_err(io_err)
    }

    fn close(&mut self) {
        let _ = self.stream.flush();
        let _ = self.stream.shutdown(Shutdown::Write);
    }
}

struct TcpSource {
    stream: TcpStream,
}

impl TcpSource {
    fn read_exact_by(&mut self, buf: &mut [u8], deadline: Instant) -> Result<(), RuntimeError> {
        let mut filled = 0;
        while filled < buf.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(RuntimeError::Timeout);
            }
            self.stream.set_read_timeout(Some(left)).map_err(io_err)?;
            match self.stream.read(&mut buf[filled..]) {
                Ok(0) => return Err(RuntimeError::Disconnected),
                Ok(k) => filled += k,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Err(RuntimeError::Timeout)
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(io_err(e)),
            }
        }
        Ok(())
    }
}

impl FrameSource for TcpSource {
    fn recv(&mut self, deadline: Instant) -> Result<Frame, RuntimeError> {
        let mut buf = vec![0u8; HEADER_LEN];
        self.read_exact_by(&mut buf, deadline)?;
        let (_, len) = parse_header(&buf)?;
        buf.resize(HEADER_LEN + len, 0);
        self.read_exact_by(&mut buf[HEADER_LEN..], deadline)?;
        Ok(deserialize_frame(&buf)?)
    }
}

fn io_err(e: io::Error) -> RuntimeError {
    RuntimeError::Transport(e.to_string())
}

pub fn tcp_link(stream: TcpStream) -> Result<Link, RuntimeError> {
    stream.set_nodelay(true).map_err(io_err)?;
    let reader = stream.try_clone().map_err(io_err)?;
    Ok(Link { sink: Box::new(TcpSink { stream }), source: Box::new(TcpSource { stream: reader }) })
}

fn resolve(addr: &str) -> Result<SocketAddr, RuntimeError> {
    addr.to_socket_addrs()
        .map_err(|e| RuntimeError::Transport(format!("bad address '{addr}': {e}")))?
        .next()
        .ok_or_else(|| RuntimeError::Transport(format!("address '{addr}' did not resolve")))
}

/// Connects to `addr`, retrying until `deadline`.
pub fn connect(addr: &str, deadline: Instant) -> Result<Link, RuntimeError> {
    let sa = resolve(addr)?;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(RuntimeError::ConnectTimeout(addr.to_string()));
        }
        match TcpStream::connect_timeout(&sa, left.min(Duration::from_secs(1))) {
            Ok(s) => return tcp_link(s),
            Err(_) => thread::sleep(Duration::from_millis(50).min(left)),
        }
    }
}

/// Waits for one incoming connection on `listener` until `deadline`.
pub fn accept(listener: &TcpListener, deadline: Instant) -> Result<Link, RuntimeError> {
    listener.set_nonblocking(true).map_err(io_err)?;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false).map_err(io_err)?;
                return tcp_link(s);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(RuntimeError::Timeout);
                }
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(io_err(e)),
        }
    }
}

/// Transport worker pair for one link: frames pushed into the returned
/// sender are written in order; frames read are forwarded to `inbox` tagged
/// with `tag`. Both workers stop when their side of the session ends.
pub(crate) fn spawn_workers<'scope, T: Send + Copy + 'scope>(
    scope: &'scope thread::Scope<'scope, '_>,
    link: Link,
    tag: T,
    inbox: Sender<(T, Result<Frame, RuntimeError>)>,
    deadline: Instant,
) -> Sender<Frame> {
    let Link { mut sink, mut source } = link;
    let (out_tx, out_rx) = bounded::<Frame>(1024);
    scope.spawn(move || {
        for f in out_rx.iter() {
            if sink.send(&f).is_err() {
                break;
            }
        }
        sink.close();
    });
    scope.spawn(move || loop {
        let r = source.recv(deadline);
        let stop = r.is_err();
        if inbox.send((tag, r)).is_err() || stop {
            break;
        }
    });
    out_tx
}
