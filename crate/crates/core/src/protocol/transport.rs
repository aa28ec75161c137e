// SPDX-License-Identifier: Apache-2.0

//! Byte-stream transports and frame I/O over them.

use std::io::{self, ErrorKind, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;

use super::frame::{decode_frame, encode_frame, peek_header, Frame, FrameError, HEADER_LEN};
use crate::error::{Result, SndError};

/// Any bidirectional byte stream.
pub trait Transport: Read + Write + Send {}

impl<T: Read + Write + Send> Transport for T {}

/// In-process stream end. Writes become visible to the peer on `flush`.
pub struct MemoryStream {
    tx: Option<Sender<Vec<u8>>>,
    rx: Receiver<Vec<u8>>,
    outgoing: Vec<u8>,
    incoming: Vec<u8>,
    pos: usize,
}

/// A connected pair of in-process streams.
pub fn duplex() -> (MemoryStream, MemoryStream) {
    let (atx, brx) = channel();
    let (btx, arx) = channel();
    let end = |tx, rx| MemoryStream {
        tx: Some(tx),
        rx,
        outgoing: Vec::new(),
        incoming: Vec::new(),
        pos: 0,
    };
    (end(atx, arx), end(btx, brx))
}

impl MemoryStream {
    /// Closes the sending half; the peer sees end of stream.
    pub fn shutdown(&mut self) {
        let _ = self.flush();
        self.tx = None;
    }
}

impl Read for MemoryStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.pos == self.incoming.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.incoming = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let k = buf.len().min(self.incoming.len() - self.pos);
        buf[..k].copy_from_slice(&self.incoming[self.pos..self.pos + k]);
        self.pos += k;
        Ok(k)
    }
}

impl Write for MemoryStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.tx.is_none() {
            return Err(ErrorKind::BrokenPipe.into());
        }
        self.outgoing.extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if self.outgoing.is_empty() {
            return Ok(());
        }
        let chunk = std::mem::take(&mut self.outgoing);
        match &self.tx {
            Some(tx) => tx.send(chunk).map_err(|_| ErrorKind::BrokenPipe.into()),
            None => Err(ErrorKind::BrokenPipe.into()),
        }
    }
}

/// Shared byte counters of a [`Metered`] stream.
#[derive(Debug, Clone, Default)]
pub struct ByteCounters {
    sent: Arc<AtomicU64>,
    received: Arc<AtomicU64>,
}

impl ByteCounters {
    pub fn sent(&self) -> u64 {
        self.sent.load(Ordering::SeqCst)
    }

    pub fn received(&self) -> u64 {
        self.received.load(Ordering::SeqCst)
    }
}

/// Counts every byte read from and written to the wrapped stream.
pub struct Metered<T> {
    inner: T,
    counters: ByteCounters,
}

impl<T> Metered<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            counters: ByteCounters::default(),
        }
    }

    pub fn counters(&self) -> ByteCounters {
        self.counters.clone()
    }

    pub fn into_inner(self) -> T {
        self.inner
    }
}

impl<T: Read> Read for Metered<T> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let k = self.inner.read(buf)?;
        self.counters.received.fetch_add(k as u64, Ordering::SeqCst);
        Ok(k)
    }
}

impl<T: Write> Write for Metered<T> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let k = self.inner.write(buf)?;
        self.counters.sent.fetch_add(k as u64, Ordering::SeqCst);
        Ok(k)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

pub fn write_frame<T: Write + ?Sized>(stream: &mut T, frame: &Frame) -> Result<()> {
    stream
        .write_all(&encode_frame(frame))
        .and_then(|_| stream.flush())
        .map_err(|e| SndError::Transport(e.to_string()))
}

/// Outcome of reading one frame off a stream.
#[derive(Debug)]
pub enum Incoming {
    Frame(Frame),
    /// A frame-sized chunk was consumed but did not decode.
    Malformed(FrameError),
    Closed,
}

/// Reads exactly one frame. The length always comes from the header's
/// `n` and `d`, so a corrupted frame is skipped whole and the stream stays
/// aligned.
pub fn read_frame<T: Read + ?Sized>(stream: &mut T) -> Result<Incoming> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match stream.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(Incoming::Closed),
            Ok(0) => {
                return Err(SndError::Transport(format!(
                    "stream closed inside a frame header ({got} bytes)"
                )))
            }
            Ok(k) => got += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(SndError::Transport(e.to_string())),
        }
    }
    let (_, _, total) = match peek_header(&header) {
        Ok(h) => h,
        // Cannot skip an absurd length; the caller drops the connection.
        Err(e) => return Err(SndError::Protocol(e)),
    };
    let mut bytes = header.to_vec();
    bytes.resize(total, 0);
    stream
        .read_exact(&mut bytes[HEADER_LEN..])
        .map_err(|e| SndError::Transport(e.to_string()))?;
    Ok(match decode_frame(&bytes) {
        Ok(f) => Incoming::Frame(f),
        Err(e) => Incoming::Malformed(e),
    })
}
