// SPDX-License-Identifier: Apache-2.0

//! Server side of the split. It only ever sees frame bytes and the frozen
//! encoder.

use std::net::{TcpListener, ToSocketAddrs};
use std::sync::Arc;

use super::frame::{decode_frame, encode_frame, Frame, MsgType};
use super::transport::{read_frame, write_frame, Incoming, Transport};
use crate::error::{Result, SndError};
use crate::model::{encode, EncoderWeights, MAX_SEQ_LEN};

/// Answer to one decoded frame.
pub fn respond(frame: &Frame, encoder: &EncoderWeights) -> Frame {
    if frame.msg_type != MsgType::EmbedRequest {
        return Frame::error("expected an embed request");
    }
    let (n, d) = (frame.n as usize, frame.d as usize);
    if n > MAX_SEQ_LEN {
        return Frame::error(&format!("sequence length {n} exceeds {MAX_SEQ_LEN}"));
    }
    if n == 0 {
        return Frame::error("empty sequence");
    }
    if d != encoder.config.dim {
        return Frame::error(&format!("token width {d} does not match model width {}", encoder.config.dim));
    }
    let x = frame.to_tensor();
    if !x.is_finite() {
        return Frame::error("non-finite token values");
    }
    match encode(&x, encoder) {
        Ok(e) => Frame::response(&e),
        Err(e) => Frame::error(&e.to_string()),
    }
}

/// Response bytes as a pure function of request bytes.
pub fn handle_request(bytes: &[u8], encoder: &EncoderWeights) -> Vec<u8> {
    let reply = match decode_frame(bytes) {
        Ok(f) => respond(&f, encoder),
        Err(e) => Frame::error(&format!("malformed frame (code {}): {e}", e.code())),
    };
    encode_frame(&reply)
}

/// Serves one connection until the peer closes it; returns the number of
/// frames answered.
pub fn serve_connection<T: Transport>(mut stream: T, encoder: &EncoderWeights) -> Result<u64> {
    let mut answered = 0;
    loop {
        let reply = match read_frame(&mut stream)? {
            Incoming::Closed => return Ok(answered),
            Incoming::Frame(f) => respond(&f, encoder),
            Incoming::Malformed(e) => Frame::error(&format!("malformed frame (code {}): {e}", e.code())),
        };
        write_frame(&mut stream, &reply)?;
        answered += 1;
    }
}

pub fn bind<A: ToSocketAddrs>(endpoint: A) -> Result<TcpListener> {
    TcpListener::bind(endpoint).map_err(|e| SndError::Transport(format!("bind failed: {e}")))
}

/// Accepts connections forever (or `max_connections` of them), one thread
/// per connection over shared weights.
pub fn serve_tcp(listener: TcpListener, encoder: Arc<EncoderWeights>, max_connections: Option<usize>) -> Result<()> {
    let mut handles = Vec::new();
    for (i, stream) in listener.incoming().enumerate() {
        let stream = stream.map_err(|e| SndError::Transport(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let enc = Arc::clone(&encoder);
        handles.push(std::thread::spawn(move || serve_connection(stream, &enc)));
        if max_connections.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    for h in handles {
        h.join().map_err(|_| SndError::Transport("connection thread panicked".into()))??;
    }
    Ok(())
}
