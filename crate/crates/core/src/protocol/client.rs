// SPDX-License-Identifier: Apache-2.0

use super::frame::{MsgType, VERSION, Frame};
use super::transport::{read_frame, write_frame, Incoming, Transport};
use crate::error::{Result, SndError};
use crate::model::SentenceEmbedding;
use crate::tensor::TokenMatrix;

/// One client connection. Requests are strictly sequential: `&mut self`
/// allows a single request in flight.
pub struct Session<T: Transport> {
    id: u64,
    transport: T,
    version: u16,
}

impl<T: Transport> Session<T> {
    pub fn new(id: u64, transport: T) -> Self {
        Self {
            id,
            transport,
            version: VERSION,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn version(&self) -> u16 {
        self.version
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn into_transport(self) -> T {
        self.transport
    }
}

/// Sends `x_tilde` and waits for the noisy sentence embedding.
pub fn client_request<T: Transport>(x_tilde: &TokenMatrix, session: &mut Session<T>) -> Result<SentenceEmbedding> {
    write_frame(&mut session.transport, &Frame::request(x_tilde))?;
    let frame = match read_frame(&mut session.transport)? {
        Incoming::Frame(f) => f,
        Incoming::Malformed(e) => return Err(SndError::Protocol(e)),
        Incoming::Closed => return Err(SndError::Transport("server closed the connection".into())),
    };
    match frame.msg_type {
        MsgType::Error => Err(SndError::Server(frame.error_message().unwrap_or_default())),
        MsgType::EmbedRequest => Err(SndError::Contract("server answered with a request frame".into())),
        MsgType::EmbedResponse => {
            if frame.n != 1 || frame.d as usize != x_tilde.cols() {
                return Err(SndError::Contract(format!(
                    "response shape {}x{}, expected 1x{}",
                    frame.n,
                    frame.d,
                    x_tilde.cols()
                )));
            }
            Ok(frame.to_embedding())
        }
    }
}
