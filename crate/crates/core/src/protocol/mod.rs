// SPDX-License-Identifier: Apache-2.0

//! Split-inference wire protocol: the client uploads privatized token
//! representations and receives the server's sentence embedding.

pub mod client;
pub mod frame;
pub mod server;
pub mod transport;

pub use client::{client_request, Session};
pub use frame::{decode_frame, encode_frame, payload_accounting, Frame, FrameError, MsgType, PayloadAccounting};
pub use server::{bind, handle_request, respond, serve_connection, serve_tcp};
pub use transport::{duplex, read_frame, write_frame, ByteCounters, Incoming, MemoryStream, Metered, Transport};
