// SPDX-License-Identifier: Apache-2.0

//! Binary frame layout.
//!
//! ```text
//! magic "SND1" | version u16 | msg_type u8 | n u32 | d u32 | payload | crc u32
//! ```
//!
//! All integers and floats are little-endian. The payload holds `n * d`
//! 32-bit floats in row-major order; its length is implied by `n` and `d`.
//! The CRC-32 covers the header and the payload.

use thiserror::Error;

use crate::model::{EmbeddingRole, SentenceEmbedding};
use crate::tensor::{Tensor, TokenMatrix};

pub const MAGIC: &[u8; 4] = b"SND1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 15;
pub const CRC_LEN: usize = 4;
/// Refuse to allocate for frames claiming more floats than this.
pub const MAX_PAYLOAD_FLOATS: usize = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("version {got} not supported (expected {expected})")]
    VersionMismatch { got: u16, expected: u16 },
    #[error("crc mismatch: computed {computed:08x}, frame says {stored:08x}")]
    CrcMismatch { computed: u32, stored: u32 },
    #[error("truncated frame: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame of {n}x{d} floats exceeds the size limit")]
    TooLarge { n: u32, d: u32 },
}

impl FrameError {
    /// Stable numeric code, distinct per variant.
    pub fn code(&self) -> u8 {
        match self {
            FrameError::BadMagic(_) => 1,
            FrameError::VersionMismatch { .. } => 2,
            FrameError::CrcMismatch { .. } => 3,
            FrameError::Truncated { .. } => 4,
            FrameError::TrailingBytes(_) => 5,
            FrameError::UnknownType(_) => 6,
            FrameError::TooLarge { .. } => 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    EmbedRequest = 1,
    EmbedResponse = 2,
    Error = 3,
}

impl TryFrom<u8> for MsgType {
    type Error = FrameError;

    fn try_from(b: u8) -> Result<Self, FrameError> {
        match b {
            1 => Ok(MsgType::EmbedRequest),
            2 => Ok(MsgType::EmbedResponse),
            3 => Ok(MsgType::Error),
            other => Err(FrameError::UnknownType(other)),
        }
    }
}

/// A decoded frame. The payload is kept as raw 32-bit words so that any
/// bit pattern survives a round trip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub version: u16,
    pub msg_type: MsgType,
    pub n: u32,
    pub d: u32,
    pub payload: Vec<u32>,
}

impl Frame {
    fn from_tensor(msg_type: MsgType, n: usize, d: usize, values: &[f64]) -> Self {
        Frame {
            version: VERSION,
            msg_type,
            n: n as u32,
            d: d as u32,
            payload: values.iter().map(|&v| (v as f32).to_bits()).collect(),
        }
    }

    /// Request carrying a privatized token matrix, rounded to f32.
    pub fn request(x_tilde: &TokenMatrix) -> Self {
        Self::from_tensor(MsgType::EmbedRequest, x_tilde.rows(), x_tilde.cols(), x_tilde.data())
    }

    /// Response carrying one sentence embedding (`n = 1`).
    pub fn response(e: &SentenceEmbedding) -> Self {
        Self::from_tensor(MsgType::EmbedResponse, 1, e.dim(), &e.values)
    }

    /// Error frame: the UTF-8 message padded with zero bytes to whole words;
    /// `n = 1`, `d` = word count.
    pub fn error(message: &str) -> Self {
        let mut bytes = message.as_bytes().to_vec();
        bytes.resize(bytes.len().div_ceil(4) * 4, 0);
        let payload: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Frame {
            version: VERSION,
            msg_type: MsgType::Error,
            n: 1,
            d: payload.len() as u32,
            payload,
        }
    }

    pub fn error_message(&self) -> Option<String> {
        if self.msg_type != MsgType::Error {
            return None;
        }
        let bytes: Vec<u8> = self.payload.iter().flat_map(|w| w.to_le_bytes()).collect();
        let end = bytes.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
        Some(String::from_utf8_lossy(&bytes[..end]).into_owned())
    }

    /// Payload widened to f64, shaped `n x d`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.payload.iter().map(|&w| f32::from_bits(w) as f64).collect();
        Tensor::matrix(self.n as usize, self.d as usize, data).expect("payload length matches n*d")
    }

    pub fn to_embedding(&self) -> SentenceEmbedding {
        SentenceEmbedding::new(self.to_tensor().into_data(), EmbeddingRole::Noisy)
    }

    pub fn encoded_len(&self) -> usize {
        frame_len(self.n as usize, self.d as usize)
    }
}

/// Total bytes on the wire for an `n x d` payload.
pub fn frame_len(n: usize, d: usize) -> usize {
    HEADER_LEN + 4 * n * d + CRC_LEN
}

pub fn encode_frame(f: &Frame) -> Vec<u8> {
    debug_assert_eq!(f.payload.len(), f.n as usize * f.d as usize);
    let mut out = Vec::with_capacity(f.encoded_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&f.version.to_le_bytes());
    out.push(f.msg_type as u8);
    out.extend_from_slice(&f.n.to_le_bytes());
    out.extend_from_slice(&f.d.to_le_bytes());
    for w in &f.payload {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Header fields `(n, d)` and the full frame length, checked only for size.
pub fn peek_header(header: &[u8]) -> Result<(u32, u32, usize), FrameError> {
    if header.len() < HEADER_LEN {
        return Err(FrameError::Truncated {
            needed: HEADER_LEN,
            got: header.len(),
        });
    }
    let n = u32::from_le_bytes(header[7..11].try_into().expect("4 bytes"));
    let d = u32::from_le_bytes(header[11..15].try_into().expect("4 bytes"));
    let floats = (n as u64) * (d as u64);
    if floats > MAX_PAYLOAD_FLOATS as u64 {
        return Err(FrameError::TooLarge { n, d });
    }
    Ok((n, d, frame_len(n as usize, d as usize)))
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    let (n, d, total) = peek_header(bytes)?;
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FrameError::VersionMismatch {
            got: version,
            expected: VERSION,
        });
    }
    if bytes.len() < total {
        return Err(FrameError::Truncated {
            needed: total,
            got: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(FrameError::TrailingBytes(bytes.len() - total));
    }
    let body = total - CRC_LEN;
    let stored = u32::from_le_bytes(bytes[body..total].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(FrameError::CrcMismatch { computed, stored });
    }
    let msg_type = MsgType::try_from(bytes[6])?;
    let payload = bytes[HEADER_LEN..body]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Frame {
        version,
        msg_type,
        n,
        d,
        payload,
    })
}

/// Byte counts for one request/response exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadAccounting {
    pub upload_payload: usize,
    pub download_payload: usize,
    pub upload_bytes: usize,
    pub download_bytes: usize,
}

pub fn payload_accounting(n: usize, d: usize) -> PayloadAccounting {
    PayloadAccounting {
        upload_payload: 4 * n * d,
        download_payload: 4 * d,
        upload_bytes: frame_len(n, d),
        download_bytes: frame_len(1, d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use proptest::prelude::*;

    fn sample_frame() -> Frame {
        let x = Tensor::randn(&[16, 32], 1.0, &mut RngState::new(1));
        Frame::request(&x)
    }

    #[test]
    fn sizes() {
        let bytes = encode_frame(&sample_frame());
        assert_eq!(bytes.len(), 15 + 2048 + 4);
        let acc = payload_accounting(128, 32);
        assert_eq!(acc.upload_payload, 16384);
        assert_eq!(acc.download_payload, 128);
        let doubled = payload_accounting(256, 32);
        assert_eq!(doubled.upload_payload, 2 * acc.upload_payload);
        assert_eq!(doubled.download_bytes, acc.download_bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_frame(&sample_frame());
        assert_eq!(&bytes[0..4], b"SND1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 1);
        assert_eq!(&bytes[7..11], &16u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &32u32.to_le_bytes());
    }

    #[test]
    fn f32_rounding_is_nearest_even() {
        // 1 + 2^-24 lies exactly halfway between two f32 values; ties go to even.
        let x = Tensor::matrix(1, 2, vec![1.0 + 2f64.powi(-24), 1.0 + 3.0 * 2f64.powi(-24)]).unwrap();
        let f = Frame::request(&x);
        assert_eq!(f32::from_bits(f.payload[0]), 1.0);
        assert_eq!(f32::from_bits(f.payload[1]), 1.0 + 2f32.powi(-22));
    }

    #[test]
    fn distinct_errors() {
        let good = encode_frame(&sample_frame());
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode_frame(&bad), Err(FrameError::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_frame(&bad), Err(FrameError::VersionMismatch { got: 9, .. })));
        let mut bad = good.clone();
        bad[100] ^= 1;
        assert!(matches!(decode_frame(&bad), Err(FrameError::CrcMismatch { .. })));
        assert!(matches!(decode_frame(&good[..good.len() - 1]), Err(FrameError::Truncated { .. })));
        assert!(matches!(decode_frame(&good[..10]), Err(FrameError::Truncated { .. })));
        let codes: std::collections::BTreeSet<u8> = [
            decode_frame(&bad).unwrap_err().code(),
            decode_frame(&good[..10]).unwrap_err().code(),
            FrameError::BadMagic(*b"xxxx").code(),
            FrameError::VersionMismatch { got: 2, expected: 1 }.code(),
        ]
        .into();
        assert_eq!(codes.len(), 4);
    }

    #[test]
    fn unknown_type_after_valid_crc() {
        let mut f = sample_frame();
        f.msg_type = MsgType::EmbedResponse;
        let mut bytes = encode_frame(&f);
        bytes[6] = 7;
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]);
        bytes[body..].copy_from_slice(&crc.to_le_bytes());
        assert_eq!(decode_frame(&bytes), Err(FrameError::UnknownType(7)));
    }

    #[test]
    fn error_frames_carry_text() {
        for msg in ["", "x", "sequence length 600 exceeds 512", "naïve"] {
            let f = Frame::error(msg);
            assert_eq!(f.n, 1);
            let back = decode_frame(&encode_frame(&f)).unwrap();
            assert_eq!(back.error_message().unwrap(), msg);
        }
        assert_eq!(sample_frame().error_message(), None);
    }

    proptest! {
        #[test]
        fn round_trip(n in 0u32..20, d in 0u32..20, kind in 1u8..4, seed in any::<u64>()) {
            use rand::RngCore;
            let mut rng = RngState::new(seed);
            let payload = (0..n * d).map(|_| rng.next_u32()).collect();
            let f = Frame { version: VERSION, msg_type: MsgType::try_from(kind).unwrap(), n, d, payload };
            let bytes = encode_frame(&f);
            prop_assert_eq!(bytes.len(), f.encoded_len());
            prop_assert_eq!(decode_frame(&bytes).unwrap(), f);
        }
    }
}
