//! Wire encoding of one exchange step.
//!
//! Header, little-endian, 11 bytes: `layer_id u16 | sender u8 | row_start u16 |
//! row_count u16 | width u16 | channels u16`, followed by
//! `row_count × width × channels` elements. Data frames carry float32
//! elements; the two control frames (handshake and raw image) carry bytes.

use thiserror::Error;

use crate::tensor::Tensor;

pub const HEADER_LEN: usize = 11;
/// Session handshake: JSON text, space padded.
pub const HANDSHAKE_LAYER: u16 = 0xFFFF;
/// Encoded input image offloaded instead of a tensor segment.
pub const RAW_IMAGE_LAYER: u16 = 0xFFFE;
/// Row width used to pack handshake text.
pub const HANDSHAKE_WIDTH: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("buffer of {0} bytes is shorter than the {HEADER_LEN}-byte header")]
    Truncated(usize),
    #[error("frame has zero rows")]
    ZeroRows,
    #[error("frame has zero width or channels")]
    ZeroExtent,
    #[error("payload is {got} bytes, header announces {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("field {0} does not fit in 16 bits")]
    Overflow(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub layer_id: u16,
    pub sender: u8,
    pub row_start: u16,
    pub row_count: u16,
    pub width: u16,
    pub channels: u16,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Bytes(Vec<u8>),
}

/// Bytes per payload element for frames of `layer_id`.
pub fn element_size(layer_id: u16) -> usize {
    if layer_id >= RAW_IMAGE_LAYER {
        1
    } else {
        4
    }
}

fn u16_of(v: usize, name: &'static str) -> Result<u16, FrameError> {
    u16::try_from(v).map_err(|_| FrameError::Overflow(name))
}

impl Frame {
    /// Data frame holding rows `row_start..` of a layer input map.
    pub fn rows(layer_id: u16, sender: u8, row_start: usize, rows: &Tensor) -> Result<Frame, FrameError> {
        Ok(Frame {
            layer_id,
            sender,
            row_start: u16_of(row_start, "row_start")?,
            row_count: u16_of(rows.height(), "row_count")?,
            width: u16_of(rows.width(), "width")?,
            channels: u16_of(rows.channels(), "channels")?,
            payload: Payload::F32(rows.data().to_vec()),
        })
    }

    pub fn handshake(sender: u8, json: &str) -> Result<Frame, FrameError> {
        let mut bytes = json.as_bytes().to_vec();
        let padded = bytes.len().div_ceil(HANDSHAKE_WIDTH).max(1) * HANDSHAKE_WIDTH;
        bytes.resize(padded, b' ');
        Ok(Frame {
            layer_id: HANDSHAKE_LAYER,
            sender,
            row_start: 0,
            row_count: u16_of(padded / HANDSHAKE_WIDTH, "row_count")?,
            width: HANDSHAKE_WIDTH as u16,
            channels: 1,
            payload: Payload::Bytes(bytes),
        })
    }

    pub fn raw_image(sender: u8, height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Frame, FrameError> {
        Ok(Frame {
            layer_id: RAW_IMAGE_LAYER,
            sender,
            row_start: 0,
            row_count: u16_of(height, "row_count")?,
            width: u16_of(width, "width")?,
            channels: u16_of(channels, "channels")?,
            payload: Payload::Bytes(pixels),
        })
    }

    pub fn element_count(&self) -> usize {
        self.row_count as usize * self.width as usize * self.channels as usize
    }

    pub fn payload_len(&self) -> usize {
        match &self.payload {
            Payload::F32(v) => v.len() * 4,
            Payload::Bytes(b) => b.len(),
        }
    }

    /// Rows as a tensor; fails for control frames.
    pub fn to_tensor(&self) -> Option<Tensor> {
        match &self.payload {
            Payload::F32(v) => {
                Tensor::new(self.row_count as usize, self.width as usize, self.channels as usize, v.clone()).ok()
            }
            Payload::Bytes(_) => None,
        }
    }

    pub fn bytes(&self) -> Option<&[u8]> {
        match &self.payload {
            Payload::Bytes(b) => Some(b),
            Payload::F32(_) => None,
        }
    }

    fn check(&self) -> Result<(), FrameError> {
        if self.row_count == 0 {
            return Err(FrameError::ZeroRows);
        }
        if self.width == 0 || self.channels == 0 {
            return Err(FrameError::ZeroExtent);
        }
        let expected = self.element_count() * element_size(self.layer_id);
        let consistent = matches!(
            (&self.payload, element_size(self.layer_id)),
            (Payload::F32(_), 4) | (Payload::Bytes(_), 1)
        );
        if !consistent || self.payload_len() != expected {
            return Err(FrameError::PayloadLength { expected, got: self.payload_len() });
        }
        Ok(())
    }

    /// Total encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload_len()
    }
}

pub fn serialize_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    frame.check()?;
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&frame.layer_id.to_le_bytes());
    out.push(frame.sender);
    for v in [frame.row_start, frame.row_count, frame.width, frame.channels] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &frame.payload {
        Payload::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Payload::Bytes(b) => out.extend_from_slice(b),
    }
    Ok(out)
}

/// Header fields and the payload length they announce.
pub fn parse_header(buf: &[u8]) -> Result<(Frame, usize), FrameError> {
    if buf.len() < HEADER_LEN {
        return Err(FrameError::Truncated(buf.len()));
    }
    let u = |i: usize| u16::from_le_bytes([buf[i], buf[i + 1]]);
    let layer_id = u(0);
    let frame = Frame {
        layer_id,
        sender: buf[2],
        row_start: u(3),
        row_count: u(5),
        width: u(7),
        channels: u(9),
        payload: Payload::Bytes(Vec::new()),
    };
    if frame.row_count == 0 {
        return Err(FrameError::ZeroRows);
    }
    if frame.width == 0 || frame.channels == 0 {
        return Err(FrameError::ZeroExtent);
    }
    let len = frame.element_count() * element_size(layer_id);
    Ok((frame, len))
}

/// Decodes exactly one frame occupying the whole buffer.
pub fn deserialize_frame(buf: &[u8]) -> Result<Frame, FrameError> {
    let (mut frame, len) = parse_header(buf)?;
    let body = &buf[HEADER_LEN..];
    if body.len() != len {
        return Err(FrameError::PayloadLength { expected: len, got: body.len() });
    }
    frame.payload = if element_size(frame.layer_id) == 4 {
        Payload::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    } else {
        Payload::Bytes(body.to_vec())
    };
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_frame_round_trip() {
        let t = Tensor::random(1, 224, 3, 9);
        let f = Frame::rows(3, 1, 17, &t).unwrap();
        let bytes = serialize_frame(&f).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 224 * 3 * 4);
        assert_eq!(deserialize_frame(&bytes).unwrap(), f);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::filled(1, 1, 1, 1.0);
        let f = Frame::rows(0x0102, 2, 0x0304, &t).unwrap();
        let b = serialize_frame(&f).unwrap();
        assert_eq!(&b[..HEADER_LEN], &[0x02, 0x01, 2, 0x04, 0x03, 1, 0, 1, 0, 1, 0]);
        assert_eq!(&b[HEADER_LEN..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn zero_row_frame_rejected() {
        let f = Frame { layer_id: 1, sender: 0, row_start: 0, row_count: 0, width: 4, channels: 1, payload: Payload::F32(vec![]) };
        assert_eq!(serialize_frame(&f), Err(FrameError::ZeroRows));
        let mut b = vec![1, 0, 0, 0, 0, 0, 0, 4, 0, 1, 0];
        assert_eq!(deserialize_frame(&b), Err(FrameError::ZeroRows));
        b[5] = 1;
        assert!(matches!(deserialize_frame(&b), Err(FrameError::PayloadLength { expected: 16, got: 0 })));
    }

    #[test]
    fn handshake_is_padded_json() {
        let f = Frame::handshake(0, "{\"a\":1}").unwrap();
        let b = serialize_frame(&f).unwrap();
        let back = deserialize_frame(&b).unwrap();
        let text = std::str::from_utf8(back.bytes().unwrap()).unwrap();
        assert_eq!(text.trim_end(), "{\"a\":1}");
        assert_eq!(text.len(), HANDSHAKE_WIDTH);
    }

    #[test]
    fn truncated_buffers_error() {
        let t = Tensor::random(2, 3, 2, 1);
        let b = serialize_frame(&Frame::rows(1, 0, 0, &t).unwrap()).unwrap();
        for cut in 0..b.len() {
            assert!(deserialize_frame(&b[..cut]).is_err());
        }
    }
}
