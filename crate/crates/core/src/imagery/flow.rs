//! Middlebury `.flo` files: little-endian `f32` magic `202021.25`, `i32`
//! width, `i32` height, then `(u, v)` `f32` pairs in row-major order.

use std::path::Path;

use super::{io_err, FlowField, ImageryError};

pub const FLOW_MAGIC: f32 = 202021.25;

const HEADER_LEN: usize = 12;

pub fn read_flow(path: &Path) -> Result<FlowField, ImageryError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_flow(&bytes)
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<(), ImageryError> {
    std::fs::write(path, encode_flow(flow)).map_err(io_err(path))
}

pub(crate) fn decode_flow(bytes: &[u8]) -> Result<FlowField, ImageryError> {
    if bytes.len() < HEADER_LEN {
        return Err(ImageryError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let word = |o: usize| [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLOW_MAGIC {
        return Err(ImageryError::BadMagic(magic));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(ImageryError::BadDimensions {
            width: w.max(0) as usize,
            height: h.max(0) as usize,
        });
    }
    let (w, h) = (w as usize, h as usize);
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(ImageryError::BadDimensions {
            width: w,
            height: h,
        })?;
    if bytes.len() < expected {
        return Err(ImageryError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let vectors = bytes[HEADER_LEN..expected]
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            ]
        })
        .collect();
    FlowField::new(w, h, vectors)
}

pub(crate) fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + flow.vectors.len() * 8);
    out.extend_from_slice(&FLOW_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.vectors {
        out.extend_from_slice(&v[0].to_le_bytes());
        out.extend_from_slice(&v[1].to_le_bytes());
    }
    out
}
