//! Middlebury `.flo` files.
//!
//! Layout (little-endian): `f32` magic `202021.25` (bytes `PIEH`), `i32`
//! width, `i32` height, then `width·height` interleaved `(u, v)` `f32` pairs in
//! row-major order. Components with magnitude above `1e9` (or non-finite)
//! mark unknown flow; such pixels load as invalid with zero flow and are
//! written back as `1e10`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Element;

pub const FLO_MAGIC: f32 = 202021.25;
pub const UNKNOWN_FLOW_THRESHOLD: f32 = 1e9;
pub const UNKNOWN_FLOW: f32 = 1e10;

const HEADER_LEN: usize = 12;
const MAX_PIXELS: usize = 1 << 28;

pub fn encode_flo<T: Element>(flow: &FlowField<T>) -> Result<Vec<u8>> {
    if flow.batch() != 1 {
        return Err(Error::Argument(format!(".flo holds a single field, got batch {}", flow.batch())));
    }
    let (w, h) = (flow.width(), flow.height());
    let mut out = Vec::with_capacity(HEADER_LEN + w * h * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let (u, v) = if flow.is_valid(0, y, x) {
                let (u, v) = flow.at(0, y, x);
                (u.as_f64() as f32, v.as_f64() as f32)
            } else {
                (UNKNOWN_FLOW, UNKNOWN_FLOW)
            };
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Length {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let word = |i: usize| -> [u8; 4] { bytes[i * 4..i * 4 + 4].try_into().unwrap() };
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!("bad .flo magic {magic} (expected {FLO_MAGIC})")));
    }
    let w = i32::from_le_bytes(word(1));
    let h = i32::from_le_bytes(word(2));
    if w <= 0 || h <= 0 || (w as usize).saturating_mul(h as usize) > MAX_PIXELS {
        return Err(Error::Format(format!("implausible .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = HEADER_LEN + w * h * 8;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let n = w * h;
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut valid = vec![true; n];
    for (i, px) in bytes[HEADER_LEN..].chunks_exact(8).enumerate() {
        let pu = f32::from_le_bytes(px[..4].try_into().unwrap());
        let pv = f32::from_le_bytes(px[4..].try_into().unwrap());
        let known = |c: f32| c.is_finite() && c.abs() <= UNKNOWN_FLOW_THRESHOLD;
        if known(pu) && known(pv) {
            u[i] = pu as f64;
            v[i] = pv as f64;
        } else {
            valid[i] = false;
        }
    }
    let mask = valid.iter().any(|&b| !b).then_some(valid);
    FlowField::from_planes(w, h, &u, &v, mask)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes)
}

pub fn write_flo<T: Element>(path: impl AsRef<Path>, flow: &FlowField<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_flo(flow)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_zero_pixel_is_twenty_bytes() {
        let f = FlowField::<f64>::zeros(1, 1, 1);
        let bytes = encode_flo(&f).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"PIEH");
        let back = decode_flo(&bytes).unwrap();
        assert_eq!(back.tensor().data(), f.tensor().data());
        assert!(back.valid().is_none());
    }

    #[test]
    fn ramp_round_trips_bitwise() {
        let (w, h) = (4, 3);
        let u: Vec<f64> = (0..w * h).map(|i| i as f64 * 0.25 - 1.0).collect();
        let v: Vec<f64> = (0..w * h).map(|i| -(i as f64) * 0.125).collect();
        let f = FlowField::from_planes(w, h, &u, &v, None).unwrap();
        let bytes = encode_flo(&f).unwrap();
        let back = decode_flo(&bytes).unwrap();
        assert_eq!(back.tensor().data(), f.tensor().data());
        assert_eq!(encode_flo(&back).unwrap(), bytes);
        // Row-major interleaving: pixel (x=1, y=0) follows pixel (0, 0).
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), -0.75);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let good = encode_flo(&FlowField::<f64>::zeros(1, 2, 2)).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] ^= 1;
        assert!(matches!(decode_flo(&bad_magic), Err(Error::Format(_))));
        assert!(matches!(decode_flo(&good[..good.len() - 1]), Err(Error::Length { .. })));
        assert!(matches!(decode_flo(&good[..5]), Err(Error::Length { .. })));
        let mut bad_dims = good.clone();
        bad_dims[4..8].copy_from_slice(&(-3i32).to_le_bytes());
        assert!(matches!(decode_flo(&bad_dims), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_flow_marks_invalid() {
        let f = FlowField::<f64>::zeros(1, 1, 2).with_valid(Some(vec![true, false])).unwrap();
        let bytes = encode_flo(&f).unwrap();
        let back = decode_flo(&bytes).unwrap();
        assert_eq!(back.valid(), Some(&[true, false][..]));
        assert_eq!(encode_flo(&back).unwrap(), bytes);
    }
}
