//! KITTI 16-bit flow PNGs.
//!
//! Three 16-bit channels per pixel: `u = (R - 2^15) / 64`,
//! `v = (G - 2^15) / 64`, `B != 0` marks valid pixels. Flow of invalid pixels
//! is still decoded so that encode/decode round trips are exact.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Element;

pub const KITTI_OFFSET: f64 = 32768.0;
pub const KITTI_SCALE: f64 = 64.0;

fn quantize(value: f64) -> u16 {
    (value * KITTI_SCALE + KITTI_OFFSET).round().clamp(0.0, 65535.0) as u16
}

pub fn encode_kitti_png<T: Element>(flow: &FlowField<T>) -> Result<Vec<u8>> {
    if flow.batch() != 1 {
        return Err(Error::Argument(format!("KITTI PNG holds a single field, got batch {}", flow.batch())));
    }
    let (w, h) = (flow.width(), flow.height());
    let mut samples = Vec::with_capacity(w * h * 6);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(0, y, x);
            let valid = u16::from(flow.is_valid(0, y, x));
            for s in [quantize(u.as_f64()), quantize(v.as_f64()), valid] {
                samples.extend_from_slice(&s.to_be_bytes());
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, w as u32, h as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Sixteen);
        let mut writer = encoder.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer.write_image_data(&samples).map_err(|e| Error::Format(e.to_string()))?;
        writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_kitti_png(bytes: &[u8]) -> Result<FlowField<f64>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("KITTI PNG: {e}")))?;
    let header = reader.info();
    if header.bit_depth != png::BitDepth::Sixteen || header.color_type != png::ColorType::Rgb {
        return Err(Error::Format(format!(
            "KITTI PNG must be 16-bit RGB, found {:?} {:?}",
            header.bit_depth, header.color_type
        )));
    }
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("KITTI PNG: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let n = w * h;
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for px in buf[..info.buffer_size()].chunks_exact(6) {
        let r = u16::from_be_bytes([px[0], px[1]]) as f64;
        let g = u16::from_be_bytes([px[2], px[3]]) as f64;
        let b = u16::from_be_bytes([px[4], px[5]]);
        u.push((r - KITTI_OFFSET) / KITTI_SCALE);
        v.push((g - KITTI_OFFSET) / KITTI_SCALE);
        valid.push(b != 0);
    }
    FlowField::from_planes(w, h, &u, &v, Some(valid))
}

pub fn read_kitti_png(path: impl AsRef<Path>) -> Result<FlowField<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_kitti_png(&bytes)
}

pub fn write_kitti_png<T: Element>(path: impl AsRef<Path>, flow: &FlowField<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_kitti_png(flow)?).map_err(|e| Error::io(path, e))
}
