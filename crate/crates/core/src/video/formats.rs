//! `.rvid` (u8 RGB video) and `.rflo` (f32 flow) containers.
//!
//! Both are little-endian with a 4-byte magic. Pixel payloads are frame-major,
//! row-major, with channels interleaved per pixel.

use std::fs;
use std::path::Path;

use super::volume::{FlowField, VideoTensor};
use crate::error::{Error, Result};
use crate::io::{put_u32, Reader};

const RVID_MAGIC: &[u8; 4] = b"RVID";
const RVID_VERSION: u32 = 1;
const RFLO_MAGIC: &[u8; 4] = b"RFLO";

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn rvid_to_bytes(video: &VideoTensor) -> Vec<u8> {
    let (f, h, w) = (video.frames(), video.height(), video.width());
    let mut out = Vec::with_capacity(20 + 3 * f * h * w);
    out.extend_from_slice(RVID_MAGIC);
    put_u32(&mut out, RVID_VERSION);
    put_u32(&mut out, f as u32);
    put_u32(&mut out, h as u32);
    put_u32(&mut out, w as u32);
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.push(quantize(video.get(c, fi, y, x)));
                }
            }
        }
    }
    out
}

pub fn rvid_from_bytes(bytes: &[u8]) -> Result<VideoTensor> {
    let mut r = Reader::new(bytes);
    r.expect_magic(RVID_MAGIC)?;
    let version = r.u32()?;
    if version != RVID_VERSION {
        return Err(Error::format(format!("unsupported rvid version {version}")));
    }
    let (f, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if f == 0 || h == 0 || w == 0 {
        return Err(Error::Geometry(format!("rvid header has a zero extent: {f}x{h}x{w}")));
    }
    let n = f * h * w * 3;
    if r.remaining() != n {
        return Err(Error::Truncated { expected: 20 + n, found: bytes.len() });
    }
    let payload = r.bytes(n)?;
    let plane = h * w;
    let mut data = vec![0.0; n];
    for (p, px) in payload.chunks_exact(3).enumerate() {
        let fi = p / plane;
        let yx = p % plane;
        for c in 0..3 {
            data[(c * f + fi) * plane + yx] = px[c] as f64 / 255.0;
        }
    }
    VideoTensor::new(f, h, w, data)
}

pub fn save_rvid(video: &VideoTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, rvid_to_bytes(video))?;
    Ok(())
}

pub fn load_rvid(path: impl AsRef<Path>) -> Result<VideoTensor> {
    rvid_from_bytes(&fs::read(path)?)
}

pub fn rflo_to_bytes(flow: &FlowField) -> Vec<u8> {
    let (t, h, w) = (flow.frames(), flow.height(), flow.width());
    let mut out = Vec::with_capacity(16 + 8 * t * h * w);
    out.extend_from_slice(RFLO_MAGIC);
    put_u32(&mut out, t as u32);
    put_u32(&mut out, h as u32);
    put_u32(&mut out, w as u32);
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                for c in 0..2 {
                    out.extend_from_slice(&(flow.get(c, ti, y, x) as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn rflo_from_bytes(bytes: &[u8]) -> Result<FlowField> {
    let mut r = Reader::new(bytes);
    r.expect_magic(RFLO_MAGIC)?;
    let (t, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::Geometry(format!("rflo header has a zero extent: {t}x{h}x{w}")));
    }
    let n = t * h * w * 2;
    if r.remaining() != n * 4 {
        return Err(Error::Truncated { expected: 16 + n * 4, found: bytes.len() });
    }
    let raw = r.f32s(n)?;
    r.finish()?;
    let plane = h * w;
    let mut data = vec![0.0; n];
    for (p, xy) in raw.chunks_exact(2).enumerate() {
        let ti = p / plane;
        let yx = p % plane;
        for c in 0..2 {
            data[(c * t + ti) * plane + yx] = xy[c] as f64;
        }
    }
    FlowField::new(t, h, w, data)
}

pub fn save_rflo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, rflo_to_bytes(flow))?;
    Ok(())
}

pub fn load_rflo(path: impl AsRef<Path>) -> Result<FlowField> {
    rflo_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rvid_round_trip_is_byte_identical() {
        let mut v = VideoTensor::zeros(2, 4, 4);
        v.set(0, 1, 2, 3, 1.0);
        v.set(2, 0, 0, 1, 0.3);
        let bytes = rvid_to_bytes(&v);
        let back = rvid_from_bytes(&bytes).unwrap();
        assert_eq!(rvid_to_bytes(&back), bytes);
        assert_eq!(back.get(0, 1, 2, 3), 1.0);
    }

    #[test]
    fn rvid_short_payload_is_truncation() {
        let mut bytes = rvid_to_bytes(&VideoTensor::zeros(2, 4, 4));
        bytes.pop();
        assert!(matches!(rvid_from_bytes(&bytes), Err(Error::Truncated { .. })));
    }

    #[test]
    fn rvid_black_video_payload_is_zeros() {
        let bytes = rvid_to_bytes(&VideoTensor::zeros(1, 2, 2));
        assert!(bytes[20..].iter().all(|&b| b == 0));
        assert!(rvid_from_bytes(&bytes).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rvid_rejects_bad_magic_and_zero_dims() {
        let mut bytes = rvid_to_bytes(&VideoTensor::zeros(1, 1, 1));
        bytes[0] = b'X';
        assert!(matches!(rvid_from_bytes(&bytes), Err(Error::Format(_))));
        let mut hdr = Vec::new();
        hdr.extend_from_slice(b"RVID");
        for v in [1u32, 0, 4, 4] {
            hdr.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(rvid_from_bytes(&hdr), Err(Error::Geometry(_))));
    }

    #[test]
    fn rflo_round_trip() {
        let mut f = FlowField::zeros(2, 3, 3);
        f.set(0, 1, 1, 1, 0.25);
        f.set(1, 1, 2, 0, -0.5);
        let back = rflo_from_bytes(&rflo_to_bytes(&f)).unwrap();
        assert_eq!(back, f);
    }
}
