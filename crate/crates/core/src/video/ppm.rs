use std::fs;
use std::path::{Path, PathBuf};

use super::patch::PatchSpec;
use super::volume::VideoTensor;
use crate::error::{Error, Result};

/// Brightness applied to pixels of unselected tokens in overlay mode.
pub const DIM_FACTOR: f64 = 0.25;

/// Binary P6 image of one frame; `selected`, when given, dims every pixel
/// whose token is unselected.
pub fn frame_ppm(video: &VideoTensor, frame: usize, overlay: Option<(&PatchSpec, &[bool])>) -> Result<Vec<u8>> {
    if frame >= video.frames() {
        return Err(Error::invalid(format!("frame {frame} out of range")));
    }
    if let Some((spec, sel)) = overlay {
        if spec.frames() != video.frames() || spec.height() != video.height() || spec.width() != video.width() {
            return Err(Error::Geometry("overlay grid does not cover the video".into()));
        }
        if sel.len() != spec.num_tokens() {
            return Err(Error::shape(format!("overlay has {} flags for {} tokens", sel.len(), spec.num_tokens())));
        }
    }
    let (h, w) = (video.height(), video.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            let scale = match overlay {
                Some((spec, sel)) if !sel[spec.token_of_pixel(frame, y, x)] => DIM_FACTOR,
                _ => 1.0,
            };
            for c in 0..3 {
                out.push((video.get(c, frame, y, x) * scale * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Writes `frame_0000.ppm`, `frame_0001.ppm`, … into `dir`.
pub fn export_ppm(
    video: &VideoTensor,
    dir: impl AsRef<Path>,
    overlay: Option<(&PatchSpec, &[bool])>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(video.frames());
    for f in 0..video.frames() {
        let path = dir.join(format!("frame_{f:04}.ppm"));
        fs::write(&path, frame_ppm(video, f, overlay)?)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::patch_grid;

    fn payload(ppm: &[u8]) -> &[u8] {
        // Header is three newline-terminated lines.
        let mut seen = 0;
        let start = ppm.iter().position(|&b| {
            seen += (b == b'\n') as usize;
            seen == 3
        });
        &ppm[start.unwrap() + 1..]
    }

    #[test]
    fn white_pixel() {
        let v = VideoTensor::new(1, 1, 1, vec![1.0; 3]).unwrap();
        let ppm = frame_ppm(&v, 0, None).unwrap();
        assert!(ppm.starts_with(b"P6\n1 1\n255\n"));
        assert_eq!(payload(&ppm), &[255, 255, 255]);
    }

    #[test]
    fn overlay_all_and_none() {
        let v = VideoTensor::new(2, 4, 4, vec![0.8; 3 * 2 * 16]).unwrap();
        let spec = patch_grid(2, 4, 4, [2, 2, 2]).unwrap();
        let plain = frame_ppm(&v, 1, None).unwrap();
        let all = vec![true; spec.num_tokens()];
        assert_eq!(frame_ppm(&v, 1, Some((&spec, &all))).unwrap(), plain);
        let none = vec![false; spec.num_tokens()];
        let dimmed = frame_ppm(&v, 1, Some((&spec, &none))).unwrap();
        let want = (0.8f64 * 0.25 * 255.0).round() as u8;
        assert!(payload(&dimmed).iter().all(|&b| b == want));
    }
}
