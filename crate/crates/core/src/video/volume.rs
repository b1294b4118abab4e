use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// RGB video, channel-major `3 x F x H x W`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl VideoTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Geometry("video extents must be positive".into()));
        }
        if data.len() != 3 * frames * height * width {
            return Err(Error::shape(format!(
                "video {frames}x{height}x{width} needs {} values, got {}",
                3 * frames * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(VideoTensor { frames, height, width, data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        VideoTensor { frames, height, width, data: vec![0.0; 3 * frames * height * width] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, c: usize, f: usize, y: usize, x: usize) -> usize {
        ((c * self.frames + f) * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, f: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(c, f, y, x)]
    }

    /// Sets a pixel, clamping into `[0, 1]`.
    pub fn set(&mut self, c: usize, f: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(c, f, y, x);
        self.data[o] = v.clamp(0.0, 1.0);
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.frames, self.height, self.width], self.data.clone()).expect("shape")
    }

    /// Copies frames `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::invalid(format!("frames {start}..{} outside 0..{}", start + len, self.frames)));
        }
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(3 * len * plane);
        for c in 0..3 {
            let base = (c * self.frames + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(VideoTensor { frames: len, height: self.height, width: self.width, data })
    }

    /// Extends the clip to `frames` by repeating its last frame.
    pub fn pad_frames(&self, frames: usize) -> Self {
        if frames <= self.frames {
            return self.clone();
        }
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(3 * frames * plane);
        for c in 0..3 {
            let base = c * self.frames * plane;
            data.extend_from_slice(&self.data[base..base + self.frames * plane]);
            let last = base + (self.frames - 1) * plane;
            for _ in self.frames..frames {
                data.extend_from_slice(&self.data[last..last + plane]);
            }
        }
        VideoTensor { frames, height: self.height, width: self.width, data }
    }
}

/// Per-pixel displacement `(x, y)` between adjacent frames, `2 x T x H x W`,
/// normalized to `[-1, 1]`. Frame 0 carries no motion and is all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Geometry("flow extents must be positive".into()));
        }
        if data.len() != 2 * frames * height * width {
            return Err(Error::shape("flow payload length does not match 2 x T x H x W"));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("flow value {v} outside [-1, 1]")));
        }
        Ok(FlowField { frames, height, width, data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        FlowField { frames, height, width, data: vec![0.0; 2 * frames * height * width] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, c: usize, f: usize, y: usize, x: usize) -> usize {
        ((c * self.frames + f) * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, f: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(c, f, y, x)]
    }

    pub fn set(&mut self, c: usize, f: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(c, f, y, x);
        self.data[o] = v.clamp(-1.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(VideoTensor::new(1, 1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(VideoTensor::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn slice_and_pad() {
        let mut v = VideoTensor::zeros(3, 2, 2);
        v.set(1, 2, 1, 1, 0.5);
        let s = v.slice_frames(2, 1).unwrap();
        assert_eq!(s.get(1, 0, 1, 1), 0.5);
        let p = s.pad_frames(4);
        assert_eq!(p.frames(), 4);
        assert_eq!(p.get(1, 3, 1, 1), 0.5);
        assert!(v.slice_frames(2, 2).is_err());
    }
}
