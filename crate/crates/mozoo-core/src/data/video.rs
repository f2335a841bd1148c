//! Byte-level frame buffers and their tensor conversions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One RGB frame, interleaved bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// One binary mask frame with values in {0, 255}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskFrame {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl MaskFrame {
    pub fn subject_pixels(&self) -> usize {
        self.values.iter().filter(|&&v| v == 255).count()
    }
}

/// Bytes to normalized pixels in [-1, 1]: `[frames, H, W, 3]`.
pub fn video_to_tensor(frames: &[Frame]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Contract("empty video".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(frames.len() * h * w * 3);
    for frame in frames {
        if frame.height != h || frame.width != w {
            return Err(Error::Shape("video frames disagree on size".into()));
        }
        data.extend(frame.rgb.iter().map(|&b| b as f32 / 255.0 * 2.0 - 1.0));
    }
    Tensor::new(&[frames.len(), h, w, 3], data)
}

/// Round half to even, the tie-breaking rule used when writing bytes.
fn round_half_even(v: f64) -> u8 {
    let floor = v.floor();
    let frac = v - floor;
    let low = floor as i64;
    let byte = if frac > 0.5 {
        low + 1
    } else if frac < 0.5 {
        low
    } else if low % 2 == 0 {
        low
    } else {
        low + 1
    };
    byte.clamp(0, 255) as u8
}

/// Normalized pixels back to bytes, clamped to [0, 255] and rounded half
/// to even.
pub fn tensor_to_frames(video: &Tensor) -> Result<Vec<Frame>> {
    let shape = video.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::Shape(format!(
            "expected [frames, H, W, 3], got {shape:?}"
        )));
    }
    let (frames, h, w) = (shape[0], shape[1], shape[2]);
    let per = h * w * 3;
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let rgb = video.data()[f * per..(f + 1) * per]
            .iter()
            .map(|&v| round_half_even(((v as f64 + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0))
            .collect();
        out.push(Frame {
            width: w,
            height: h,
            rgb,
        });
    }
    Ok(out)
}

/// Mask bytes to a `[1, H, W, 1]` tensor of {0, 1}.
pub fn mask_to_tensor(mask: &MaskFrame) -> Result<Tensor> {
    let data = mask
        .values
        .iter()
        .map(|&v| if v == 255 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(&[1, mask.height, mask.width, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_roundtrip_through_tensor_is_exact() {
        let frame = Frame {
            width: 4,
            height: 2,
            rgb: (0..24).map(|v| (v * 11 % 256) as u8).collect(),
        };
        let tensor = video_to_tensor(std::slice::from_ref(&frame)).unwrap();
        let back = tensor_to_frames(&tensor).unwrap();
        assert_eq!(back[0], frame);
    }

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(round_half_even(1.5), 2);
        assert_eq!(round_half_even(2.5), 2);
        assert_eq!(round_half_even(2.4999), 2);
        assert_eq!(round_half_even(-3.0), 0);
        assert_eq!(round_half_even(300.0), 255);
    }
}
