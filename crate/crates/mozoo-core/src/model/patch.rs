//! Pixel-patch tokenization. Videos are `[frames, H, W, C]` tensors; a
//! `(p_t, p_h, p_w)` patch grid turns them into frame-major, then row-major
//! token rows carrying the patch values in raster order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Latent position of one token: latent frame plus spatial site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSite {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

fn check_dims(video: &Tensor, patch: (usize, usize, usize)) -> Result<(usize, usize, usize, usize)> {
    let shape = video.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "patchify expects [frames, H, W, C], got {shape:?}"
        )));
    }
    let (frames, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (pt, ph, pw) = patch;
    if pt == 0 || ph == 0 || pw == 0 {
        return Err(Error::Shape("patch sizes must be positive".into()));
    }
    if frames % pt != 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::Shape(format!(
            "patch {patch:?} does not divide video dims ({frames}, {h}, {w})"
        )));
    }
    Ok((frames, h, w, c))
}

/// Split a video into non-overlapping patch tokens.
///
/// Returns a `[tokens, p_t * p_h * p_w * C]` tensor and the latent site of
/// each token.
pub fn patchify(
    video: &Tensor,
    patch: (usize, usize, usize),
) -> Result<(Tensor, Vec<TokenSite>)> {
    let (frames, h, w, c) = check_dims(video, patch)?;
    let (pt, ph, pw) = patch;
    let (lf, gh, gw) = (frames / pt, h / ph, w / pw);
    let d = pt * ph * pw * c;
    let tokens = lf * gh * gw;
    let mut data = Vec::with_capacity(tokens * d);
    let mut sites = Vec::with_capacity(tokens);
    let src = video.data();
    for f in 0..lf {
        for r in 0..gh {
            for col in 0..gw {
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let base = (((f * pt + dt) * h + r * ph + dy) * w + col * pw + dx) * c;
                            data.extend_from_slice(&src[base..base + c]);
                        }
                    }
                }
                sites.push(TokenSite { frame: f, row: r, col });
            }
        }
    }
    Ok((Tensor::new(&[tokens, d], data)?, sites))
}

/// Inverse of [`patchify`]: scatter token rows back into a video tensor.
pub fn unpatchify(
    tokens: &Tensor,
    patch: (usize, usize, usize),
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Result<Tensor> {
    let (pt, ph, pw) = patch;
    if frames % pt != 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::Shape(format!(
            "patch {patch:?} does not divide video dims ({frames}, {h}, {w})"
        )));
    }
    let (lf, gh, gw) = (frames / pt, h / ph, w / pw);
    let d = pt * ph * pw * c;
    if tokens.shape() != [lf * gh * gw, d] {
        return Err(Error::Shape(format!(
            "unpatchify expects [{}, {d}], got {:?}",
            lf * gh * gw,
            tokens.shape()
        )));
    }
    let mut data = vec![0.0f32; frames * h * w * c];
    let src = tokens.data();
    let mut n = 0usize;
    for f in 0..lf {
        for r in 0..gh {
            for col in 0..gw {
                let mut k = n * d;
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let base = (((f * pt + dt) * h + r * ph + dy) * w + col * pw + dx) * c;
                            data[base..base + c].copy_from_slice(&src[k..k + c]);
                            k += c;
                        }
                    }
                }
                n += 1;
            }
        }
    }
    Tensor::new(&[frames, h, w, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_patch_carries_all_values_in_raster_order() {
        let video = Tensor::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (tokens, sites) = patchify(&video, (1, 2, 2)).unwrap();
        assert_eq!(tokens.shape(), &[1, 4]);
        assert_eq!(tokens.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sites, vec![TokenSite { frame: 0, row: 0, col: 0 }]);
    }

    #[test]
    fn token_index_map_is_frame_major_then_row_major() {
        let video = Tensor::new(&[2, 4, 4, 3], (0..96).map(|v| v as f32).collect()).unwrap();
        let (tokens, sites) = patchify(&video, (1, 2, 2)).unwrap();
        assert_eq!(tokens.shape()[0], 8);
        assert_eq!(sites[5], TokenSite { frame: 1, row: 0, col: 1 });
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let video = Tensor::new(&[2, 4, 6, 3], (0..144).map(|v| v as f32 * 0.5).collect()).unwrap();
        let (tokens, _) = patchify(&video, (2, 2, 3)).unwrap();
        let back = unpatchify(&tokens, (2, 2, 3), 2, 4, 6, 3).unwrap();
        assert_eq!(back.data(), video.data());
    }

    #[test]
    fn non_divisible_dims_are_shape_errors() {
        let video = Tensor::zeros(&[1, 5, 4, 3]);
        assert!(patchify(&video, (1, 2, 2)).is_err());
    }
}
