//! Multi-axis rotary position embedding with role-aware coordinate
//! remapping.
//!
//! Tokens carry a `(t, h, w)` coordinate that depends on their functional
//! role, not their position in the packed sequence: the target and the mesh
//! stream share coordinates frame for frame, video references are pushed to
//! negative temporal indices by a fixed offset, image references sit at
//! `t = -1`, and mask tokens are anchored at `t = 0`.

use crate::attention::{Segment, SegmentLayout};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Functional role of a token in the packed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Target,
    Mesh,
    Mask,
    RefVideo,
    RefImage,
}

/// Reference modality for a sample; video and image references never
/// co-occur.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefModality {
    Video,
    Image,
}

/// Integer rotary coordinate of one token. `t` goes negative for reference
/// tokens; `h`/`w` stay non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoleCoord {
    pub t: i64,
    pub h: i64,
    pub w: i64,
}

/// Rotary configuration: how the head channels split across the three axes
/// and how reference tokens are offset in time.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base_frequency: f64,
    /// Rotary pair counts per axis `(p_t, p_h, p_w)`; must sum to
    /// `head_dim / 2`.
    pub pair_split: (usize, usize, usize),
    /// Temporal offset applied to video-reference tokens.
    pub delta: i64,
}

impl RopeConfig {
    /// Near-even pair split with the temporal axis taking the remainder,
    /// base 10000, and the given reference offset.
    pub fn for_head_dim(head_dim: usize, delta: i64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim must be even and positive, got {head_dim}"
            )));
        }
        let pairs = head_dim / 2;
        let third = pairs / 3;
        if third == 0 {
            return Err(Error::Config(format!(
                "head_dim {head_dim} leaves no pairs for some axis"
            )));
        }
        let cfg = Self {
            head_dim,
            base_frequency: 10000.0,
            pair_split: (pairs - 2 * third, third, third),
            delta,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (pt, ph, pw) = self.pair_split;
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if pt + ph + pw != self.head_dim / 2 {
            return Err(Error::Config(format!(
                "pair split ({pt},{ph},{pw}) does not cover head_dim {} / 2",
                self.head_dim
            )));
        }
        if pt == 0 || ph == 0 || pw == 0 {
            return Err(Error::Config("every axis needs at least one pair".into()));
        }
        if !(self.base_frequency > 0.0) {
            return Err(Error::Config("base_frequency must be positive".into()));
        }
        if self.delta <= 0 {
            return Err(Error::Config("delta must be positive".into()));
        }
        Ok(())
    }
}

/// Spatial site of a within-frame token index under the layout's grid.
fn site(layout: &SegmentLayout, within_frame: usize) -> (i64, i64) {
    let h = (within_frame / layout.grid_w) as i64;
    let w = (within_frame % layout.grid_w) as i64;
    (h, w)
}

/// Role of every token in the packed sequence, in order.
pub fn roles(layout: &SegmentLayout, ref_modality: RefModality) -> Vec<Role> {
    let mut out = Vec::with_capacity(layout.total_len());
    out.extend(std::iter::repeat(Role::Target).take(layout.target_len()));
    out.extend(std::iter::repeat(Role::Mesh).take(layout.mesh_len()));
    out.extend(std::iter::repeat(Role::Mask).take(layout.mask_len()));
    let ref_role = match ref_modality {
        RefModality::Video => Role::RefVideo,
        RefModality::Image => Role::RefImage,
    };
    out.extend(std::iter::repeat(ref_role).take(layout.ref_len()));
    out
}

/// Assign one rotary coordinate per token of the packed sequence.
///
/// Target and mesh tokens at the same (frame, row, col) get identical
/// coordinates; video-reference frame `t` maps to `t - delta`; image
/// references map to `t = -1`; mask tokens map to `t = 0`.
pub fn assign_coords(
    layout: &SegmentLayout,
    ref_modality: RefModality,
    delta: i64,
) -> Result<Vec<RoleCoord>> {
    layout.validate()?;
    if delta < layout.frames as i64 || delta < layout.ref_frames as i64 {
        return Err(Error::Layout(format!(
            "delta {delta} must be >= frame counts (target {}, reference {})",
            layout.frames, layout.ref_frames
        )));
    }
    if ref_modality == RefModality::Image && layout.ref_frames != 1 {
        return Err(Error::Layout(format!(
            "image reference implies 1 latent frame, layout has {}",
            layout.ref_frames
        )));
    }
    let s = layout.tokens_per_frame();
    let mut coords = Vec::with_capacity(layout.total_len());
    for _segment in [Segment::Target, Segment::Mesh] {
        for i in 0..layout.target_len() {
            let (h, w) = site(layout, i % s);
            coords.push(RoleCoord {
                t: (i / s) as i64,
                h,
                w,
            });
        }
    }
    for i in 0..layout.mask_len() {
        let (h, w) = site(layout, i % s);
        coords.push(RoleCoord { t: 0, h, w });
    }
    for i in 0..layout.ref_len() {
        let (h, w) = site(layout, i % s);
        let t = match ref_modality {
            RefModality::Video => (i / s) as i64 - delta,
            RefModality::Image => -1,
        };
        coords.push(RoleCoord { t, h, w });
    }
    Ok(coords)
}

/// Rotation angles for one coordinate under `cfg`, one angle per rotary
/// pair, temporal pairs first.
fn pair_angles(coord: &RoleCoord, cfg: &RopeConfig, out: &mut [f64]) {
    let (pt, ph, pw) = cfg.pair_split;
    let axes = [(coord.t, pt), (coord.h, ph), (coord.w, pw)];
    let mut k = 0;
    for (value, pairs) in axes {
        for j in 0..pairs {
            let freq = cfg.base_frequency.powf(-(j as f64) / pairs as f64);
            out[k] = value as f64 * freq;
            k += 1;
        }
    }
}

fn rotate_impl(
    x: &Tensor,
    coords: &[RoleCoord],
    cfg: &RopeConfig,
    negate: bool,
) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "rope_rotate expects [tokens, heads, head_dim], got {shape:?}"
        )));
    }
    let (tokens, heads, dh) = (shape[0], shape[1], shape[2]);
    if dh != cfg.head_dim {
        return Err(Error::Config(format!(
            "rope config head_dim {} does not match tensor head_dim {dh}",
            cfg.head_dim
        )));
    }
    cfg.validate()?;
    if coords.len() != tokens {
        return Err(Error::Shape(format!(
            "{} coords for {tokens} tokens",
            coords.len()
        )));
    }
    let pairs = dh / 2;
    let mut angles = vec![0.0f64; pairs];
    let mut out = vec![0.0f32; x.numel()];
    let sign = if negate { -1.0 } else { 1.0 };
    for (ti, coord) in coords.iter().enumerate() {
        pair_angles(coord, cfg, &mut angles);
        for hd in 0..heads {
            let base = (ti * heads + hd) * dh;
            let src = &x.data()[base..base + dh];
            let dst = &mut out[base..base + dh];
            for (j, &angle) in angles.iter().enumerate() {
                let (sin, cos) = (sign * angle).sin_cos();
                let (a, b) = (src[2 * j] as f64, src[2 * j + 1] as f64);
                dst[2 * j] = (a * cos - b * sin) as f32;
                dst[2 * j + 1] = (a * sin + b * cos) as f32;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Rotate query/key channel pairs by angles proportional to each token's
/// coordinates. Negative coordinates rotate by negative angles.
pub fn rope_rotate(x: &Tensor, coords: &[RoleCoord], cfg: &RopeConfig) -> Result<Tensor> {
    rotate_impl(x, coords, cfg, false)
}

/// Backward of `rope_rotate`: rotations are orthogonal, so the adjoint is
/// the rotation by negated angles.
pub fn rope_rotate_backward(
    grad_out: &Tensor,
    coords: &[RoleCoord],
    cfg: &RopeConfig,
) -> Result<Tensor> {
    rotate_impl(grad_out, coords, cfg, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout_2x2() -> SegmentLayout {
        SegmentLayout::new(2, 2, 2, 4, 2).unwrap()
    }

    #[test]
    fn target_and_mesh_share_coordinates() {
        let layout = layout_2x2();
        let coords = assign_coords(&layout, RefModality::Video, 2).unwrap();
        let s = layout.tokens_per_frame();
        for i in 0..layout.target_len() {
            assert_eq!(coords[i], coords[layout.mesh_offset() + i]);
        }
        // target token frame 1, site (1, 0) under a 2x2 grid
        assert_eq!(coords[s + 2], RoleCoord { t: 1, h: 1, w: 0 });
    }

    #[test]
    fn reference_video_is_shifted_by_delta() {
        let layout = layout_2x2();
        let coords = assign_coords(&layout, RefModality::Video, 2).unwrap();
        let ref_start = layout.ref_offset();
        assert_eq!(coords[ref_start].t, -2);
        assert_eq!(coords[ref_start + layout.tokens_per_frame()].t, -1);
    }

    #[test]
    fn image_reference_and_mask_anchor() {
        let mut layout = layout_2x2();
        layout.ref_frames = 1;
        let coords = assign_coords(&layout, RefModality::Image, 2).unwrap();
        assert_eq!(coords[layout.ref_offset()], RoleCoord { t: -1, h: 0, w: 0 });
        assert_eq!(coords[layout.mask_offset()], RoleCoord { t: 0, h: 0, w: 0 });
    }

    #[test]
    fn small_delta_is_rejected() {
        let layout = layout_2x2();
        assert!(assign_coords(&layout, RefModality::Video, 1).is_err());
    }

    #[test]
    fn image_modality_needs_single_ref_frame() {
        let layout = layout_2x2();
        assert!(assign_coords(&layout, RefModality::Image, 2).is_err());
    }

    #[test]
    fn pair_split_mismatch_is_config_error() {
        let cfg = RopeConfig {
            head_dim: 8,
            base_frequency: 10000.0,
            pair_split: (1, 1, 1),
            delta: 1,
        };
        let x = Tensor::zeros(&[1, 1, 8]);
        let coords = vec![RoleCoord { t: 0, h: 0, w: 0 }];
        assert!(rope_rotate(&x, &coords, &cfg).is_err());
    }

    #[test]
    fn zero_coordinates_leave_input_untouched() {
        let cfg = RopeConfig::for_head_dim(12, 4).unwrap();
        let mut rng = crate::rng::substream(0, "rope");
        let x = Tensor::randn(&[5, 2, 12], &mut rng);
        let coords = vec![RoleCoord { t: 0, h: 0, w: 0 }; 5];
        let y = rope_rotate(&x, &coords, &cfg).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn unit_temporal_coordinate_rotates_first_pair_one_radian() {
        // One pair per axis with base frequency 1; pair 0 of the temporal
        // axis turns by exactly coord.t radians.
        let cfg = RopeConfig {
            head_dim: 6,
            base_frequency: 1.0,
            pair_split: (1, 1, 1),
            delta: 1,
        };
        let x = Tensor::new(&[1, 1, 6], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let coords = vec![RoleCoord { t: 1, h: 0, w: 0 }];
        let y = rope_rotate(&x, &coords, &cfg).unwrap();
        let (sin, cos) = 1.0f64.sin_cos();
        assert!((y.data()[0] as f64 - cos).abs() < 1e-7);
        assert!((y.data()[1] as f64 - sin).abs() < 1e-7);
        // other axes saw coordinate zero
        assert_eq!(&y.data()[2..], &x.data()[2..]);
    }

    #[test]
    fn rotation_preserves_pair_norms() {
        let cfg = RopeConfig::for_head_dim(12, 8).unwrap();
        let mut rng = crate::rng::substream(1, "rope-norm");
        let x = Tensor::randn(&[6, 2, 12], &mut rng);
        let coords: Vec<RoleCoord> = (0..6)
            .map(|i| RoleCoord {
                t: i as i64 - 3,
                h: (i % 3) as i64,
                w: (i % 2) as i64,
            })
            .collect();
        let y = rope_rotate(&x, &coords, &cfg).unwrap();
        for tok in 0..6 {
            for hd in 0..2 {
                let base = (tok * 2 + hd) * 12;
                for j in 0..6 {
                    let nx = x.data()[base + 2 * j].hypot(x.data()[base + 2 * j + 1]);
                    let ny = y.data()[base + 2 * j].hypot(y.data()[base + 2 * j + 1]);
                    assert!((nx - ny).abs() < 1e-5);
                }
            }
        }
    }
}
