//! Procedural scene specs and the 2D rasterizer behind the paired-triplet
//! generator.
//!
//! A scene is a textured subject translating over a vertical-gradient
//! background. Subject centers are rounded to integer pixels and both the
//! silhouette and the texture are functions of integer object-local
//! coordinates, so moving the subject never changes which texels it shows:
//! texture rides rigidly with the shape and palette histograms over the
//! mask are exactly translation-invariant.

use super::video::{Frame, MaskFrame};
use crate::error::{Error, Result};
use crate::rng::substream;
use rand::Rng;

pub const MESH_GRAY: Rgb = Rgb(128, 128, 128);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rgb(pub u8, pub u8, pub u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Blob,
    Quadruped,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Blob => "blob",
            ShapeKind::Quadruped => "quadruped",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeKind::Ellipse),
            "blob" => Ok(ShapeKind::Blob),
            "quadruped" => Ok(ShapeKind::Quadruped),
            _ => Err(Error::Parse(format!("unknown shape kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Stripes,
    Spots,
    Checker,
    Noise,
}

impl TextureKind {
    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Stripes => "stripes",
            TextureKind::Spots => "spots",
            TextureKind::Checker => "checker",
            TextureKind::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(TextureKind::Stripes),
            "spots" => Ok(TextureKind::Spots),
            "checker" => Ok(TextureKind::Checker),
            "noise" => Ok(TextureKind::Noise),
            _ => Err(Error::Parse(format!("unknown texture kind {s:?}"))),
        }
    }
}

/// Parametric subject path: linear drift plus an optional sinusoidal bob.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    /// `(amplitude_px, period_frames)`
    pub bob: Option<(f64, f64)>,
}

impl Trajectory {
    /// Integer subject center at frame `f`.
    pub fn center_at(&self, frame: usize) -> (i64, i64) {
        let f = frame as f64;
        let x = self.start.0 + self.velocity.0 * f;
        let mut y = self.start.1 + self.velocity.1 * f;
        if let Some((amp, period)) = self.bob {
            y += amp * (std::f64::consts::TAU * f / period).sin();
        }
        (x.round() as i64, y.round() as i64)
    }
}

/// Everything that determines one rendered scene, bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape: ShapeKind,
    pub texture: TextureKind,
    pub palette: [Rgb; 3],
    pub trajectory: Trajectory,
    /// Vertical gradient `(top, bottom)`.
    pub background: (Rgb, Rgb),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Spec("frames and dims must be positive".into()));
        }
        if self.palette[0] == self.palette[1]
            || self.palette[0] == self.palette[2]
            || self.palette[1] == self.palette[2]
        {
            return Err(Error::Spec("palette colors must be distinct".into()));
        }
        let geo = SubjectGeometry::from_seed(self.seed, self.shape, self.height, self.width);
        let (ex, ey) = geo.extent();
        for f in 0..self.frames {
            let (cx, cy) = self.trajectory.center_at(f);
            if cx - ex < 0
                || cx + ex >= self.width as i64
                || cy - ey < 0
                || cy + ey >= self.height as i64
            {
                return Err(Error::Spec(format!(
                    "subject leaves the frame at frame {f} (center {cx},{cy}, extent {ex}x{ey})"
                )));
            }
        }
        Ok(())
    }

    /// Draw a random in-bounds scene. Texture, shape, palette and
    /// trajectory all derive from `seed`.
    pub fn sample(seed: u64, frames: usize, height: usize, width: usize) -> Result<Self> {
        let mut rng = substream(seed, "scene");
        let shape = match rng.gen_range(0..3) {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Blob,
            _ => ShapeKind::Quadruped,
        };
        let texture = match rng.gen_range(0..4) {
            0 => TextureKind::Stripes,
            1 => TextureKind::Spots,
            2 => TextureKind::Checker,
            _ => TextureKind::Noise,
        };
        let palette = random_palette(&mut rng);
        let background = (
            Rgb(
                rng.gen_range(10..80),
                rng.gen_range(10..80),
                rng.gen_range(60..140),
            ),
            Rgb(
                rng.gen_range(20..100),
                rng.gen_range(60..140),
                rng.gen_range(10..80),
            ),
        );
        let geo = SubjectGeometry::from_seed(seed, shape, height, width);
        let mut traj_rng = substream(seed, "trajectory");
        let trajectory = sample_trajectory(&mut traj_rng, &geo, frames, height, width)?;
        let spec = Self {
            seed,
            frames,
            height,
            width,
            shape,
            texture,
            palette,
            trajectory,
            background,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Background color of a pixel row.
    pub fn background_at(&self, y: usize) -> Rgb {
        let t = if self.height <= 1 {
            0.0
        } else {
            y as f64 / (self.height - 1) as f64
        };
        let lerp = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * t).round() as u8;
        let (top, bot) = self.background;
        Rgb(lerp(top.0, bot.0), lerp(top.1, bot.1), lerp(top.2, bot.2))
    }
}

fn random_palette(rng: &mut impl Rng) -> [Rgb; 3] {
    // bright, mutually distant colors
    loop {
        let c: Vec<Rgb> = (0..3)
            .map(|_| {
                Rgb(
                    rng.gen_range(40..=255),
                    rng.gen_range(40..=255),
                    rng.gen_range(40..=255),
                )
            })
            .collect();
        let dist = |a: Rgb, b: Rgb| {
            (a.0 as i32 - b.0 as i32).abs()
                + (a.1 as i32 - b.1 as i32).abs()
                + (a.2 as i32 - b.2 as i32).abs()
        };
        if dist(c[0], c[1]) > 90 && dist(c[0], c[2]) > 90 && dist(c[1], c[2]) > 90 {
            return [c[0], c[1], c[2]];
        }
    }
}

/// Sample a trajectory whose rounded centers stay inside the frame.
pub(crate) fn sample_trajectory(
    rng: &mut impl Rng,
    geo: &SubjectGeometry,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Trajectory> {
    let (ex, ey) = geo.extent();
    let (ex, ey) = (ex as f64 + 1.0, ey as f64 + 1.0);
    let (w, h) = (width as f64, height as f64);
    if 2.0 * ex + 2.0 >= w || 2.0 * ey + 4.0 >= h {
        return Err(Error::Spec(format!(
            "{}x{} frame too small for the subject",
            width, height
        )));
    }
    let bob_amp = if rng.gen_bool(0.5) {
        Some((rng.gen_range(0.5..1.5), rng.gen_range(4.0..12.0)))
    } else {
        None
    };
    let margin_y = ey + bob_amp.map(|(a, _)| a).unwrap_or(0.0) + 1.0;
    let sx = rng.gen_range(ex..w - ex);
    let sy = rng.gen_range(margin_y..h - margin_y);
    let tx = rng.gen_range(ex..w - ex);
    let ty = rng.gen_range(margin_y..h - margin_y);
    let n = (frames.max(2) - 1) as f64;
    Ok(Trajectory {
        start: (sx, sy),
        velocity: ((tx - sx) / n, (ty - sy) / n),
        bob: bob_amp,
    })
}

// ---------------------------------------------------------------------------
// Subject geometry and texture, in object-local integer coordinates
// ---------------------------------------------------------------------------

/// Shape parameters drawn from the spec seed.
#[derive(Debug, Clone)]
pub(crate) struct SubjectGeometry {
    kind: ShapeKind,
    /// base radius in pixels
    r0: f64,
    /// ellipse half-axes
    axes: (f64, f64),
    /// blob harmonics (amplitude, phase) for k = 2..=4
    harmonics: [(f64, f64); 3],
}

impl SubjectGeometry {
    pub fn from_seed(seed: u64, kind: ShapeKind, height: usize, width: usize) -> Self {
        let mut rng = substream(seed, "subject-shape");
        let r0 = height.min(width) as f64 * rng.gen_range(0.14..0.18);
        let axes = (r0 * rng.gen_range(1.0..1.3), r0 * rng.gen_range(0.6..0.9));
        let harmonics = [
            (rng.gen_range(0.05..0.15), rng.gen_range(0.0..std::f64::consts::TAU)),
            (rng.gen_range(0.03..0.10), rng.gen_range(0.0..std::f64::consts::TAU)),
            (rng.gen_range(0.02..0.08), rng.gen_range(0.0..std::f64::consts::TAU)),
        ];
        Self {
            kind,
            r0,
            axes,
            harmonics,
        }
    }

    /// Conservative half-extent of the silhouette, in pixels.
    pub fn extent(&self) -> (i64, i64) {
        match self.kind {
            ShapeKind::Ellipse => (self.axes.0.ceil() as i64 + 1, self.axes.1.ceil() as i64 + 1),
            ShapeKind::Blob => {
                let amp: f64 = self.harmonics.iter().map(|(a, _)| a).sum();
                let r = self.r0 * (1.0 + amp);
                (r.ceil() as i64 + 1, r.ceil() as i64 + 1)
            }
            ShapeKind::Quadruped => (
                (self.r0 * 1.5).ceil() as i64 + 1,
                (self.r0 * 1.1).ceil() as i64 + 1,
            ),
        }
    }

    /// Silhouette membership of an object-local pixel.
    pub fn contains(&self, u: i64, v: i64) -> bool {
        let (x, y) = (u as f64, v as f64);
        match self.kind {
            ShapeKind::Ellipse => {
                let (a, b) = self.axes;
                (x / a) * (x / a) + (y / b) * (y / b) <= 1.0
            }
            ShapeKind::Blob => {
                let d = x.hypot(y);
                if d == 0.0 {
                    return true;
                }
                let theta = y.atan2(x);
                let mut r = 1.0;
                for (k, (amp, phase)) in self.harmonics.iter().enumerate() {
                    r += amp * ((k as f64 + 2.0) * theta + phase).cos();
                }
                d <= self.r0 * r
            }
            ShapeKind::Quadruped => {
                let r = self.r0;
                // body
                let (a, b) = (r, r * 0.55);
                if (x / a) * (x / a) + (y / b) * (y / b) <= 1.0 {
                    return true;
                }
                // head
                let (hx, hy) = (x - r * 1.05, y + r * 0.35);
                if hx.hypot(hy) <= r * 0.4 {
                    return true;
                }
                // legs
                let leg_w = r * 0.16;
                for off in [-0.75, -0.3, 0.3, 0.75] {
                    let lx = x - off * r;
                    if lx.abs() <= leg_w && y >= r * 0.2 && y <= r * 1.05 {
                        return true;
                    }
                }
                // tail
                let (tx, ty) = (x + r * 1.15, y + r * 0.15);
                tx.hypot(ty) <= r * 0.22
            }
        }
    }
}

fn mix(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

fn hash2(u: i64, v: i64, salt: u64) -> u64 {
    mix((u as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (v as u64).rotate_left(32) ^ salt)
}

/// Texture parameters drawn from the spec seed.
#[derive(Debug, Clone)]
pub(crate) struct SubjectTexture {
    kind: TextureKind,
    palette: [Rgb; 3],
    band: i64,
    cell: i64,
    spot_grid: i64,
    spot_radius2: i64,
    salt: u64,
}

impl SubjectTexture {
    pub fn from_spec(spec: &SceneSpec) -> Self {
        let mut rng = substream(spec.seed, "subject-texture");
        Self {
            kind: spec.texture,
            palette: spec.palette,
            band: rng.gen_range(2..=3),
            cell: rng.gen_range(2..=3),
            spot_grid: rng.gen_range(3..=4),
            spot_radius2: rng.gen_range(1..=2),
            salt: rng.gen(),
        }
    }

    /// Palette color of an object-local pixel; integer arithmetic only, so
    /// the mapping is exactly rigid under subject translation.
    pub fn color(&self, u: i64, v: i64) -> Rgb {
        let p = &self.palette;
        match self.kind {
            TextureKind::Stripes => {
                let idx = (u + v).div_euclid(self.band).rem_euclid(3);
                p[idx as usize]
            }
            TextureKind::Checker => {
                let idx =
                    (u.div_euclid(self.cell) + v.div_euclid(self.cell)).rem_euclid(2);
                p[idx as usize]
            }
            TextureKind::Spots => {
                let g = self.spot_grid;
                let (cu, cv) = (u.div_euclid(g), v.div_euclid(g));
                let h = hash2(cu, cv, self.salt);
                let (ox, oy) = ((h % g as u64) as i64, ((h >> 8) % g as u64) as i64);
                let (du, dv) = (u - (cu * g + ox), v - (cv * g + oy));
                if du * du + dv * dv <= self.spot_radius2 {
                    p[1 + (h >> 16 & 1) as usize]
                } else {
                    p[0]
                }
            }
            TextureKind::Noise => p[(hash2(u, v, self.salt) % 3) as usize],
        }
    }
}

/// Rendered passes of one frame: textured target, flat-gray mesh, and the
/// silhouette mask.
pub(crate) fn render_frame(
    spec: &SceneSpec,
    geo: &SubjectGeometry,
    tex: &SubjectTexture,
    center: (i64, i64),
) -> (Frame, Frame, MaskFrame) {
    let (w, h) = (spec.width, spec.height);
    let mut target = vec![0u8; w * h * 3];
    let mut mesh = vec![0u8; w * h * 3];
    let mut mask = vec![0u8; w * h];
    for y in 0..h {
        let bg = spec.background_at(y);
        for x in 0..w {
            let (u, v) = (x as i64 - center.0, y as i64 - center.1);
            let i = (y * w + x) * 3;
            if geo.contains(u, v) {
                let c = tex.color(u, v);
                target[i..i + 3].copy_from_slice(&[c.0, c.1, c.2]);
                mesh[i..i + 3].copy_from_slice(&[MESH_GRAY.0, MESH_GRAY.1, MESH_GRAY.2]);
                mask[y * w + x] = 255;
            } else {
                target[i..i + 3].copy_from_slice(&[bg.0, bg.1, bg.2]);
                mesh[i..i + 3].copy_from_slice(&[bg.0, bg.1, bg.2]);
            }
        }
    }
    (
        Frame {
            width: w,
            height: h,
            rgb: target,
        },
        Frame {
            width: w,
            height: h,
            rgb: mesh,
        },
        MaskFrame {
            width: w,
            height: h,
            values: mask,
        },
    )
}
