//! Reference-alignment metrics over byte frames: PSNR, single-scale SSIM
//! on BT.601 luma, a temporal-consistency score, and color-histogram
//! distances for texture-transfer checks.

use crate::data::{Frame, MaskFrame};
use crate::error::{Error, Result};
use std::io::Write;

/// PSNR of identical inputs, reported instead of infinity.
pub const PSNR_SENTINEL: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn check_same_geometry(a: &[Frame], b: &[Frame]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "videos carry {} vs {} frames",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Contract("empty video".into()));
    }
    for (fa, fb) in a.iter().zip(b) {
        if fa.width != fb.width || fa.height != fb.height {
            return Err(Error::Shape(format!(
                "frame sizes differ: {}x{} vs {}x{}",
                fa.width, fa.height, fb.width, fb.height
            )));
        }
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all pixels, frames and channels,
/// accumulated in f64. Identical inputs return the 99.0 sentinel.
pub fn psnr(a: &[Frame], b: &[Frame]) -> Result<f64> {
    check_same_geometry(a, b)?;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for (fa, fb) in a.iter().zip(b) {
        for (&x, &y) in fa.rgb.iter().zip(&fb.rgb) {
            let d = x as f64 - y as f64;
            acc += d * d;
        }
        count += fa.rgb.len();
    }
    let mse = acc / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// PSNR restricted to pixels where the per-frame mask is set.
pub fn psnr_masked(a: &[Frame], b: &[Frame], masks: &[MaskFrame]) -> Result<f64> {
    check_same_geometry(a, b)?;
    if masks.len() != a.len() {
        return Err(Error::Shape(format!(
            "{} masks for {} frames",
            masks.len(),
            a.len()
        )));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for ((fa, fb), mask) in a.iter().zip(b).zip(masks) {
        for (i, &m) in mask.values.iter().enumerate() {
            if m != 255 {
                continue;
            }
            for c in 0..3 {
                let d = fa.rgb[i * 3 + c] as f64 - fb.rgb[i * 3 + c] as f64;
                acc += d * d;
            }
            count += 3;
        }
    }
    if count == 0 {
        return Err(Error::Contract("masks select no pixels".into()));
    }
    let mse = acc / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// ITU BT.601 luma of one frame.
fn luma(frame: &Frame) -> Vec<f64> {
    frame
        .rgb
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, slot) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *slot = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *slot;
    }
    for slot in k.iter_mut() {
        *slot /= sum;
    }
    k
}

/// Gaussian-weighted window moments at every valid center; returns the
/// per-window SSIM map together with its dimensions.
fn ssim_map(a: &Frame, b: &Frame) -> Result<(Vec<f64>, usize, usize)> {
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "frame {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let la = luma(a);
    let lb = luma(b);
    let kernel = gaussian_kernel();
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut map = Vec::with_capacity(ow * oh);
    for cy in 0..oh {
        for cx in 0..ow {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..SSIM_WINDOW {
                let row = (cy + dy) * w + cx;
                let wy = kernel[dy];
                for dx in 0..SSIM_WINDOW {
                    let weight = wy * kernel[dx];
                    let va = la[row + dx];
                    let vb = lb[row + dx];
                    mu_a += weight * va;
                    mu_b += weight * vb;
                    aa += weight * va * va;
                    bb += weight * vb * vb;
                    ab += weight * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            map.push(num / den);
        }
    }
    Ok((map, ow, oh))
}

/// Single-scale SSIM on luma: 11x11 Gaussian window with sigma 1.5, the
/// standard constants, mean over windows and frames.
pub fn ssim(a: &[Frame], b: &[Frame]) -> Result<f64> {
    check_same_geometry(a, b)?;
    let mut total = 0.0f64;
    for (fa, fb) in a.iter().zip(b) {
        let (map, _, _) = ssim_map(fa, fb)?;
        total += map.iter().sum::<f64>() / map.len() as f64;
    }
    Ok(total / a.len() as f64)
}

/// SSIM averaged only over windows whose center pixel is masked.
pub fn ssim_masked(a: &[Frame], b: &[Frame], masks: &[MaskFrame]) -> Result<f64> {
    check_same_geometry(a, b)?;
    if masks.len() != a.len() {
        return Err(Error::Shape(format!(
            "{} masks for {} frames",
            masks.len(),
            a.len()
        )));
    }
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for ((fa, fb), mask) in a.iter().zip(b).zip(masks) {
        let (map, ow, oh) = ssim_map(fa, fb)?;
        for cy in 0..oh {
            for cx in 0..ow {
                if mask.values[(cy + half) * fa.width + cx + half] == 255 {
                    total += map[cy * ow + cx];
                    windows += 1;
                }
            }
        }
    }
    if windows == 0 {
        return Err(Error::Contract("masks select no SSIM windows".into()));
    }
    Ok(total / windows as f64)
}

/// Mean absolute inter-frame difference normalized to [0, 1].
pub fn temporal_smoothness(video: &[Frame]) -> Result<f64> {
    if video.len() < 2 {
        return Err(Error::Contract(
            "temporal smoothness needs at least two frames".into(),
        ));
    }
    check_same_geometry(&video[..video.len() - 1], &video[1..])?;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for pair in video.windows(2) {
        for (&x, &y) in pair[0].rgb.iter().zip(&pair[1].rgb) {
            acc += (x as f64 - y as f64).abs();
        }
        count += pair[0].rgb.len();
    }
    Ok(acc / count as f64 / 255.0)
}

/// Normalized color histogram over masked pixels, `bins` cells per channel.
pub fn color_histogram(
    frames: &[Frame],
    masks: &[MaskFrame],
    bins: usize,
) -> Result<Vec<f64>> {
    if bins == 0 || bins > 256 {
        return Err(Error::Contract(format!("bins {bins} out of range")));
    }
    if frames.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} masks for {} frames",
            masks.len(),
            frames.len()
        )));
    }
    let mut hist = vec![0.0f64; bins * bins * bins];
    let mut count = 0usize;
    let bin = |v: u8| (v as usize * bins) / 256;
    for (frame, mask) in frames.iter().zip(masks) {
        for (i, &m) in mask.values.iter().enumerate() {
            if m != 255 {
                continue;
            }
            let p = &frame.rgb[i * 3..i * 3 + 3];
            hist[(bin(p[0]) * bins + bin(p[1])) * bins + bin(p[2])] += 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("masks select no pixels".into()));
    }
    for h in hist.iter_mut() {
        *h /= count as f64;
    }
    Ok(hist)
}

/// Chi-squared distance between normalized histograms:
/// `0.5 * sum((p - q)^2 / (p + q))`, in [0, 1].
pub fn chi_squared_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "histograms of {} vs {} bins",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0f64;
    for (&a, &b) in p.iter().zip(q) {
        if a + b > 0.0 {
            acc += (a - b) * (a - b) / (a + b);
        }
    }
    Ok(0.5 * acc)
}

/// Per-sample metric rows plus aggregate means.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub smoothness: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<SampleMetrics>,
}

impl MetricReport {
    /// `(psnr, ssim, smoothness)` means over the rows.
    pub fn means(&self) -> (f64, f64, f64) {
        let n = self.rows.len().max(1) as f64;
        let (mut p, mut s, mut m) = (0.0, 0.0, 0.0);
        for row in &self.rows {
            p += row.psnr_db;
            s += row.ssim;
            m += row.smoothness;
        }
        (p / n, s / n, m / n)
    }

    /// CSV rows `sample_id, psnr_db, ssim, smoothness`; the final row holds
    /// the means.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "sample_id,psnr_db,ssim,smoothness")?;
        for row in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                row.sample_id, row.psnr_db, row.ssim, row.smoothness
            )?;
        }
        let (p, s, m) = self.means();
        writeln!(w, "mean,{p},{s},{m}")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_frame(w: usize, h: usize, v: u8) -> Frame {
        Frame {
            width: w,
            height: h,
            rgb: vec![v; w * h * 3],
        }
    }

    fn checker_frame(w: usize, h: usize) -> Frame {
        let mut rgb = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let v = if (x / 2 + y / 2) % 2 == 0 { 230 } else { 20 };
                rgb.extend_from_slice(&[v, v, v]);
            }
        }
        Frame {
            width: w,
            height: h,
            rgb,
        }
    }

    #[test]
    fn psnr_sentinel_on_identical_inputs() {
        let v = vec![checker_frame(16, 16); 2];
        assert_eq!(psnr(&v, &v).unwrap(), PSNR_SENTINEL);
    }

    #[test]
    fn psnr_closed_form_for_constant_offset() {
        let a = vec![flat_frame(16, 16, 100)];
        let b = vec![flat_frame(16, 16, 116)];
        let got = psnr(&a, &b).unwrap();
        let want = 10.0 * (65025.0f64 / 256.0).log10();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!((got - 24.05).abs() < 0.01);
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = vec![checker_frame(16, 16)];
        let b = vec![flat_frame(16, 16, 90)];
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = vec![checker_frame(20, 20)];
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let b = vec![flat_frame(20, 20, 128)];
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_inverted_high_contrast_pattern_is_low() {
        let a = checker_frame(24, 24);
        let inv = Frame {
            width: a.width,
            height: a.height,
            rgb: a.rgb.iter().map(|&v| 255 - v).collect(),
        };
        let score = ssim(&[a], &[inv]).unwrap();
        assert!(score < 0.2, "inverted ssim {score}");
    }

    #[test]
    fn ssim_rejects_small_frames() {
        let a = vec![flat_frame(8, 8, 10)];
        assert!(matches!(ssim(&a, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn smoothness_static_alternating_and_reversal() {
        let black = flat_frame(8, 8, 0);
        let white = flat_frame(8, 8, 255);
        assert_eq!(temporal_smoothness(&[black.clone(), black.clone()]).unwrap(), 0.0);
        let alternating = vec![black.clone(), white.clone(), black.clone(), white.clone()];
        assert_eq!(temporal_smoothness(&alternating).unwrap(), 1.0);
        let mut reversed = alternating.clone();
        reversed.reverse();
        assert_eq!(
            temporal_smoothness(&alternating).unwrap(),
            temporal_smoothness(&reversed).unwrap()
        );
        assert!(temporal_smoothness(&[black]).is_err());
    }

    #[test]
    fn chi_squared_separates_disjoint_histograms() {
        let p = vec![1.0, 0.0];
        let q = vec![0.0, 1.0];
        assert!((chi_squared_distance(&p, &q).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(chi_squared_distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn report_means_and_csv_shape() {
        let report = MetricReport {
            rows: vec![
                SampleMetrics {
                    sample_id: "000".into(),
                    psnr_db: 30.0,
                    ssim: 0.9,
                    smoothness: 0.1,
                },
                SampleMetrics {
                    sample_id: "001".into(),
                    psnr_db: 20.0,
                    ssim: 0.7,
                    smoothness: 0.3,
                },
            ],
        };
        let (p, s, m) = report.means();
        assert_eq!((p, s, m), (25.0, 0.8, 0.2));
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 4); // header + 2 rows + mean
        assert!(text.lines().last().unwrap().starts_with("mean,"));
    }
}
