//! The two attention paths.
//!
//! `dense_masked_attention` is the oracle: it materializes the full `L x L`
//! logit matrix, writes a large negative constant into inadmissible slots
//! and normalizes. `blockwise_attention` computes the same relation by
//! streaming over each query's admissible key ranges, never allocating
//! anything quadratic in `L`. Both paths carry hand-written backwards.

use super::layout::SegmentLayout;
use super::mask::{build_ada_mask, AttnMask, DenseMask};
use crate::error::{Error, Result};
use crate::tensor::ops::dot64;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Pre-softmax fill for inadmissible logits; large enough to underflow to
/// an exact zero probability in the stabilized softmax.
const MASKED_LOGIT: f64 = -1e9;

/// Below this many multiply-adds the kernels stay serial.
const PAR_THRESHOLD: usize = 1 << 15;

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, len: usize) -> Result<(usize, usize)> {
    if q.rank() != 3 {
        return Err(Error::Shape(format!(
            "attention expects [tokens, heads, head_dim], got {:?}",
            q.shape()
        )));
    }
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "q/k/v shapes differ: {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if q.shape()[0] != len {
        return Err(Error::Shape(format!(
            "mask is for {len} tokens, tensors carry {}",
            q.shape()[0]
        )));
    }
    Ok((q.shape()[1], q.shape()[2]))
}

/// Repack `[L, H, dh]` into per-head contiguous `[H, L, dh]`.
fn per_head(x: &[f32], l: usize, heads: usize, dh: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for i in 0..l {
        for h in 0..heads {
            let src = &x[(i * heads + h) * dh..(i * heads + h + 1) * dh];
            out[(h * l + i) * dh..(h * l + i + 1) * dh].copy_from_slice(src);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Dense oracle path
// ---------------------------------------------------------------------------

pub struct DenseAux {
    /// Row-normalized probabilities, `[heads, L, L]`.
    pub probs: Vec<f32>,
}

pub(crate) fn dense_fwd(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &DenseMask,
) -> Result<(Tensor, DenseAux)> {
    let l = mask.len();
    let (heads, dh) = check_qkv(q, k, v, l)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let qh = per_head(q.data(), l, heads, dh);
    let kh = per_head(k.data(), l, heads, dh);
    let vh = per_head(v.data(), l, heads, dh);

    for row in 0..l {
        if !mask.row(row).iter().any(|&a| a) {
            return Err(Error::Mask(format!("query row {row} admits no keys")));
        }
    }

    let mut probs = vec![0.0f32; heads * l * l];
    let prob_row = |r: usize, out: &mut [f32]| {
        let (h, i) = (r / l, r % l);
        let qrow = &qh[(h * l + i) * dh..(h * l + i + 1) * dh];
        let allowed = mask.row(i);
        let mut max = f64::NEG_INFINITY;
        let mut logits = vec![0.0f64; l];
        for j in 0..l {
            let s = if allowed[j] {
                dot64(qrow, &kh[(h * l + j) * dh..(h * l + j + 1) * dh]) * scale
            } else {
                MASKED_LOGIT
            };
            logits[j] = s;
            max = max.max(s);
        }
        let mut denom = 0.0f64;
        for j in 0..l {
            let e = (logits[j] - max).exp();
            logits[j] = e;
            denom += e;
        }
        for j in 0..l {
            out[j] = (logits[j] / denom) as f32;
        }
    };
    if heads * l * l * dh >= PAR_THRESHOLD {
        probs
            .par_chunks_mut(l)
            .enumerate()
            .for_each(|(r, row)| prob_row(r, row));
    } else {
        for (r, row) in probs.chunks_mut(l).enumerate() {
            prob_row(r, row);
        }
    }

    let mut out = vec![0.0f32; l * heads * dh];
    let out_row = |r: usize, dst: &mut [f32]| {
        let (i, h) = (r / heads, r % heads);
        let p = &probs[(h * l + i) * l..(h * l + i + 1) * l];
        let mut acc = vec![0.0f64; dh];
        for j in 0..l {
            let pj = p[j] as f64;
            if pj != 0.0 {
                let vrow = &vh[(h * l + j) * dh..(h * l + j + 1) * dh];
                for d in 0..dh {
                    acc[d] += pj * vrow[d] as f64;
                }
            }
        }
        for d in 0..dh {
            dst[d] = acc[d] as f32;
        }
    };
    if heads * l * l * dh >= PAR_THRESHOLD {
        out.par_chunks_mut(dh)
            .enumerate()
            .for_each(|(r, dst)| out_row(r, dst));
    } else {
        for (r, dst) in out.chunks_mut(dh).enumerate() {
            out_row(r, dst);
        }
    }

    Ok((Tensor::new(q.shape(), out)?, DenseAux { probs }))
}

pub(crate) fn dense_bwd(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &DenseMask,
    aux: &DenseAux,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let l = mask.len();
    let (heads, dh) = check_qkv(q, k, v, l)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let qh = per_head(q.data(), l, heads, dh);
    let kh = per_head(k.data(), l, heads, dh);
    let vh = per_head(v.data(), l, heads, dh);
    let gh = per_head(grad_out.data(), l, heads, dh);

    let mut head_grads: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::with_capacity(heads);
    (0..heads)
        .into_par_iter()
        .map(|h| {
            let mut dq = vec![0.0f64; l * dh];
            let mut dk = vec![0.0f64; l * dh];
            let mut dv = vec![0.0f64; l * dh];
            let mut dp = vec![0.0f64; l];
            let mut ds = vec![0.0f64; l];
            for i in 0..l {
                let p = &aux.probs[(h * l + i) * l..(h * l + i + 1) * l];
                let grow = &gh[(h * l + i) * dh..(h * l + i + 1) * dh];
                let mut rowdot = 0.0f64;
                for j in 0..l {
                    let pj = p[j] as f64;
                    if pj == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vrow = &vh[(h * l + j) * dh..(h * l + j + 1) * dh];
                    dp[j] = dot64(grow, vrow);
                    rowdot += pj * dp[j];
                    for d in 0..dh {
                        dv[j * dh + d] += pj * grow[d] as f64;
                    }
                }
                for j in 0..l {
                    let pj = p[j] as f64;
                    ds[j] = if pj == 0.0 { 0.0 } else { pj * (dp[j] - rowdot) };
                }
                let qrow = &qh[(h * l + i) * dh..(h * l + i + 1) * dh];
                for j in 0..l {
                    if ds[j] == 0.0 {
                        continue;
                    }
                    let krow = &kh[(h * l + j) * dh..(h * l + j + 1) * dh];
                    let sj = ds[j] * scale;
                    for d in 0..dh {
                        dq[i * dh + d] += sj * krow[d] as f64;
                        dk[j * dh + d] += sj * qrow[d] as f64;
                    }
                }
            }
            (dq, dk, dv)
        })
        .collect_into_vec(&mut head_grads);

    let pack = |pick: fn(&(Vec<f64>, Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Result<Tensor> {
        let mut out = vec![0.0f32; l * heads * dh];
        for (h, trip) in head_grads.iter().enumerate() {
            let src = pick(trip);
            for i in 0..l {
                for d in 0..dh {
                    out[(i * heads + h) * dh + d] = src[i * dh + d] as f32;
                }
            }
        }
        Tensor::new(q.shape(), out)
    };
    Ok((pack(|t| &t.0)?, pack(|t| &t.1)?, pack(|t| &t.2)?))
}

/// Softmax attention restricted to the admissible keys of a dense boolean
/// mask; the oracle path.
pub fn dense_masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &DenseMask,
) -> Result<Tensor> {
    dense_fwd(q, k, v, mask).map(|(out, _)| out)
}

// ---------------------------------------------------------------------------
// Blockwise path
// ---------------------------------------------------------------------------

pub struct BlockAux {
    /// Per `(token, head)` row: running max and softmax denominator.
    pub stats: Vec<(f64, f64)>,
}

pub(crate) fn block_fwd(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttnMask,
) -> Result<(Tensor, BlockAux)> {
    let l = mask.len();
    let (heads, dh) = check_qkv(q, k, v, l)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let kh = per_head(k.data(), l, heads, dh);
    let vh = per_head(v.data(), l, heads, dh);
    let qd = q.data();

    for i in 0..l {
        let ranges = mask.row_ranges(i)?;
        if ranges.iter().all(|r| r.is_empty()) {
            return Err(Error::Mask(format!("query row {i} admits no keys")));
        }
    }

    let widest = mask
        .groups()
        .iter()
        .map(|g| g.keys.iter().map(|r| r.len()).sum::<usize>())
        .max()
        .unwrap_or(0);
    let mut out = vec![0.0f32; l * heads * dh];
    let mut stats = vec![(0.0f64, 0.0f64); l * heads];
    let work: usize = mask.popcount() as usize * dh;

    let row_job = |r: usize, dst: &mut [f32], stat: &mut [(f64, f64)], scratch: &mut Vec<f64>| {
        let (i, h) = (r / heads, r % heads);
        let ranges = mask.row_ranges(i).expect("rows validated above");
        let qrow = &qd[(i * heads + h) * dh..(i * heads + h + 1) * dh];
        scratch.clear();
        let mut max = f64::NEG_INFINITY;
        for range in ranges {
            for j in range.clone() {
                let s = dot64(qrow, &kh[(h * l + j) * dh..(h * l + j + 1) * dh]) * scale;
                scratch.push(s);
                max = max.max(s);
            }
        }
        let mut denom = 0.0f64;
        let mut acc = vec![0.0f64; dh];
        let mut n = 0usize;
        for range in ranges {
            for j in range.clone() {
                let e = (scratch[n] - max).exp();
                n += 1;
                denom += e;
                let vrow = &vh[(h * l + j) * dh..(h * l + j + 1) * dh];
                for d in 0..dh {
                    acc[d] += e * vrow[d] as f64;
                }
            }
        }
        for d in 0..dh {
            dst[d] = (acc[d] / denom) as f32;
        }
        stat[0] = (max, denom);
    };

    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(dh)
            .zip(stats.par_chunks_mut(1))
            .enumerate()
            .for_each_init(
                || Vec::with_capacity(widest),
                |scratch, (r, (dst, stat))| row_job(r, dst, stat, scratch),
            );
    } else {
        let mut scratch = Vec::with_capacity(widest);
        for (r, (dst, stat)) in out.chunks_mut(dh).zip(stats.chunks_mut(1)).enumerate() {
            row_job(r, dst, stat, &mut scratch);
        }
    }

    Ok((Tensor::new(q.shape(), out)?, BlockAux { stats }))
}

pub(crate) fn block_bwd(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttnMask,
    aux: &BlockAux,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let l = mask.len();
    let (heads, dh) = check_qkv(q, k, v, l)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let kh = per_head(k.data(), l, heads, dh);
    let vh = per_head(v.data(), l, heads, dh);
    let qd = q.data();
    let gd = grad_out.data();

    let mut head_grads: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::with_capacity(heads);
    (0..heads)
        .into_par_iter()
        .map(|h| {
            let mut dq = vec![0.0f64; l * dh];
            let mut dk = vec![0.0f64; l * dh];
            let mut dv = vec![0.0f64; l * dh];
            let mut ps = Vec::new();
            let mut dps = Vec::new();
            for i in 0..l {
                let ranges = mask.row_ranges(i).expect("validated in forward");
                let (max, denom) = aux.stats[i * heads + h];
                let qrow = &qd[(i * heads + h) * dh..(i * heads + h + 1) * dh];
                let grow = &gd[(i * heads + h) * dh..(i * heads + h + 1) * dh];
                ps.clear();
                dps.clear();
                let mut rowdot = 0.0f64;
                for range in ranges {
                    for j in range.clone() {
                        let krow = &kh[(h * l + j) * dh..(h * l + j + 1) * dh];
                        let vrow = &vh[(h * l + j) * dh..(h * l + j + 1) * dh];
                        let s = dot64(qrow, krow) * scale;
                        let p = ((s - max).exp()) / denom;
                        let dp = dot64(grow, vrow);
                        rowdot += p * dp;
                        ps.push(p);
                        dps.push(dp);
                    }
                }
                let mut n = 0usize;
                let mut dq_acc = vec![0.0f64; dh];
                for range in ranges {
                    for j in range.clone() {
                        let p = ps[n];
                        let ds = p * (dps[n] - rowdot) * scale;
                        n += 1;
                        let krow = &kh[(h * l + j) * dh..(h * l + j + 1) * dh];
                        for d in 0..dh {
                            dq_acc[d] += ds * krow[d] as f64;
                            dk[j * dh + d] += ds * qrow[d] as f64;
                            dv[j * dh + d] += p * grow[d] as f64;
                        }
                    }
                }
                for d in 0..dh {
                    dq[i * dh + d] = dq_acc[d];
                }
            }
            (dq, dk, dv)
        })
        .collect_into_vec(&mut head_grads);

    let pack = |pick: fn(&(Vec<f64>, Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Result<Tensor> {
        let mut out = vec![0.0f32; l * heads * dh];
        for (h, trip) in head_grads.iter().enumerate() {
            let src = pick(trip);
            for i in 0..l {
                for d in 0..dh {
                    out[(i * heads + h) * dh + d] = src[i * dh + d] as f32;
                }
            }
        }
        Tensor::new(q.shape(), out)
    };
    Ok((pack(|t| &t.0)?, pack(|t| &t.1)?, pack(|t| &t.2)?))
}

/// Segment-masked attention streamed over admissible key ranges, without
/// any `L x L` intermediate. Computes the same relation as
/// `dense_masked_attention(build_ada_mask(layout))`.
pub fn blockwise_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: &SegmentLayout,
) -> Result<Tensor> {
    let mask = build_ada_mask(layout)?;
    block_fwd(q, k, v, &mask).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn rand_qkv(l: usize, heads: usize, dh: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = substream(seed, "attn-test");
        (
            Tensor::randn(&[l, heads, dh], &mut rng),
            Tensor::randn(&[l, heads, dh], &mut rng),
            Tensor::randn(&[l, heads, dh], &mut rng),
        )
    }

    #[test]
    fn identity_mask_returns_values() {
        let (q, k, v) = rand_qkv(6, 2, 4, 0);
        let out = dense_masked_attention(&q, &k, &v, &DenseMask::identity(6)).unwrap();
        // each row attends only to itself: softmax over one key is 1
        assert!(out.max_abs_diff(&v).unwrap() < 1e-6);
    }

    #[test]
    fn all_true_mask_matches_plain_attention() {
        let (q, k, v) = rand_qkv(5, 1, 4, 1);
        let out = dense_masked_attention(&q, &k, &v, &DenseMask::all_true(5)).unwrap();
        // straightforward reference computation
        let dh = 4usize;
        let scale = 1.0 / (dh as f64).sqrt();
        for i in 0..5 {
            let qrow = &q.data()[i * dh..(i + 1) * dh];
            let logits: Vec<f64> = (0..5)
                .map(|j| {
                    let krow = &k.data()[j * dh..(j + 1) * dh];
                    qrow.iter()
                        .zip(krow)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for d in 0..dh {
                let want: f64 = (0..5)
                    .map(|j| exps[j] / denom * v.data()[j * dh + d] as f64)
                    .sum();
                let got = out.data()[i * dh + d] as f64;
                assert!((want - got).abs() < 1e-6, "row {i} ch {d}");
            }
        }
    }

    #[test]
    fn blockwise_matches_dense_on_canonical_layout() {
        let layout = SegmentLayout::new(2, 4, 4, 16, 2).unwrap();
        let (q, k, v) = rand_qkv(layout.total_len(), 2, 8, 2);
        let mask = build_ada_mask(&layout).unwrap();
        let dense = dense_masked_attention(&q, &k, &v, &mask.to_dense()).unwrap();
        let block = blockwise_attention(&q, &k, &v, &layout).unwrap();
        assert!(dense.max_abs_diff(&block).unwrap() < 1e-5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (q, k, _) = rand_qkv(4, 1, 4, 3);
        let v = Tensor::zeros(&[4, 1, 2]);
        assert!(dense_masked_attention(&q, &k, &v, &DenseMask::all_true(4)).is_err());
    }
}
