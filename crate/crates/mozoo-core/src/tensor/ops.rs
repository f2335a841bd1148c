//! Value-level kernels shared by the graph and by plain callers.
//!
//! Inner products and reductions accumulate in f64 with a fixed summation
//! order, so results are bit-identical run to run regardless of thread count.

use super::Tensor;
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Parallelize only when the work amortizes the fork cost. Each output
/// element is produced by exactly one closure with a fixed inner order, so
/// the result does not depend on the thread count.
const PAR_THRESHOLD: usize = 1 << 15;

/// f64 dot product over f32 slices, four independent chains folded in a
/// fixed order.
pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s0 = 0.0f64;
    let mut s1 = 0.0f64;
    let mut s2 = 0.0f64;
    let mut s3 = 0.0f64;
    let mut ai = a.chunks_exact(4);
    let mut bi = b.chunks_exact(4);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        s0 += ca[0] as f64 * cb[0] as f64;
        s1 += ca[1] as f64 * cb[1] as f64;
        s2 += ca[2] as f64 * cb[2] as f64;
        s3 += ca[3] as f64 * cb[3] as f64;
    }
    for (x, y) in ai.remainder().iter().zip(bi.remainder()) {
        s0 += *x as f64 * *y as f64;
    }
    (s0 + s1) + (s2 + s3)
}

pub fn sum64(a: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for &v in a {
        s += v as f64;
    }
    s
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// Trailing-dimension broadcast shape of two shapes; no implicit promotion.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Shape(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides of `shape` viewed as `out_rank`-dimensional with broadcast axes
/// pinned to stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let base = strides_for(shape);
    let mut out = vec![0usize; rank];
    let offset = rank - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { base[i] };
    }
    out
}

/// Elementwise binary op with trailing broadcast.
pub fn binary_broadcast(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let numel: usize = out_shape.iter().product();
    // Fast path: identical shapes.
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(&out_shape, data);
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut data = Vec::with_capacity(numel);
    let (ad, bd) = (a.data(), b.data());
    let mut oa = 0usize;
    let mut ob = 0usize;
    for _ in 0..numel {
        data.push(f(ad[oa], bd[ob]));
        // row-major odometer
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Tensor::new(&out_shape, data)
}

/// Sum `grad` (shaped `from`) down to shape `to` by collapsing broadcast axes.
pub fn reduce_to_shape(grad: &Tensor, to: &[usize]) -> Result<Tensor> {
    let from = grad.shape();
    if from == to {
        return Ok(grad.clone());
    }
    let rank = from.len();
    let offset = rank - to.len();
    let to_strides = {
        let base = strides_for(to);
        let mut s = vec![0usize; rank];
        for i in 0..to.len() {
            s[offset + i] = if to[i] == 1 { 0 } else { base[i] };
        }
        s
    };
    let to_numel: usize = to.iter().product();
    let mut acc = vec![0.0f64; to_numel];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in grad.data() {
        acc[off] += g as f64;
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += to_strides[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            off -= to_strides[d] * from[d];
        }
    }
    Tensor::new(to, acc.into_iter().map(|v| v as f32).collect())
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

fn split_batch(shape: &[usize]) -> (&[usize], usize, usize) {
    let rank = shape.len();
    (&shape[..rank - 2], shape[rank - 2], shape[rank - 1])
}

/// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]` with
/// broadcast-compatible batch dimensions.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank >= 2 operands, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ba, m, ka) = split_batch(a.shape());
    let (bb, kb, n) = split_batch(b.shape());
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dims disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch_shape = broadcast_shape(ba, bb)?;
    let batch: usize = batch_shape.iter().product();
    let mut out_shape = batch_shape.clone();
    out_shape.push(m);
    out_shape.push(n);

    let sa = broadcast_strides(ba, &batch_shape);
    let sb = broadcast_strides(bb, &batch_shape);
    let a_mat = m * ka;
    let b_mat = kb * n;

    let mut out = vec![0.0f32; batch * m * n];
    let mut bt = vec![0.0f32; b_mat];
    let mut idx = vec![0usize; batch_shape.len()];
    let mut a_off = 0usize;
    let mut b_off = 0usize;
    for bi in 0..batch {
        let asub = &a.data()[a_off * a_mat..(a_off + 1) * a_mat];
        let bsub = &b.data()[b_off * b_mat..(b_off + 1) * b_mat];
        // Transpose b once so every dot runs over contiguous memory.
        for r in 0..kb {
            for c in 0..n {
                bt[c * kb + r] = bsub[r * n + c];
            }
        }
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        let work = m * n * ka;
        let row_job = |i: usize, row_out: &mut [f32]| {
            let arow = &asub[i * ka..(i + 1) * ka];
            for (c, slot) in row_out.iter_mut().enumerate() {
                *slot = dot64(arow, &bt[c * kb..(c + 1) * kb]) as f32;
            }
        };
        if work >= PAR_THRESHOLD {
            dst.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| row_job(i, row));
        } else {
            for (i, row) in dst.chunks_mut(n).enumerate() {
                row_job(i, row);
            }
        }
        for d in (0..batch_shape.len()).rev() {
            idx[d] += 1;
            a_off += sa[d];
            b_off += sb[d];
            if idx[d] < batch_shape[d] {
                break;
            }
            idx[d] = 0;
            a_off -= sa[d] * batch_shape[d];
            b_off -= sb[d] * batch_shape[d];
        }
    }
    Tensor::new(&out_shape, out)
}

/// Backward of `matmul`: `dA = dC @ B^T`, `dB = A^T @ dC`, each reduced over
/// any broadcast batch dimensions.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let bt = b.transpose_last2()?;
    let at = a.transpose_last2()?;
    let da_full = matmul(grad_out, &bt)?;
    let db_full = matmul(&at, grad_out)?;
    let da = reduce_to_shape(&da_full, a.shape())?;
    let db = reduce_to_shape(&db_full, b.shape())?;
    Ok((da, db))
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Stabilized softmax over the last dimension.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let rank = x.rank();
    if rank == 0 {
        return Err(Error::Shape("softmax on rank-0 tensor".into()));
    }
    let n = x.shape()[rank - 1];
    if n == 0 {
        return Err(Error::Shape("softmax over empty last dimension".into()));
    }
    let mut out = vec![0.0f32; x.numel()];
    for (row_in, row_out) in x.data().chunks(n).zip(out.chunks_mut(n)) {
        let max = row_in.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let mut denom = 0.0f64;
        for (&v, o) in row_in.iter().zip(row_out.iter_mut()) {
            let e = ((v as f64) - max).exp();
            *o = e as f32;
            denom += e;
        }
        for o in row_out.iter_mut() {
            *o = ((*o as f64) / denom) as f32;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Backward of softmax given its output `y`:
/// `dx = y * (dy - sum(dy * y))` per row.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let n = *y.shape().last().unwrap();
    let mut grad_in = vec![0.0f32; y.numel()];
    for ((yr, gr), out) in y
        .data()
        .chunks(n)
        .zip(grad_out.data().chunks(n))
        .zip(grad_in.chunks_mut(n))
    {
        let dot = dot64(yr, gr);
        for i in 0..n {
            out[i] = (yr[i] as f64 * (gr[i] as f64 - dot)) as f32;
        }
    }
    Tensor::new(y.shape(), grad_in)
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

pub struct LayerNormAux {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Per-row standardization over the last dimension followed by an affine map.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f32,
) -> Result<(Tensor, LayerNormAux)> {
    let rank = x.rank();
    if rank == 0 {
        return Err(Error::Shape("layer_norm on rank-0 tensor".into()));
    }
    let n = x.shape()[rank - 1];
    if n == 0 {
        return Err(Error::Shape("layer_norm over empty row".into()));
    }
    if gain.shape() != [n] || bias.shape() != [n] {
        return Err(Error::Shape(format!(
            "layer_norm affine shapes {:?}/{:?} do not match last dim {}",
            gain.shape(),
            bias.shape(),
            n
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Contract("layer_norm eps must be positive".into()));
    }
    let rows = x.numel() / n;
    let mut out = vec![0.0f32; x.numel()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let (g, b) = (gain.data(), bias.data());
    for (row_in, row_out) in x.data().chunks(n).zip(out.chunks_mut(n)) {
        let mu = sum64(row_in) / n as f64;
        let mut var = 0.0f64;
        for &v in row_in {
            let d = v as f64 - mu;
            var += d * d;
        }
        var /= n as f64;
        let rs = 1.0 / (var + eps as f64).sqrt();
        for i in 0..n {
            let norm = (row_in[i] as f64 - mu) * rs;
            row_out[i] = (norm * g[i] as f64 + b[i] as f64) as f32;
        }
        mean.push(mu);
        rstd.push(rs);
    }
    Ok((Tensor::new(x.shape(), out)?, LayerNormAux { mean, rstd }))
}

/// Backward of layer_norm. Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    aux: &LayerNormAux,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = *x.shape().last().unwrap();
    let rows = x.numel() / n;
    let g = gain.data();
    let mut dx = vec![0.0f32; x.numel()];
    let mut dgain = vec![0.0f64; n];
    let mut dbias = vec![0.0f64; n];
    for r in 0..rows {
        let xi = &x.data()[r * n..(r + 1) * n];
        let go = &grad_out.data()[r * n..(r + 1) * n];
        let di = &mut dx[r * n..(r + 1) * n];
        let (mu, rs) = (aux.mean[r], aux.rstd[r]);
        // dnorm = go * gain; dx = rs * (dnorm - mean(dnorm) - norm * mean(dnorm * norm))
        let mut sum_dn = 0.0f64;
        let mut sum_dn_norm = 0.0f64;
        for i in 0..n {
            let norm = (xi[i] as f64 - mu) * rs;
            let dn = go[i] as f64 * g[i] as f64;
            sum_dn += dn;
            sum_dn_norm += dn * norm;
            dgain[i] += go[i] as f64 * norm;
            dbias[i] += go[i] as f64;
        }
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let norm = (xi[i] as f64 - mu) * rs;
            let dn = go[i] as f64 * g[i] as f64;
            di[i] = (rs * (dn - sum_dn * inv_n - norm * sum_dn_norm * inv_n)) as f32;
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(&[n], dgain.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(&[n], dbias.into_iter().map(|v| v as f32).collect())?,
    ))
}

// ---------------------------------------------------------------------------
// Activations and reductions
// ---------------------------------------------------------------------------

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| {
        let s = 1.0 / (1.0 + (-v as f64).exp());
        (v as f64 * s) as f32
    })
}

pub fn silu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let v = v as f64;
            let s = 1.0 / (1.0 + (-v).exp());
            (g as f64 * (s * (1.0 + v * (1.0 - s)))) as f32
        })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
        requires_grad: false,
    }
}

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(sum64(x.data()) as f32)
}

pub fn mean_all(x: &Tensor) -> Tensor {
    Tensor::scalar((sum64(x.data()) / x.numel() as f64) as f32)
}
