//! Max-plus / min-plus linear algebra with selection tracking.
//!
//! Every reduction reports which candidate won so the backward pass can
//! route cotangents exactly. Selection index `0` is the bias; `j >= 1` is
//! input `j - 1`. Ties go to the lowest index, so a bias equal to the best
//! input candidate wins.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TropicalMode {
    MaxPlus,
    MinPlus,
}

impl TropicalMode {
    /// The semiring zero: `-inf` for max-plus, `+inf` for min-plus.
    pub fn neutral(self) -> f64 {
        match self {
            TropicalMode::MaxPlus => f64::NEG_INFINITY,
            TropicalMode::MinPlus => f64::INFINITY,
        }
    }

    /// Strict preference: `a` beats `b`.
    #[inline(always)]
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            TropicalMode::MaxPlus => a > b,
            TropicalMode::MinPlus => a < b,
        }
    }

    pub fn dual(self) -> Self {
        match self {
            TropicalMode::MaxPlus => TropicalMode::MinPlus,
            TropicalMode::MinPlus => TropicalMode::MaxPlus,
        }
    }
}

/// Tropical identity: `0` on the diagonal, the mode's neutral element elsewhere.
pub fn tropical_identity(n: usize, mode: TropicalMode) -> Tensor {
    let mut t = Tensor::filled(vec![n, n], mode.neutral());
    for i in 0..n {
        t.set2(i, i, 0.0);
    }
    t
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{what} must be finite")))
    }
}

fn check_matrix(w: &Tensor) -> Result<(usize, usize)> {
    if w.shape().len() != 2 {
        return Err(dim_err(format!("expected a matrix, got shape {:?}", w.shape())));
    }
    Ok((w.shape()[0], w.shape()[1]))
}

/// `y_i = bias_i (+) ext_j (x_j + W_ij)`, with `ext` the mode's extremum.
pub fn tropical_vecmul(
    w: &Tensor,
    x: &[f64],
    bias: Option<&[f64]>,
    mode: TropicalMode,
) -> Result<(Vec<f64>, Vec<u32>)> {
    let (n_out, n_in) = check_matrix(w)?;
    if x.len() != n_in {
        return Err(dim_err(format!("W is {n_out}x{n_in} but x has {}", x.len())));
    }
    if let Some(b) = bias {
        if b.len() != n_out {
            return Err(dim_err(format!("bias has {} entries, expected {n_out}", b.len())));
        }
    }
    check_finite(x, "input")?;
    let mut y = vec![0.0; n_out];
    let mut arg = vec![0u32; n_out];
    reduce_rows(x, w.data(), n_in, bias, mode, &mut y, &mut arg)?;
    Ok((y, arg))
}

/// `(A (x) B)_ij = ext_k (A_ik + B_kj)`.
pub fn tropical_matmul(a: &Tensor, b: &Tensor, mode: TropicalMode) -> Result<Tensor> {
    let (m, k) = check_matrix(a)?;
    let (k2, n) = check_matrix(b)?;
    if k != k2 {
        return Err(dim_err(format!("tropical matmul inner {k} vs {k2}")));
    }
    let neutral = mode.neutral();
    let mut out = vec![neutral; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a.data()[i * k + p];
            if aik == neutral {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                // Opposite infinities only meet when both operands are
                // neutral-free on one side; treat the sum as neutral.
                let v = if bkj == neutral { neutral } else { aik + bkj };
                if mode.better(v, *o) {
                    *o = v;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Output extent of a strided, padded window sweep.
pub fn conv_out_extent(size: usize, kernel: usize, padding: usize, stride: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if kernel > padded || kernel == 0 || stride == 0 {
        return Err(dim_err(format!(
            "kernel {kernel} does not fit padded extent {padded} (stride {stride})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Geometry shared by tropical and linear convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        padding: usize,
        stride: usize,
    ) -> Result<Self> {
        let h_out = conv_out_extent(h, kh, padding, stride)?;
        let w_out = conv_out_extent(w, kw, padding, stride)?;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            padding,
            stride,
            h_out,
            w_out,
        })
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }

    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }

    /// Input offset for output cell `(oy, ox)` and tap `(c, ky, kx)`, or
    /// `None` if the tap lands in the padding.
    #[inline]
    pub fn input_offset(&self, oy: usize, ox: usize, c: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            return None;
        }
        Some((c * self.h + iy as usize) * self.w + ix as usize)
    }
}

/// Tropical 2-D convolution over channels-first input with unit stride.
///
/// Padded cells hold the mode's neutral element and can never be selected.
/// The selection index of an output cell is `0` for the bias and
/// `1 + ((c * kH + ky) * kW + kx)` for a tap.
pub fn tropical_conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f64],
    mode: TropicalMode,
    padding: usize,
) -> Result<(Tensor, Vec<u32>)> {
    tropical_conv2d_strided(input, kernel, bias, mode, padding, 1)
}

pub fn tropical_conv2d_strided(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f64],
    mode: TropicalMode,
    padding: usize,
    stride: usize,
) -> Result<(Tensor, Vec<u32>)> {
    let g = conv_geom_of(input, kernel, padding, stride)?;
    if bias.len() != g.c_out {
        return Err(dim_err(format!("bias has {} entries, expected {}", bias.len(), g.c_out)));
    }
    check_finite(input.data(), "input")?;
    let mut out = vec![0.0; g.out_len()];
    let mut arg = vec![0u32; g.out_len()];
    conv_reduce(&g, input.data(), kernel.data(), bias, mode, &mut out, &mut arg)?;
    Ok((Tensor::new(vec![g.c_out, g.h_out, g.w_out], out)?, arg))
}

fn conv_geom_of(input: &Tensor, kernel: &Tensor, padding: usize, stride: usize) -> Result<ConvGeom> {
    if input.shape().len() != 3 || kernel.shape().len() != 4 {
        return Err(dim_err(format!(
            "conv expects input [C,H,W] and kernel [Co,Ci,kH,kW], got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ks = kernel.shape();
    if ks[1] != c_in {
        return Err(dim_err(format!("kernel expects {} channels, input has {c_in}", ks[1])));
    }
    ConvGeom::new(c_in, h, w, ks[0], ks[2], ks[3], padding, stride)
}

/// Single-sample tropical convolution into caller buffers.
pub(crate) fn conv_reduce(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    mode: TropicalMode,
    out: &mut [f64],
    arg: &mut [u32],
) -> Result<()> {
    let taps = g.kh * g.kw;
    for co in 0..g.c_out {
        let kbase = co * g.c_in * taps;
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let o = (co * g.h_out + oy) * g.w_out + ox;
                let mut best = bias[co];
                let mut sel = 0u32;
                for c in 0..g.c_in {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let Some(off) = g.input_offset(oy, ox, c, ky, kx) else {
                                continue;
                            };
                            let t = (c * g.kh + ky) * g.kw + kx;
                            let v = x[off] + kernel[kbase + t];
                            if mode.better(v, best) {
                                best = v;
                                sel = t as u32 + 1;
                            }
                        }
                    }
                }
                if !best.is_finite() {
                    return Err(Error::DegenerateRow { row: o });
                }
                out[o] = best;
                arg[o] = sel;
            }
        }
    }
    Ok(())
}

/// LogSumExp relaxation of [`tropical_vecmul`] at temperature `t`.
pub fn soft_tropical_vecmul(
    w: &Tensor,
    x: &[f64],
    bias: Option<&[f64]>,
    mode: TropicalMode,
    t: f64,
) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    let (n_out, n_in) = check_matrix(w)?;
    if x.len() != n_in {
        return Err(dim_err(format!("W is {n_out}x{n_in} but x has {}", x.len())));
    }
    if bias.is_some_and(|b| b.len() != n_out) {
        return Err(dim_err("bias length mismatch"));
    }
    check_finite(x, "input")?;
    let mut cands = Vec::with_capacity(n_in + 1);
    let mut y = Vec::with_capacity(n_out);
    for i in 0..n_out {
        cands.clear();
        if let Some(b) = bias {
            cands.push(b[i]);
        }
        cands.extend(w.row(i).iter().zip(x).map(|(wij, xj)| wij + xj));
        let v = soft_extremum(&cands, mode, t, None);
        if !v.is_finite() {
            return Err(Error::DegenerateRow { row: i });
        }
        y.push(v);
    }
    Ok(y)
}

/// LogSumExp relaxation of [`tropical_conv2d`].
pub fn soft_tropical_conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f64],
    mode: TropicalMode,
    padding: usize,
    t: f64,
) -> Result<Tensor> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    let g = conv_geom_of(input, kernel, padding, 1)?;
    if bias.len() != g.c_out {
        return Err(dim_err("bias length mismatch"));
    }
    check_finite(input.data(), "input")?;
    let mut out = vec![0.0; g.out_len()];
    let mut cands = Vec::new();
    soft_conv_reduce(&g, input.data(), kernel.data(), bias, mode, t, &mut out, None, &mut cands)?;
    Tensor::new(vec![g.c_out, g.h_out, g.w_out], out)
}

/// Single-sample soft convolution; when `weights` is given, the softmax
/// weight of every (output, tap) pair is stored there (bias weight first)
/// for the backward pass.
#[allow(clippy::too_many_arguments)]
pub(crate) fn soft_conv_reduce(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    mode: TropicalMode,
    t: f64,
    out: &mut [f64],
    mut weights: Option<&mut Vec<f64>>,
    cands: &mut Vec<f64>,
) -> Result<()> {
    let taps = g.kh * g.kw;
    let per = g.c_in * taps + 1;
    let mut probs = Vec::with_capacity(per);
    for co in 0..g.c_out {
        let kbase = co * g.c_in * taps;
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let o = (co * g.h_out + oy) * g.w_out + ox;
                cands.clear();
                cands.push(bias[co]);
                for c in 0..g.c_in {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let t_idx = (c * g.kh + ky) * g.kw + kx;
                            let v = match g.input_offset(oy, ox, c, ky, kx) {
                                Some(off) => x[off] + kernel[kbase + t_idx],
                                None => mode.neutral(),
                            };
                            cands.push(v);
                        }
                    }
                }
                let want = weights.is_some();
                let v = soft_extremum(cands, mode, t, if want { Some(&mut probs) } else { None });
                if !v.is_finite() {
                    return Err(Error::DegenerateRow { row: o });
                }
                out[o] = v;
                if let Some(ws) = weights.as_deref_mut() {
                    ws.extend_from_slice(&probs);
                }
            }
        }
    }
    Ok(())
}

/// `t * log sum exp(c / t)` for max-plus, `-t * log sum exp(-c / t)` for
/// min-plus. Neutral candidates contribute nothing. If `probs` is given it
/// receives the softmax weights (the derivative w.r.t. each candidate).
pub(crate) fn soft_extremum(c: &[f64], mode: TropicalMode, t: f64, probs: Option<&mut Vec<f64>>) -> f64 {
    let sign = match mode {
        TropicalMode::MaxPlus => 1.0,
        TropicalMode::MinPlus => -1.0,
    };
    let m = c.iter().map(|v| sign * v).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        if let Some(p) = probs {
            p.clear();
            p.resize(c.len(), 0.0);
        }
        return mode.neutral();
    }
    let s: f64 = c.iter().map(|v| ((sign * v - m) / t).exp()).sum();
    if let Some(p) = probs {
        p.clear();
        p.extend(c.iter().map(|v| ((sign * v - m) / t).exp() / s));
    }
    sign * (m + t * s.ln())
}

const LANES: usize = 8;

/// Extremum of `x + w` and the first index attaining it.
///
/// Lanes keep their own first-hit index; merging lanes by smallest index on
/// equal values recovers the global first occurrence.
#[inline(always)]
fn ext_arg(x: &[f64], w: &[f64], mode: TropicalMode) -> (f64, usize) {
    match mode {
        TropicalMode::MaxPlus => ext_arg_impl::<true>(x, w),
        TropicalMode::MinPlus => ext_arg_impl::<false>(x, w),
    }
}

#[inline(always)]
fn ext_arg_impl<const MAX: bool>(x: &[f64], w: &[f64]) -> (f64, usize) {
    let n = x.len().min(w.len());
    let init = if MAX { f64::NEG_INFINITY } else { f64::INFINITY };
    let mut m = [init; LANES];
    let mut idx = [0usize; LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        let xs = &x[base..base + LANES];
        let ws = &w[base..base + LANES];
        for l in 0..LANES {
            let v = xs[l] + ws[l];
            let take = if MAX { v > m[l] } else { v < m[l] };
            if take {
                m[l] = v;
                idx[l] = base + l;
            }
        }
    }
    let mut best = init;
    let mut best_idx = usize::MAX;
    for l in 0..LANES {
        let better = if MAX { m[l] > best } else { m[l] < best };
        if better || (m[l] == best && m[l] != init && idx[l] < best_idx) {
            best = m[l];
            best_idx = idx[l];
        }
    }
    for j in chunks * LANES..n {
        let v = x[j] + w[j];
        let take = if MAX { v > best } else { v < best };
        if take {
            best = v;
            best_idx = j;
        }
    }
    (best, best_idx)
}

/// Fused max-plus and min-plus reductions of one row against two weight
/// rows (identical for shared weights).
#[inline(always)]
fn ext_pair(x: &[f64], wmax: &[f64], wmin: &[f64]) -> (f64, usize, f64, usize) {
    let n = x.len();
    let mut hi = [f64::NEG_INFINITY; LANES];
    let mut lo = [f64::INFINITY; LANES];
    let mut hi_i = [0usize; LANES];
    let mut lo_i = [0usize; LANES];
    let chunks = n / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        let xs = &x[base..base + LANES];
        let a = &wmax[base..base + LANES];
        let b = &wmin[base..base + LANES];
        for l in 0..LANES {
            let u = xs[l] + a[l];
            if u > hi[l] {
                hi[l] = u;
                hi_i[l] = base + l;
            }
            let v = xs[l] + b[l];
            if v < lo[l] {
                lo[l] = v;
                lo_i[l] = base + l;
            }
        }
    }
    let (mut bh, mut bhi) = (f64::NEG_INFINITY, usize::MAX);
    let (mut bl, mut bli) = (f64::INFINITY, usize::MAX);
    for l in 0..LANES {
        if hi[l] > bh || (hi[l] == bh && hi[l] != f64::NEG_INFINITY && hi_i[l] < bhi) {
            bh = hi[l];
            bhi = hi_i[l];
        }
        if lo[l] < bl || (lo[l] == bl && lo[l] != f64::INFINITY && lo_i[l] < bli) {
            bl = lo[l];
            bli = lo_i[l];
        }
    }
    for j in chunks * LANES..n {
        let u = x[j] + wmax[j];
        if u > bh {
            bh = u;
            bhi = j;
        }
        let v = x[j] + wmin[j];
        if v < bl {
            bl = v;
            bli = j;
        }
    }
    (bh, bhi, bl, bli)
}

#[inline(always)]
fn resolve(best: f64, idx: usize, bias: Option<f64>, mode: TropicalMode, row: usize) -> Result<(f64, u32)> {
    // Bias ranks before inputs, so it wins ties.
    let (v, sel) = match bias {
        Some(b) if !mode.better(best, b) => (b, 0),
        _ => (best, 1),
    };
    if !v.is_finite() {
        return Err(Error::DegenerateRow { row });
    }
    Ok((v, if sel == 0 { 0 } else { idx as u32 + 1 }))
}

/// Batched reduction: `x` is `[B x n_in]`, `w` is `[n_out x n_in]`; writes
/// `[B x n_out]` values and selections.
pub(crate) fn reduce_rows(
    x: &[f64],
    w: &[f64],
    n_in: usize,
    bias: Option<&[f64]>,
    mode: TropicalMode,
    out: &mut [f64],
    arg: &mut [u32],
) -> Result<()> {
    let n_out = w.len() / n_in;
    let batch = x.len() / n_in;
    for i in 0..n_out {
        let wr = &w[i * n_in..(i + 1) * n_in];
        let b = bias.map(|b| b[i]);
        for s in 0..batch {
            let xr = &x[s * n_in..(s + 1) * n_in];
            let (best, idx) = ext_arg(xr, wr, mode);
            let (v, sel) = resolve(best, idx, b, mode, i)?;
            out[s * n_out + i] = v;
            arg[s * n_out + i] = sel;
        }
    }
    Ok(())
}

/// Outputs of a fused dilation/erosion pass, each `[B x n_out]`.
pub(crate) struct PairOut {
    pub hi: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi_arg: Vec<u32>,
    pub lo_arg: Vec<u32>,
}

/// Batched fused max-plus (against `wmax`, bias `bmax`) and min-plus
/// (against `wmin`, bias `bmin`) reductions.
pub(crate) fn reduce_pair(
    x: &[f64],
    wmax: &[f64],
    wmin: &[f64],
    n_in: usize,
    bmax: Option<&[f64]>,
    bmin: Option<&[f64]>,
) -> Result<PairOut> {
    let n_out = wmax.len() / n_in;
    let batch = x.len() / n_in;
    let len = batch * n_out;
    let mut o = PairOut {
        hi: vec![0.0; len],
        lo: vec![0.0; len],
        hi_arg: vec![0; len],
        lo_arg: vec![0; len],
    };
    for i in 0..n_out {
        let a = &wmax[i * n_in..(i + 1) * n_in];
        let b = &wmin[i * n_in..(i + 1) * n_in];
        let bh = bmax.map(|v| v[i]);
        let bl = bmin.map(|v| v[i]);
        for s in 0..batch {
            let xr = &x[s * n_in..(s + 1) * n_in];
            let (h, hi_idx, l, lo_idx) = ext_pair(xr, a, b);
            let (hv, hs) = resolve(h, hi_idx, bh, TropicalMode::MaxPlus, i)?;
            let (lv, ls) = resolve(l, lo_idx, bl, TropicalMode::MinPlus, i)?;
            let k = s * n_out + i;
            o.hi[k] = hv;
            o.hi_arg[k] = hs;
            o.lo[k] = lv;
            o.lo_arg[k] = ls;
        }
    }
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    const NEG: f64 = f64::NEG_INFINITY;

    /// Candidate list `[bias, x_0 + W_i0, ...]` scanned left to right.
    fn oracle_vecmul(w: &Tensor, x: &[f64], bias: Option<&[f64]>, mode: TropicalMode) -> (Vec<f64>, Vec<u32>) {
        let mut ys = vec![];
        let mut args = vec![];
        for i in 0..w.rows() {
            let mut cands = vec![bias.map_or(mode.neutral(), |b| b[i])];
            for (j, xj) in x.iter().enumerate() {
                cands.push(xj + w.at2(i, j));
            }
            let mut best = 0;
            for (k, &c) in cands.iter().enumerate() {
                if mode.better(c, cands[best]) {
                    best = k;
                }
            }
            ys.push(cands[best]);
            args.push(best as u32);
        }
        (ys, args)
    }

    #[test]
    fn vecmul_examples() {
        let w = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let (y, a) = tropical_vecmul(&w, &[1.0, 2.0], None, TropicalMode::MaxPlus).unwrap();
        assert_eq!(y, vec![2.0, 2.0]);
        assert_eq!(a, vec![2, 2]);

        let id = tropical_identity(2, TropicalMode::MaxPlus);
        let (y, _) = tropical_vecmul(&id, &[3.0, -1.0], None, TropicalMode::MaxPlus).unwrap();
        assert_eq!(y, vec![3.0, -1.0]);

        let w = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.0, 4.0]]);
        let (y, a) = tropical_vecmul(&w, &[0.5, 0.25], Some(&[3.0, -9.0]), TropicalMode::MaxPlus).unwrap();
        let (oy, oa) = oracle_vecmul(&w, &[0.5, 0.25], Some(&[3.0, -9.0]), TropicalMode::MaxPlus);
        assert_eq!((y.clone(), a.clone()), (oy, oa));
        assert_eq!(y, vec![3.0, 4.25]);
        assert_eq!(a, vec![0, 2]);
    }

    #[test]
    fn bias_wins_ties() {
        let w = Tensor::from_rows(&[vec![1.0, 1.0]]);
        let (y, a) = tropical_vecmul(&w, &[0.0, 0.0], Some(&[1.0]), TropicalMode::MaxPlus).unwrap();
        assert_eq!((y[0], a[0]), (1.0, 0));
        let (_, a) = tropical_vecmul(&w, &[0.0, 0.0], None, TropicalMode::MaxPlus).unwrap();
        assert_eq!(a[0], 1);
    }

    #[test]
    fn degenerate_row_is_an_error() {
        let w = Tensor::from_rows(&[vec![NEG, NEG]]);
        assert!(matches!(
            tropical_vecmul(&w, &[0.0, 0.0], None, TropicalMode::MaxPlus),
            Err(Error::DegenerateRow { row: 0 })
        ));
        let (y, a) = tropical_vecmul(&w, &[0.0, 0.0], Some(&[2.0]), TropicalMode::MaxPlus).unwrap();
        assert_eq!((y[0], a[0]), (2.0, 0));
    }

    #[test]
    fn shape_errors() {
        let w = Tensor::zeros(vec![2, 3]);
        assert!(tropical_vecmul(&w, &[0.0; 2], None, TropicalMode::MaxPlus).is_err());
        assert!(tropical_vecmul(&w, &[0.0; 3], Some(&[0.0]), TropicalMode::MaxPlus).is_err());
        assert!(tropical_matmul(&w, &w, TropicalMode::MaxPlus).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![0.0, -1.0], vec![5.0, 0.0]]);
        let c = tropical_matmul(&a, &b, TropicalMode::MaxPlus).unwrap();
        assert_eq!(c.data(), &[7.0, 2.0, 9.0, 4.0]);
        let id = tropical_identity(2, TropicalMode::MaxPlus);
        assert_eq!(tropical_matmul(&id, &b, TropicalMode::MaxPlus).unwrap(), b);
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::zeros(vec![1, 1, 2, 2]);
        let (y, a) = tropical_conv2d(&x, &k, &[NEG], TropicalMode::MaxPlus, 0).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(a, vec![4]);

        let k1 = Tensor::zeros(vec![1, 1, 1, 1]);
        let (y, _) = tropical_conv2d(&x, &k1, &[NEG], TropicalMode::MaxPlus, 0).unwrap();
        assert_eq!(y.data(), x.data());

        let z = Tensor::zeros(vec![1, 3, 3]);
        let k3 = Tensor::zeros(vec![1, 1, 3, 3]);
        let (y, _) = tropical_conv2d(&z, &k3, &[NEG], TropicalMode::MaxPlus, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));

        let k5 = Tensor::zeros(vec![1, 1, 5, 5]);
        assert!(tropical_conv2d(&z, &k5, &[NEG], TropicalMode::MaxPlus, 0).is_err());
    }

    #[test]
    fn strided_pool() {
        // 2x2 max pooling as a max-plus conv with a zero kernel.
        let x = Tensor::new(vec![1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]).unwrap();
        let k = Tensor::zeros(vec![1, 1, 2, 2]);
        let (y, _) = tropical_conv2d_strided(&x, &k, &[NEG], TropicalMode::MaxPlus, 0, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
    }

    #[test]
    fn soft_examples() {
        let w = Tensor::from_rows(&[vec![0.0, 0.0]]);
        let y = soft_tropical_vecmul(&w, &[0.0, 0.0], None, TropicalMode::MaxPlus, 1.0).unwrap();
        assert!((y[0] - 2f64.ln()).abs() < 1e-15);
        let y = soft_tropical_vecmul(&w, &[0.0, 0.0], None, TropicalMode::MaxPlus, 0.01).unwrap();
        assert!(y[0] >= 0.0 && y[0] <= 0.01);
        let w1 = Tensor::from_rows(&[vec![1.5]]);
        let y = soft_tropical_vecmul(&w1, &[2.0], None, TropicalMode::MinPlus, 7.0).unwrap();
        assert_eq!(y[0], 3.5);
        assert!(soft_tropical_vecmul(&w, &[0.0, 0.0], None, TropicalMode::MaxPlus, 0.0).is_err());
    }

    #[test]
    fn soft_conv_matches_hard_with_single_tap() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap();
        let y = soft_tropical_conv2d(&x, &k, &[NEG], TropicalMode::MaxPlus, 0, 0.3).unwrap();
        assert_eq!(y.data(), &[1.5, 2.5, 3.5, 4.5]);
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-5i32..5, rows * cols)
            .prop_map(move |v| Tensor::new(vec![rows, cols], v.into_iter().map(f64::from).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn batched_pair_matches_single_mode(
            x in prop::collection::vec(-3.0f64..3.0, 21),
            w in prop::collection::vec(-3.0f64..3.0, 63),
        ) {
            // 21 inputs exercises both the lane loop and the remainder.
            let o = reduce_pair(&x, &w, &w, 21, None, None).unwrap();
            let wt = Tensor::new(vec![3, 21], w.clone()).unwrap();
            let (hi, ha) = oracle_vecmul(&wt, &x, None, TropicalMode::MaxPlus);
            let (lo, la) = oracle_vecmul(&wt, &x, None, TropicalMode::MinPlus);
            prop_assert_eq!(o.hi, hi);
            prop_assert_eq!(o.hi_arg, ha);
            prop_assert_eq!(o.lo, lo);
            prop_assert_eq!(o.lo_arg, la);
        }

        #[test]
        fn lane_ties_pick_lowest_index(
            x in prop::collection::vec(-2i32..2, 19),
        ) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let w = vec![0.0; 19];
            for mode in [TropicalMode::MaxPlus, TropicalMode::MinPlus] {
                let (v, i) = ext_arg(&x, &w, mode);
                let wt = Tensor::new(vec![1, 19], w.clone()).unwrap();
                let (oy, oa) = oracle_vecmul(&wt, &x, None, mode);
                prop_assert_eq!(v, oy[0]);
                prop_assert_eq!(i as u32 + 1, oa[0]);
            }
        }

        #[test]
        fn duality(
            w in small_matrix(3, 4),
            x in prop::collection::vec(-4.0f64..4.0, 4),
            b in prop::collection::vec(-4.0f64..4.0, 3),
        ) {
            let (ymin, amin) = tropical_vecmul(&w, &x, Some(&b), TropicalMode::MinPlus).unwrap();
            let nw = w.map(|v| -v);
            let nx: Vec<f64> = x.iter().map(|v| -v).collect();
            let nb: Vec<f64> = b.iter().map(|v| -v).collect();
            let (ymax, amax) = tropical_vecmul(&nw, &nx, Some(&nb), TropicalMode::MaxPlus).unwrap();
            prop_assert_eq!(amin, amax);
            for (a, c) in ymin.iter().zip(&ymax) {
                prop_assert_eq!(*a, -*c);
            }
        }

        #[test]
        fn associativity(a in small_matrix(3, 3), b in small_matrix(3, 3), c in small_matrix(3, 3)) {
            for mode in [TropicalMode::MaxPlus, TropicalMode::MinPlus] {
                let l = tropical_matmul(&tropical_matmul(&a, &b, mode).unwrap(), &c, mode).unwrap();
                let r = tropical_matmul(&a, &tropical_matmul(&b, &c, mode).unwrap(), mode).unwrap();
                prop_assert_eq!(l, r);
            }
        }

        #[test]
        fn monotone_in_input(
            w in small_matrix(3, 4),
            x in prop::collection::vec(-4.0f64..4.0, 4),
            d in prop::collection::vec(0.0f64..2.0, 4),
        ) {
            let x2: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
            let (y1, _) = tropical_vecmul(&w, &x, None, TropicalMode::MaxPlus).unwrap();
            let (y2, _) = tropical_vecmul(&w, &x2, None, TropicalMode::MaxPlus).unwrap();
            for (a, b) in y1.iter().zip(&y2) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn soft_gap_bound(
            w in small_matrix(2, 4),
            x in prop::collection::vec(-4.0f64..4.0, 4),
            t in 0.01f64..3.0,
        ) {
            let hard = tropical_vecmul(&w, &x, None, TropicalMode::MaxPlus).unwrap().0;
            let soft = soft_tropical_vecmul(&w, &x, None, TropicalMode::MaxPlus, t).unwrap();
            for (s, h) in soft.iter().zip(&hard) {
                let gap = s - h;
                prop_assert!(gap >= -1e-12 && gap <= t * 4f64.ln() + 1e-12);
            }
        }
    }
}
