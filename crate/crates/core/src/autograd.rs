//! Tape-based reverse-mode differentiation.
//!
//! Values are batched row-major tensors `[B x features]`. Tropical nodes
//! keep the selection index of every output so the backward pass sends the
//! whole cotangent to the winning candidate: both the weight and the input
//! of a selected `x_j + W_ij` receive it, a selected bias receives it alone.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::param::{Gradients, ParamSet};
use crate::tensor::Tensor;
use crate::tropical::{self, ConvGeom, TropicalMode};

pub type NodeId = usize;

/// How a dilation/erosion pair is combined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mix {
    /// `max + min`.
    Sum,
    /// `l * max + (1 - l) * min` with a fixed `l`.
    Fixed(f64),
    /// Per-unit `l_i * max + (1 - l_i) * min` with `l` read from a node.
    Learned(NodeId),
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddRow {
        x: NodeId,
        b: NodeId,
    },
    MulRow {
        x: NodeId,
        s: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Tropical {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        arg: Vec<u32>,
    },
    Pair {
        x: NodeId,
        wmax: NodeId,
        wmin: NodeId,
        bmax: Option<NodeId>,
        bmin: Option<NodeId>,
        mix: Mix,
        hi: Vec<f64>,
        lo: Vec<f64>,
        hi_arg: Vec<u32>,
        lo_arg: Vec<u32>,
    },
    TropConv {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        arg: Vec<u32>,
    },
    PairConv {
        x: NodeId,
        k: NodeId,
        bmax: NodeId,
        bmin: NodeId,
        geom: ConvGeom,
        hi_arg: Vec<u32>,
        lo_arg: Vec<u32>,
    },
    Soft {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        probs: Vec<f64>,
    },
    SoftConv {
        x: NodeId,
        k: NodeId,
        b: NodeId,
        geom: ConvGeom,
        probs: Vec<f64>,
    },
    LinConv {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        depthwise: bool,
    },
    FrameDiag {
        x: NodeId,
        u: NodeId,
        s: NodeId,
        v: NodeId,
        proj: Vec<f64>,
    },
    FrameKernel {
        u: NodeId,
        s: NodeId,
        v: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    MaxPieces {
        x: NodeId,
        arg: Vec<u32>,
    },
    Concat(NodeId, NodeId),
    SumAll(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: NodeId,
        target: Tensor,
    },
}

enum Val {
    Owned(Tensor),
    Param(usize),
}

struct Node {
    op: Op,
    val: Val,
}

/// One forward pass worth of recorded operations.
///
/// Consumed by [`Tape::backward`], so a tape can be replayed at most once.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
    input: Option<NodeId>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of the given slices, which the
    // callers construct from the tensor shapes checked at record time.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Effective weights for a tropical reduction: entries removed by the
/// parameter mask or the per-pass drop mask become `neutral`.
fn effective<'a>(
    w: &'a Tensor,
    mask: Option<&[bool]>,
    drop: Option<&[bool]>,
    neutral: f64,
) -> std::borrow::Cow<'a, [f64]> {
    if mask.is_none() && drop.is_none() {
        return std::borrow::Cow::Borrowed(w.data());
    }
    let mut out = w.data().to_vec();
    for (k, v) in out.iter_mut().enumerate() {
        let kept = mask.is_none_or(|m| m[k]) && drop.is_none_or(|d| d[k]);
        if !kept {
            *v = neutral;
        }
    }
    std::borrow::Cow::Owned(out)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            input: None,
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id].val {
            Val::Owned(t) => t,
            Val::Param(p) => &self.params.by_index(*p).value,
        }
    }

    /// Selection indices recorded by a hard tropical node (max path first
    /// for dilation/erosion pairs).
    pub fn selections(&self, id: NodeId) -> Option<(&[u32], Option<&[u32]>)> {
        match &self.nodes[id].op {
            Op::Tropical { arg, .. } | Op::TropConv { arg, .. } | Op::MaxPieces { arg, .. } => {
                Some((arg, None))
            }
            Op::Pair { hi_arg, lo_arg, .. } | Op::PairConv { hi_arg, lo_arg, .. } => {
                Some((hi_arg, Some(lo_arg)))
            }
            _ => None,
        }
    }

    /// Every discrete branch taken in the pass: tropical selections and
    /// ReLU/maxout choices, in node order. Two passes with equal signatures
    /// are the same affine piece.
    pub fn branch_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some((a, b)) = self.selections(id) {
                sig.extend_from_slice(a);
                if let Some(b) = b {
                    sig.extend_from_slice(b);
                }
            } else if let Op::Relu(x) = node.op {
                sig.extend(self.value(x).data().iter().map(|&v| u32::from(v > 0.0)));
            }
        }
        sig
    }

    fn push(&mut self, op: Op, t: Tensor) -> NodeId {
        debug_assert!(!t.has_nan(), "NaN produced by tape op");
        self.nodes.push(Node { op, val: Val::Owned(t) });
        self.nodes.len() - 1
    }

    fn param_index(&self, id: NodeId) -> Option<usize> {
        match self.nodes[id].val {
            Val::Param(p) => Some(p),
            Val::Owned(_) => None,
        }
    }

    fn mask_of(&self, id: NodeId) -> Option<&'p [bool]> {
        self.param_index(id)
            .and_then(|p| self.params.by_index(p).mask.as_deref())
    }

    /// Records the network input; its gradient is reported as `"input"`.
    pub fn input(&mut self, x: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, x);
        self.input = Some(id);
        id
    }

    pub fn constant(&mut self, x: Tensor) -> NodeId {
        self.push(Op::Leaf, x)
    }

    pub fn param(&mut self, id: &str) -> Result<NodeId> {
        let p = self
            .params
            .index_of(id)
            .ok_or_else(|| Error::MissingParameter(id.to_string()))?;
        if let Some(&n) = self.param_nodes.get(&p) {
            return Ok(n);
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            val: Val::Param(p),
        });
        let n = self.nodes.len() - 1;
        self.param_nodes.insert(p, n);
        Ok(n)
    }

    fn batch_cols(&self, x: NodeId) -> (usize, usize) {
        let t = self.value(x);
        (t.rows(), t.cols())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), t))
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.cols();
        if tb.len() != n {
            return Err(dim_err(format!("row bias {} vs width {n}", tb.len())));
        }
        let mut t = tx.clone();
        for r in 0..t.rows() {
            for (v, bb) in t.row_mut(r).iter_mut().zip(tb.data()) {
                *v += bb;
            }
        }
        Ok(self.push(Op::AddRow { x, b }, t))
    }

    /// `x * s` with `s` broadcast over rows.
    pub fn mul_row(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (tx, ts) = (self.value(x), self.value(s));
        let n = tx.cols();
        if ts.len() != n {
            return Err(dim_err(format!("row scale {} vs width {n}", ts.len())));
        }
        let mut t = tx.clone();
        for r in 0..t.rows() {
            for (v, ss) in t.row_mut(r).iter_mut().zip(ts.data()) {
                *v *= ss;
            }
        }
        Ok(self.push(Op::MulRow { x, s }, t))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x).map(|v| v * c);
        self.push(Op::Scale { x, c }, t)
    }

    /// `y = x W^T + b` with `W` stored `[n_out x n_in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (bsz, n_in) = self.batch_cols(x);
        let tw = self.value(w);
        if tw.shape().len() != 2 || tw.shape()[1] != n_in {
            return Err(dim_err(format!("linear weight {:?} vs input width {n_in}", tw.shape())));
        }
        let n_out = tw.shape()[0];
        let mut out = vec![0.0; bsz * n_out];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != n_out {
                return Err(dim_err("linear bias length"));
            }
            for r in 0..bsz {
                out[r * n_out..(r + 1) * n_out].copy_from_slice(tb.data());
            }
        }
        gemm(
            bsz,
            n_in,
            n_out,
            self.value(x).data(),
            (n_in, 1),
            tw.data(),
            (1, n_in),
            1.0,
            &mut out,
            n_out,
        );
        let t = Tensor::new(vec![bsz, n_out], out)?;
        Ok(self.push(Op::Linear { x, w, b }, t))
    }

    /// Biased tropical product `b (+) W (x) x` per row. `drop` removes
    /// weight entries for this pass only.
    pub fn tropical(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        mode: TropicalMode,
        drop: Option<&[bool]>,
    ) -> Result<NodeId> {
        let (bsz, n_in) = self.batch_cols(x);
        let tw = self.value(w);
        if tw.shape().len() != 2 || tw.shape()[1] != n_in {
            return Err(dim_err(format!("tropical weight {:?} vs input width {n_in}", tw.shape())));
        }
        let n_out = tw.shape()[0];
        let bias = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.len() != n_out {
                    return Err(dim_err("tropical bias length"));
                }
                Some(tb.data())
            }
            None => None,
        };
        let weff = effective(tw, self.mask_of(w), drop, mode.neutral());
        let mut out = vec![0.0; bsz * n_out];
        let mut arg = vec![0u32; bsz * n_out];
        tropical::reduce_rows(self.value(x).data(), &weff, n_in, bias, mode, &mut out, &mut arg)?;
        let t = Tensor::new(vec![bsz, n_out], out)?;
        Ok(self.push(Op::Tropical { x, w, b, arg }, t))
    }

    /// Dilation `bmax (+) wmax (x) x` and erosion `bmin (+)' wmin (x)' x`,
    /// combined per [`Mix`]. Pass the same node as `wmax` and `wmin` for
    /// shared weights.
    #[allow(clippy::too_many_arguments)]
    pub fn dilation_erosion(
        &mut self,
        x: NodeId,
        wmax: NodeId,
        wmin: NodeId,
        bmax: Option<NodeId>,
        bmin: Option<NodeId>,
        mix: Mix,
        drop: Option<&[bool]>,
    ) -> Result<NodeId> {
        let (bsz, n_in) = self.batch_cols(x);
        let (ta, tb) = (self.value(wmax), self.value(wmin));
        if ta.shape() != tb.shape() || ta.shape().len() != 2 || ta.shape()[1] != n_in {
            return Err(dim_err(format!(
                "dilation/erosion weights {:?}/{:?} vs input width {n_in}",
                ta.shape(),
                tb.shape()
            )));
        }
        let n_out = ta.shape()[0];
        let bias_of = |b: Option<NodeId>| -> Result<Option<&[f64]>> {
            match b {
                Some(b) => {
                    let t = self.value(b);
                    if t.len() != n_out {
                        return Err(dim_err("dilation/erosion bias length"));
                    }
                    Ok(Some(t.data()))
                }
                None => Ok(None),
            }
        };
        let (bh, bl) = (bias_of(bmax)?, bias_of(bmin)?);
        let lam: Option<&[f64]> = match mix {
            Mix::Learned(l) => {
                let t = self.value(l);
                if t.len() != n_out {
                    return Err(dim_err("lambda length"));
                }
                Some(t.data())
            }
            Mix::Fixed(l) if !(0.0..=1.0).contains(&l) => {
                return Err(Error::Parameter(format!("lambda {l} outside [0, 1]")));
            }
            _ => None,
        };
        let ea = effective(ta, self.mask_of(wmax), drop, f64::NEG_INFINITY);
        let eb = effective(tb, self.mask_of(wmin), drop, f64::INFINITY);
        let o = tropical::reduce_pair(self.value(x).data(), &ea, &eb, n_in, bh, bl)?;
        let mut out = vec![0.0; bsz * n_out];
        for r in 0..bsz {
            for i in 0..n_out {
                let k = r * n_out + i;
                out[k] = match mix {
                    Mix::Sum => o.hi[k] + o.lo[k],
                    Mix::Fixed(l) => l * o.hi[k] + (1.0 - l) * o.lo[k],
                    Mix::Learned(_) => {
                        let l = lam.unwrap()[i];
                        l * o.hi[k] + (1.0 - l) * o.lo[k]
                    }
                };
            }
        }
        let t = Tensor::new(vec![bsz, n_out], out)?;
        Ok(self.push(
            Op::Pair {
                x,
                wmax,
                wmin,
                bmax,
                bmin,
                mix,
                hi: o.hi,
                lo: o.lo,
                hi_arg: o.hi_arg,
                lo_arg: o.lo_arg,
            },
            t,
        ))
    }

    fn conv_geom(&self, x: NodeId, k: NodeId, in_shape: (usize, usize, usize), padding: usize, stride: usize) -> Result<ConvGeom> {
        let (c, h, w) = in_shape;
        let (_, cols) = self.batch_cols(x);
        if cols != c * h * w {
            return Err(dim_err(format!("conv input width {cols} vs {c}x{h}x{w}")));
        }
        let ks = self.value(k).shape();
        if ks.len() != 4 || ks[1] != c {
            return Err(dim_err(format!("conv kernel {ks:?} vs {c} input channels")));
        }
        ConvGeom::new(c, h, w, ks[0], ks[2], ks[3], padding, stride)
    }

    /// Single-mode tropical convolution; `b = None` means no bias.
    #[allow(clippy::too_many_arguments)]
    pub fn tropical_conv(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        mode: TropicalMode,
        in_shape: (usize, usize, usize),
        padding: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let geom = self.conv_geom(x, k, in_shape, padding, stride)?;
        let bias: Vec<f64> = match b {
            Some(b) => self.value(b).data().to_vec(),
            None => vec![mode.neutral(); geom.c_out],
        };
        if bias.len() != geom.c_out {
            return Err(dim_err("conv bias length"));
        }
        let (bsz, _) = self.batch_cols(x);
        let keff = effective(self.value(k), self.mask_of(k), None, mode.neutral());
        let (il, ol) = (geom.in_len(), geom.out_len());
        let mut out = vec![0.0; bsz * ol];
        let mut arg = vec![0u32; bsz * ol];
        let xd = self.value(x).data();
        for s in 0..bsz {
            tropical::conv_reduce(
                &geom,
                &xd[s * il..(s + 1) * il],
                &keff,
                &bias,
                mode,
                &mut out[s * ol..(s + 1) * ol],
                &mut arg[s * ol..(s + 1) * ol],
            )?;
        }
        let t = Tensor::new(vec![bsz, ol], out)?;
        Ok(self.push(Op::TropConv { x, k, b, geom, arg }, t))
    }

    /// Sum of a dilation and an erosion sharing kernel `k`.
    pub fn dilation_erosion_conv(
        &mut self,
        x: NodeId,
        k: NodeId,
        bmax: NodeId,
        bmin: NodeId,
        in_shape: (usize, usize, usize),
        padding: usize,
    ) -> Result<NodeId> {
        let geom = self.conv_geom(x, k, in_shape, padding, 1)?;
        let (bh, bl) = (self.value(bmax).data(), self.value(bmin).data());
        if bh.len() != geom.c_out || bl.len() != geom.c_out {
            return Err(dim_err("conv bias length"));
        }
        let (bsz, _) = self.batch_cols(x);
        let mask = self.mask_of(k);
        let ka = effective(self.value(k), mask, None, f64::NEG_INFINITY);
        let kb = effective(self.value(k), mask, None, f64::INFINITY);
        let (il, ol) = (geom.in_len(), geom.out_len());
        let mut out = vec![0.0; bsz * ol];
        let mut hi_arg = vec![0u32; bsz * ol];
        let mut lo_arg = vec![0u32; bsz * ol];
        let mut lo = vec![0.0; ol];
        let xd = self.value(x).data();
        for s in 0..bsz {
            let xs = &xd[s * il..(s + 1) * il];
            let o = &mut out[s * ol..(s + 1) * ol];
            tropical::conv_reduce(&geom, xs, &ka, bh, TropicalMode::MaxPlus, o, &mut hi_arg[s * ol..(s + 1) * ol])?;
            tropical::conv_reduce(&geom, xs, &kb, bl, TropicalMode::MinPlus, &mut lo, &mut lo_arg[s * ol..(s + 1) * ol])?;
            for (a, b) in o.iter_mut().zip(&lo) {
                *a += b;
            }
        }
        let t = Tensor::new(vec![bsz, ol], out)?;
        Ok(self.push(
            Op::PairConv {
                x,
                k,
                bmax,
                bmin,
                geom,
                hi_arg,
                lo_arg,
            },
            t,
        ))
    }

    /// LogSumExp relaxation of [`Tape::tropical`].
    pub fn soft_tropical(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        mode: TropicalMode,
        temperature: f64,
    ) -> Result<NodeId> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
        }
        let (bsz, n_in) = self.batch_cols(x);
        let tw = self.value(w);
        if tw.shape().len() != 2 || tw.shape()[1] != n_in {
            return Err(dim_err("soft tropical weight shape"));
        }
        let n_out = tw.shape()[0];
        let weff = effective(tw, self.mask_of(w), None, mode.neutral());
        let bias = b.map(|b| self.value(b).data());
        if bias.is_some_and(|b| b.len() != n_out) {
            return Err(dim_err("soft tropical bias length"));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; bsz * n_out];
        let mut probs = Vec::with_capacity(bsz * n_out * (n_in + 1));
        let mut cands = Vec::with_capacity(n_in + 1);
        let mut p = Vec::with_capacity(n_in + 1);
        for s in 0..bsz {
            let xr = &xd[s * n_in..(s + 1) * n_in];
            for i in 0..n_out {
                cands.clear();
                cands.push(bias.map_or(mode.neutral(), |b| b[i]));
                cands.extend(weff[i * n_in..(i + 1) * n_in].iter().zip(xr).map(|(a, c)| a + c));
                let v = tropical::soft_extremum(&cands, mode, temperature, Some(&mut p));
                if !v.is_finite() {
                    return Err(Error::DegenerateRow { row: i });
                }
                out[s * n_out + i] = v;
                probs.extend_from_slice(&p);
            }
        }
        let t = Tensor::new(vec![bsz, n_out], out)?;
        Ok(self.push(Op::Soft { x, w, b, probs }, t))
    }

    /// LogSumExp relaxation of [`Tape::tropical_conv`] (unit stride).
    #[allow(clippy::too_many_arguments)]
    pub fn soft_tropical_conv(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: NodeId,
        mode: TropicalMode,
        in_shape: (usize, usize, usize),
        padding: usize,
        temperature: f64,
    ) -> Result<NodeId> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
        }
        let geom = self.conv_geom(x, k, in_shape, padding, 1)?;
        let bias = self.value(b).data();
        if bias.len() != geom.c_out {
            return Err(dim_err("conv bias length"));
        }
        let (bsz, _) = self.batch_cols(x);
        let keff = effective(self.value(k), self.mask_of(k), None, mode.neutral());
        let (il, ol) = (geom.in_len(), geom.out_len());
        let mut out = vec![0.0; bsz * ol];
        let mut probs = Vec::new();
        let mut cands = Vec::new();
        let xd = self.value(x).data();
        for s in 0..bsz {
            tropical::soft_conv_reduce(
                &geom,
                &xd[s * il..(s + 1) * il],
                &keff,
                bias,
                mode,
                temperature,
                &mut out[s * ol..(s + 1) * ol],
                Some(&mut probs),
                &mut cands,
            )?;
        }
        let t = Tensor::new(vec![bsz, ol], out)?;
        Ok(self.push(Op::SoftConv { x, k, b, geom, probs }, t))
    }

    /// Linear (cross-correlation) convolution. With `depthwise`, the kernel
    /// is `[C x 1 x kH x kW]` and channel `c` only sees input channel `c`.
    #[allow(clippy::too_many_arguments)]
    pub fn linear_conv(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        in_shape: (usize, usize, usize),
        padding: usize,
        stride: usize,
        depthwise: bool,
    ) -> Result<NodeId> {
        let (c, h, w) = in_shape;
        let (bsz, cols) = self.batch_cols(x);
        if cols != c * h * w {
            return Err(dim_err(format!("conv input width {cols} vs {c}x{h}x{w}")));
        }
        let ks = self.value(k).shape().to_vec();
        if ks.len() != 4 || (depthwise && (ks[0] != c || ks[1] != 1)) || (!depthwise && ks[1] != c) {
            return Err(dim_err(format!("linear conv kernel {ks:?} vs {c} channels")));
        }
        let geom = ConvGeom::new(c, h, w, ks[0], ks[2], ks[3], padding, stride)?;
        if let Some(b) = b {
            if self.value(b).len() != geom.c_out {
                return Err(dim_err("conv bias length"));
            }
        }
        let (il, ol) = (geom.in_len(), geom.out_len());
        let kd = self.value(k).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; bsz * ol];
        let taps = geom.kh * geom.kw;
        let cin_of = if depthwise { 1 } else { geom.c_in };
        for s in 0..bsz {
            let xs = &xd[s * il..(s + 1) * il];
            let os = &mut out[s * ol..(s + 1) * ol];
            for co in 0..geom.c_out {
                let bias = b.map_or(0.0, |b| self.value(b).data()[co]);
                for oy in 0..geom.h_out {
                    for ox in 0..geom.w_out {
                        let mut acc = bias;
                        for ci in 0..cin_of {
                            let src = if depthwise { co } else { ci };
                            for ky in 0..geom.kh {
                                for kx in 0..geom.kw {
                                    if let Some(off) = geom.input_offset(oy, ox, src, ky, kx) {
                                        acc += xs[off] * kd[(co * cin_of + ci) * taps + ky * geom.kw + kx];
                                    }
                                }
                            }
                        }
                        os[(co * geom.h_out + oy) * geom.w_out + ox] = acc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![bsz, ol], out)?;
        Ok(self.push(
            Op::LinConv {
                x,
                k,
                b,
                geom,
                depthwise,
            },
            t,
        ))
    }

    /// `y = U diag(s) V^T x` per row, for square frames `U`, `V`.
    pub fn frame_diag(&mut self, x: NodeId, u: NodeId, s: NodeId, v: NodeId) -> Result<NodeId> {
        let (bsz, n) = self.batch_cols(x);
        let (tu, ts, tv) = (self.value(u), self.value(s), self.value(v));
        if tu.shape() != [n, n] || tv.shape() != [n, n] || ts.len() != n {
            return Err(dim_err(format!("frame of width {n}: U {:?}, s {:?}, V {:?}", tu.shape(), ts.shape(), tv.shape())));
        }
        // proj = x V, i.e. V^T x per row.
        let mut proj = vec![0.0; bsz * n];
        gemm(bsz, n, n, self.value(x).data(), (n, 1), tv.data(), (n, 1), 0.0, &mut proj, n);
        let mut scaled = proj.clone();
        for r in 0..bsz {
            for (a, b) in scaled[r * n..(r + 1) * n].iter_mut().zip(ts.data()) {
                *a *= b;
            }
        }
        let mut out = vec![0.0; bsz * n];
        gemm(bsz, n, n, &scaled, (n, 1), tu.data(), (1, n), 0.0, &mut out, n);
        let t = Tensor::new(vec![bsz, n], out)?;
        Ok(self.push(Op::FrameDiag { x, u, s, v, proj }, t))
    }

    /// Builds a `[C x C x kH x kW]` linear kernel whose tap `t` matrix is
    /// `U_t diag(s_t) V_t^T`, from `U, V: [T x C x C]` and `s: [T x C]`.
    pub fn frame_kernel(&mut self, u: NodeId, s: NodeId, v: NodeId, kh: usize, kw: usize) -> Result<NodeId> {
        let (tu, ts, tv) = (self.value(u), self.value(s), self.value(v));
        let taps = kh * kw;
        let c = ts.len() / taps;
        if tu.shape() != [taps, c, c] || tv.shape() != [taps, c, c] || ts.shape() != [taps, c] {
            return Err(dim_err("frame kernel shapes"));
        }
        let mut k = vec![0.0; c * c * taps];
        for t in 0..taps {
            let (ub, vb, sb) = (t * c * c, t * c * c, t * c);
            for i in 0..c {
                for j in 0..c {
                    let mut acc = 0.0;
                    for r in 0..c {
                        acc += tu.data()[ub + i * c + r] * ts.data()[sb + r] * tv.data()[vb + j * c + r];
                    }
                    k[(i * c + j) * taps + t] = acc;
                }
            }
        }
        let tk = Tensor::new(vec![c, c, kh, kw], k)?;
        Ok(self.push(Op::FrameKernel { u, s, v }, tk))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), t)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), t)
    }

    /// Max over `pieces` blocks: input `[B x P*n]`, unit `i` of piece `k`
    /// at column `k*n + i`; output `[B x n]`.
    pub fn max_pieces(&mut self, x: NodeId, pieces: usize) -> Result<NodeId> {
        let (bsz, cols) = self.batch_cols(x);
        if pieces == 0 || cols % pieces != 0 {
            return Err(dim_err(format!("{cols} columns do not split into {pieces} pieces")));
        }
        let n = cols / pieces;
        let xd = self.value(x).data();
        let mut out = vec![0.0; bsz * n];
        let mut arg = vec![0u32; bsz * n];
        for r in 0..bsz {
            for i in 0..n {
                let mut best = xd[r * cols + i];
                let mut sel = 0;
                for k in 1..pieces {
                    let v = xd[r * cols + k * n + i];
                    if v > best {
                        best = v;
                        sel = k;
                    }
                }
                out[r * n + i] = best;
                arg[r * n + i] = sel as u32;
            }
        }
        let t = Tensor::new(vec![bsz, n], out)?;
        Ok(self.push(Op::MaxPieces { x, arg }, t))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(dim_err("concat row mismatch"));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.rows() {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let t = Tensor::new(vec![ta.rows(), ca + cb], out)?;
        Ok(self.push(Op::Concat(a, b), t))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        let (loss, probs) = crate::optim::softmax_cross_entropy(t, labels)?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(dim_err(format!("mse {} vs {} entries", p.len(), target.len())));
        }
        let loss = crate::optim::mse(p.data(), target.data()).0;
        Ok(self.push(
            Op::Mse {
                pred,
                target: target.clone(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Reverse pass from `out` seeded with `seed`.
    pub fn backward(self, out: NodeId, seed: &Tensor) -> Result<Gradients> {
        if self.value(out).shape() != seed.shape() {
            return Err(dim_err(format!(
                "seed shape {:?} vs output {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[out] = Some(seed.data().to_vec());
        for id in (0..=out).rev() {
            let Some(gy) = g[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                g[id] = Some(gy);
                continue;
            }
            self.backprop(id, &gy, &mut g);
        }
        let mut grads = Gradients::default();
        for (&p, &n) in &self.param_nodes {
            let param = self.params.by_index(p);
            let mut t = Tensor::zeros(param.value.shape().to_vec());
            if let Some(gv) = g[n].take() {
                t.data_mut().copy_from_slice(&gv);
            }
            if let Some(m) = &param.mask {
                for (v, &keep) in t.data_mut().iter_mut().zip(m) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
            grads.params.insert(param.id.clone(), t);
        }
        if let Some(i) = self.input {
            let shape = self.value(i).shape().to_vec();
            let data = g[i].take().unwrap_or_else(|| vec![0.0; self.value(i).len()]);
            grads.input = Some(Tensor::new(shape, data)?);
        }
        Ok(grads)
    }

    fn backprop(&self, id: NodeId, gy: &[f64], g: &mut [Option<Vec<f64>>]) {
        let zeros = |n: NodeId| vec![0.0; self.value(n).len()];
        macro_rules! acc {
            ($n:expr) => {{
                let n = $n;
                if g[n].is_none() {
                    g[n] = Some(zeros(n));
                }
                g[n].as_mut().unwrap()
            }};
        }
        let out_cols = self.value(id).cols();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (d, s) in acc!(*a).iter_mut().zip(gy) {
                    *d += s;
                }
                for (d, s) in acc!(*b).iter_mut().zip(gy) {
                    *d += s;
                }
            }
            Op::AddRow { x, b } => {
                for (d, s) in acc!(*x).iter_mut().zip(gy) {
                    *d += s;
                }
                let gb = acc!(*b);
                for row in gy.chunks(out_cols) {
                    for (d, s) in gb.iter_mut().zip(row) {
                        *d += s;
                    }
                }
            }
            Op::MulRow { x, s } => {
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                {
                    let gx = acc!(*x);
                    for (k, d) in gx.iter_mut().enumerate() {
                        *d += gy[k] * sv[k % out_cols];
                    }
                }
                let gs = acc!(*s);
                for (k, &gk) in gy.iter().enumerate() {
                    gs[k % out_cols] += gk * xv[k];
                }
            }
            Op::Scale { x, c } => {
                for (d, s) in acc!(*x).iter_mut().zip(gy) {
                    *d += c * s;
                }
            }
            Op::Linear { x, w, b } => {
                let (bsz, n_in) = self.batch_cols(*x);
                let n_out = out_cols;
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                gemm(bsz, n_out, n_in, gy, (n_out, 1), wv, (n_in, 1), 1.0, acc!(*x), n_in);
                gemm(n_out, bsz, n_in, gy, (1, n_out), xv, (n_in, 1), 1.0, acc!(*w), n_in);
                if let Some(b) = b {
                    let gb = acc!(*b);
                    for row in gy.chunks(n_out) {
                        for (d, s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Tropical { x, w, b, arg } => {
                let (_, n_in) = self.batch_cols(*x);
                let n_out = out_cols;
                for (k, &sel) in arg.iter().enumerate() {
                    let gk = gy[k];
                    if gk == 0.0 {
                        continue;
                    }
                    let (r, i) = (k / n_out, k % n_out);
                    if sel == 0 {
                        acc!(b.expect("bias selected without a bias"))[i] += gk;
                    } else {
                        let j = sel as usize - 1;
                        acc!(*w)[i * n_in + j] += gk;
                        acc!(*x)[r * n_in + j] += gk;
                    }
                }
            }
            Op::Pair {
                x,
                wmax,
                wmin,
                bmax,
                bmin,
                mix,
                hi,
                lo,
                hi_arg,
                lo_arg,
            } => {
                let (_, n_in) = self.batch_cols(*x);
                let n_out = out_cols;
                let lam = match mix {
                    Mix::Learned(l) => Some(self.value(*l).data()),
                    _ => None,
                };
                for k in 0..gy.len() {
                    let gk = gy[k];
                    if gk == 0.0 {
                        continue;
                    }
                    let (r, i) = (k / n_out, k % n_out);
                    let (ch, cl) = match mix {
                        Mix::Sum => (1.0, 1.0),
                        Mix::Fixed(l) => (*l, 1.0 - l),
                        Mix::Learned(_) => (lam.unwrap()[i], 1.0 - lam.unwrap()[i]),
                    };
                    if let Mix::Learned(l) = mix {
                        acc!(*l)[i] += gk * (hi[k] - lo[k]);
                    }
                    for (sel, c, wn, bn) in [(hi_arg[k], ch, *wmax, *bmax), (lo_arg[k], cl, *wmin, *bmin)] {
                        if c == 0.0 {
                            continue;
                        }
                        if sel == 0 {
                            acc!(bn.expect("bias selected without a bias"))[i] += c * gk;
                        } else {
                            let j = sel as usize - 1;
                            acc!(wn)[i * n_in + j] += c * gk;
                            acc!(*x)[r * n_in + j] += c * gk;
                        }
                    }
                }
            }
            Op::TropConv { x, k, b, geom, arg } => {
                let (il, ol) = (geom.in_len(), geom.out_len());
                self.conv_route(gy, arg, *x, *k, *b, geom, il, ol, g);
            }
            Op::PairConv {
                x,
                k,
                bmax,
                bmin,
                geom,
                hi_arg,
                lo_arg,
            } => {
                let (il, ol) = (geom.in_len(), geom.out_len());
                self.conv_route(gy, hi_arg, *x, *k, Some(*bmax), geom, il, ol, g);
                self.conv_route(gy, lo_arg, *x, *k, Some(*bmin), geom, il, ol, g);
            }
            Op::Soft { x, w, b, probs } => {
                let (_, n_in) = self.batch_cols(*x);
                let n_out = out_cols;
                let per = n_in + 1;
                for (k, &gk) in gy.iter().enumerate() {
                    if gk == 0.0 {
                        continue;
                    }
                    let (r, i) = (k / n_out, k % n_out);
                    let p = &probs[k * per..(k + 1) * per];
                    if let Some(b) = b {
                        acc!(*b)[i] += gk * p[0];
                    }
                    {
                        let gw = acc!(*w);
                        for j in 0..n_in {
                            gw[i * n_in + j] += gk * p[j + 1];
                        }
                    }
                    let gx = acc!(*x);
                    for j in 0..n_in {
                        gx[r * n_in + j] += gk * p[j + 1];
                    }
                }
            }
            Op::SoftConv { x, k, b, geom, probs } => {
                let (il, ol) = (geom.in_len(), geom.out_len());
                let taps = geom.kh * geom.kw;
                let per = geom.c_in * taps + 1;
                for (idx, &gk) in gy.iter().enumerate() {
                    if gk == 0.0 {
                        continue;
                    }
                    let (s, o) = (idx / ol, idx % ol);
                    let co = o / (geom.h_out * geom.w_out);
                    let oy = (o / geom.w_out) % geom.h_out;
                    let ox = o % geom.w_out;
                    let p = &probs[idx * per..(idx + 1) * per];
                    acc!(*b)[co] += gk * p[0];
                    for c in 0..geom.c_in {
                        for ky in 0..geom.kh {
                            for kx in 0..geom.kw {
                                let t = (c * geom.kh + ky) * geom.kw + kx;
                                let Some(off) = geom.input_offset(oy, ox, c, ky, kx) else {
                                    continue;
                                };
                                let pv = gk * p[t + 1];
                                acc!(*k)[co * geom.c_in * taps + t] += pv;
                                acc!(*x)[s * il + off] += pv;
                            }
                        }
                    }
                }
            }
            Op::LinConv {
                x,
                k,
                b,
                geom,
                depthwise,
            } => {
                let (bsz, _) = self.batch_cols(*x);
                let (il, ol) = (geom.in_len(), geom.out_len());
                let taps = geom.kh * geom.kw;
                let cin_of = if *depthwise { 1 } else { geom.c_in };
                let kd = self.value(*k).data();
                let xd = self.value(*x).data();
                let mut gk = vec![0.0; kd.len()];
                let mut gx = vec![0.0; xd.len()];
                let mut gb = vec![0.0; geom.c_out];
                for s in 0..bsz {
                    for co in 0..geom.c_out {
                        for oy in 0..geom.h_out {
                            for ox in 0..geom.w_out {
                                let gv = gy[s * ol + (co * geom.h_out + oy) * geom.w_out + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                gb[co] += gv;
                                for ci in 0..cin_of {
                                    let src = if *depthwise { co } else { ci };
                                    for ky in 0..geom.kh {
                                        for kx in 0..geom.kw {
                                            if let Some(off) = geom.input_offset(oy, ox, src, ky, kx) {
                                                let kidx = (co * cin_of + ci) * taps + ky * geom.kw + kx;
                                                gk[kidx] += gv * xd[s * il + off];
                                                gx[s * il + off] += gv * kd[kidx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for (d, s) in acc!(*k).iter_mut().zip(&gk) {
                    *d += s;
                }
                for (d, s) in acc!(*x).iter_mut().zip(&gx) {
                    *d += s;
                }
                if let Some(b) = b {
                    for (d, s) in acc!(*b).iter_mut().zip(&gb) {
                        *d += s;
                    }
                }
            }
            Op::FrameDiag { x, u, s, v, proj } => {
                let (bsz, n) = self.batch_cols(*x);
                let (uv, sv, vv) = (self.value(*u).data(), self.value(*s).data(), self.value(*v).data());
                let xv = self.value(*x).data();
                // gs_pre = gy U (cotangent of the scaled projection).
                let mut gsp = vec![0.0; bsz * n];
                gemm(bsz, n, n, gy, (n, 1), uv, (n, 1), 0.0, &mut gsp, n);
                {
                    let gsig = acc!(*s);
                    for r in 0..bsz {
                        for i in 0..n {
                            gsig[i] += gsp[r * n + i] * proj[r * n + i];
                        }
                    }
                }
                // gU += gy^T (proj * s)
                let mut scaled = proj.clone();
                for r in 0..bsz {
                    for i in 0..n {
                        scaled[r * n + i] *= sv[i];
                    }
                }
                gemm(n, bsz, n, gy, (1, n), &scaled, (n, 1), 1.0, acc!(*u), n);
                let mut gp = gsp;
                for r in 0..bsz {
                    for i in 0..n {
                        gp[r * n + i] *= sv[i];
                    }
                }
                gemm(n, bsz, n, xv, (1, n), &gp, (n, 1), 1.0, acc!(*v), n);
                gemm(bsz, n, n, &gp, (n, 1), vv, (1, n), 1.0, acc!(*x), n);
            }
            Op::FrameKernel { u, s, v } => {
                let (tu, ts, tv) = (self.value(*u), self.value(*s), self.value(*v));
                let taps = tu.shape()[0];
                let c = tu.shape()[1];
                let (ud, sd, vd) = (tu.data(), ts.data(), tv.data());
                let mut gu = vec![0.0; ud.len()];
                let mut gs = vec![0.0; sd.len()];
                let mut gv = vec![0.0; vd.len()];
                for t in 0..taps {
                    let base = t * c * c;
                    for i in 0..c {
                        for j in 0..c {
                            let gk = gy[(i * c + j) * taps + t];
                            if gk == 0.0 {
                                continue;
                            }
                            for r in 0..c {
                                let (uu, ss, vvv) = (ud[base + i * c + r], sd[t * c + r], vd[base + j * c + r]);
                                gu[base + i * c + r] += gk * ss * vvv;
                                gs[t * c + r] += gk * uu * vvv;
                                gv[base + j * c + r] += gk * uu * ss;
                            }
                        }
                    }
                }
                for (n, buf) in [(*u, gu), (*s, gs), (*v, gv)] {
                    for (d, x) in acc!(n).iter_mut().zip(&buf) {
                        *d += x;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                for (k, d) in acc!(*x).iter_mut().enumerate() {
                    if xv[k] > 0.0 {
                        *d += gy[k];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = self.value(id).data();
                for (k, d) in acc!(*x).iter_mut().enumerate() {
                    *d += gy[k] * yv[k] * (1.0 - yv[k]);
                }
            }
            Op::MaxPieces { x, arg } => {
                let (_, cols) = self.batch_cols(*x);
                let n = out_cols;
                let gx = acc!(*x);
                for (k, &sel) in arg.iter().enumerate() {
                    let (r, i) = (k / n, k % n);
                    gx[r * cols + sel as usize * n + i] += gy[k];
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                {
                    let ga = acc!(*a);
                    for (r, row) in gy.chunks(ca + cb).enumerate() {
                        for (d, s) in ga[r * ca..(r + 1) * ca].iter_mut().zip(&row[..ca]) {
                            *d += s;
                        }
                    }
                }
                let gb = acc!(*b);
                for (r, row) in gy.chunks(ca + cb).enumerate() {
                    for (d, s) in gb[r * cb..(r + 1) * cb].iter_mut().zip(&row[ca..]) {
                        *d += s;
                    }
                }
            }
            Op::SumAll(x) => {
                for d in acc!(*x).iter_mut() {
                    *d += gy[0];
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).cols();
                let bsz = labels.len() as f64;
                let gl = acc!(*logits);
                for (r, &lab) in labels.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == lab { 1.0 } else { 0.0 };
                        gl[r * k + c] += gy[0] * (probs[r * k + c] - onehot) / bsz;
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let n = pv.len() as f64;
                for (k, d) in acc!(*pred).iter_mut().enumerate() {
                    *d += gy[0] * 2.0 * (pv[k] - target.data()[k]) / n;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_route(
        &self,
        gy: &[f64],
        arg: &[u32],
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        geom: &ConvGeom,
        il: usize,
        ol: usize,
        g: &mut [Option<Vec<f64>>],
    ) {
        let taps = geom.kh * geom.kw;
        for (idx, &sel) in arg.iter().enumerate() {
            let gk = gy[idx];
            if gk == 0.0 {
                continue;
            }
            let (s, o) = (idx / ol, idx % ol);
            let co = o / (geom.h_out * geom.w_out);
            if sel == 0 {
                let b = b.expect("bias selected without a bias");
                g[b].get_or_insert_with(|| vec![0.0; self.value(b).len()])[co] += gk;
                continue;
            }
            let t = sel as usize - 1;
            let c = t / taps;
            let ky = (t % taps) / geom.kw;
            let kx = t % geom.kw;
            let oy = (o / geom.w_out) % geom.h_out;
            let ox = o % geom.w_out;
            let off = geom
                .input_offset(oy, ox, c, ky, kx)
                .expect("padding tap selected");
            g[k].get_or_insert_with(|| vec![0.0; self.value(k).len()])[co * geom.c_in * taps + t] += gk;
            g[x].get_or_insert_with(|| vec![0.0; il * self.value(x).rows()])[s * il + off] += gk;
        }
    }
}
