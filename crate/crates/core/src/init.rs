//! Parameter initialization.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerKind, LayerSpec, NetworkSpec, ParamDecl};
use crate::model::Network;
use crate::param::{ParamSet, Parameter};
use crate::tensor::Tensor;

/// Default standard deviation of the per-unit scale activation.
pub const ALPHA_STD: f64 = 1.0 / 3.46;
/// Resamples allowed when an SVD frame fails its orthonormality check.
pub const SVD_RETRIES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    /// Mean and std of max-/min-plus perceptron weights and biases.
    pub mp_mean: f64,
    pub mp_std: f64,
    /// Std of zero-mean DEP, MPM, hybrid and morphological conv weights and
    /// biases.
    pub morph_std: f64,
    /// Std of zero-mean per-unit scales.
    pub alpha_std: f64,
    /// Std of zero-mean depthwise conv activation kernels.
    pub conv_act_std: f64,
    /// `lambda ~ U(lambda_lo, lambda_hi)`.
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    /// Zero the weights and biases of the first morphological layer.
    pub zero_first_layer: bool,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self {
            mp_mean: -5.0 / 3.0,
            mp_std: 3.0,
            morph_std: 1.0,
            alpha_std: ALPHA_STD,
            conv_act_std: 1.0,
            lambda_lo: 0.0,
            lambda_hi: 1.0,
            zero_first_layer: false,
        }
    }
}

impl InitScheme {
    /// Defaults with the first morphological layer zeroed, as used on MNIST.
    pub fn mnist() -> Self {
        Self {
            zero_first_layer: true,
            ..Self::default()
        }
    }
}

fn normal(mean: f64, std: f64) -> Result<Normal<f64>> {
    Normal::new(mean, std).map_err(|e| Error::Scheme(format!("bad normal({mean}, {std}): {e}")))
}

fn fill_normal(shape: &[usize], mean: f64, std: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let d = normal(mean, std)?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect())
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let b = glorot_bound(fan_in, fan_out);
    let d = Uniform::new_inclusive(-b, b).map_err(|e| Error::Scheme(e.to_string()))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect())
}

/// SVD of a square matrix with singular values sorted in descending order
/// and made non-negative by flipping the matching `V` column.
pub struct Frame {
    pub u: Tensor,
    pub sigma: Vec<f64>,
    pub v: Tensor,
}

/// `max |Q^T Q - I|` for a square `Q`.
pub fn orthonormality_error(q: &Tensor) -> f64 {
    let n = q.rows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..n).map(|r| q.at2(r, i) * q.at2(r, j)).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Decomposes `a = U diag(sigma) V^T`.
pub fn svd_frame(a: &Tensor) -> Result<Frame> {
    let n = a.rows();
    if a.shape() != [n, n] {
        return Err(Error::Init(format!("frame source must be square, got {:?}", a.shape())));
    }
    let m = DMatrix::from_row_slice(n, n, a.data());
    let svd = m.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return Err(Error::Init("SVD did not produce both frames".into()));
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut ut = Tensor::zeros(vec![n, n]);
    let mut vt_out = Tensor::zeros(vec![n, n]);
    let mut sigma = vec![0.0; n];
    for (col, &k) in order.iter().enumerate() {
        let s = svd.singular_values[k];
        let sign = if s < 0.0 { -1.0 } else { 1.0 };
        sigma[col] = s * sign;
        for r in 0..n {
            ut.set2(r, col, u[(r, k)]);
            vt_out.set2(r, col, sign * vt[(k, r)]);
        }
    }
    for q in [&ut, &vt_out] {
        let e = orthonormality_error(q);
        if !(e <= 1e-10) {
            return Err(Error::Init(format!("frame is not orthonormal (error {e:e})")));
        }
    }
    Ok(Frame { u: ut, sigma, v: vt_out })
}

/// Glorot-samples an `n x n` matrix and returns its SVD frame, resampling
/// when the decomposition is not accurate enough.
fn sampled_frame(n: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Frame> {
    let mut last = None;
    for _ in 0..SVD_RETRIES {
        let a = glorot(&[n, n], fan_in, fan_out, rng)?;
        match svd_frame(&a) {
            Ok(f) => return Ok(f),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Init("no SVD attempts".into())))
}

fn conv_fans(layer: &LayerSpec) -> (usize, usize) {
    match layer.conv {
        Some(c) => (c.in_channels * c.kernel * c.kernel, c.out_channels * c.kernel * c.kernel),
        None => (layer.n_in, layer.n_out),
    }
}

/// Materializes every parameter `spec` declares. Deterministic in `seed`.
pub fn init_network(spec: &NetworkSpec, scheme: &InitScheme, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decls = spec.param_decls();
    let zero_layer = if scheme.zero_first_layer { spec.first_morphological() } else { None };
    let mut params = ParamSet::new();
    let mut i = 0;
    while i < decls.len() {
        let d = &decls[i];
        let layer = &spec.layers[d.layer];
        // Frames come in (U, s, V) triples sampled together.
        if d.name() == "U" || d.name() == "act_U" {
            let (u, s, v) = (&decls[i], &decls[i + 1], &decls[i + 2]);
            let (uv, sv, vv) = frames_for(layer, u, &mut rng)?;
            params.insert(Parameter::new(u.id.clone(), uv, u.role, u.trainable))?;
            params.insert(Parameter::new(s.id.clone(), sv, s.role, s.trainable))?;
            params.insert(Parameter::new(v.id.clone(), vv, v.role, v.trainable))?;
            i += 3;
            continue;
        }
        let value = if zero_layer == Some(d.layer) && matches!(d.name(), "W" | "M" | "w0" | "m0" | "K") {
            Tensor::zeros(d.shape.clone())
        } else {
            sample(layer, d, scheme, &mut rng)?
        };
        params.insert(Parameter::new(d.id.clone(), value, d.role, d.trainable))?;
        i += 1;
    }
    Network::new(spec.clone(), params)
}

fn frames_for(layer: &LayerSpec, u: &ParamDecl, rng: &mut impl Rng) -> Result<(Tensor, Tensor, Tensor)> {
    if u.name() == "U" {
        let n = layer.n_out;
        let f = sampled_frame(n, n, n, rng)?;
        return Ok((f.u, Tensor::vector(f.sigma), f.v));
    }
    let c = layer.conv.ok_or_else(|| Error::Scheme(format!("`{}` needs conv geometry", u.id)))?.out_channels;
    let (mut us, mut ss, mut vs) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..9 {
        let f = sampled_frame(c, 9 * c, 9 * c, rng)?;
        us.extend_from_slice(f.u.data());
        ss.extend_from_slice(&f.sigma);
        vs.extend_from_slice(f.v.data());
    }
    Ok((
        Tensor::new(vec![9, c, c], us)?,
        Tensor::new(vec![9, c], ss)?,
        Tensor::new(vec![9, c, c], vs)?,
    ))
}

fn sample(layer: &LayerSpec, d: &ParamDecl, s: &InitScheme, rng: &mut impl Rng) -> Result<Tensor> {
    let shape = d.shape.as_slice();
    let uncovered = || Error::Scheme(format!("no init rule for `{}` in a {:?} layer", d.id, layer.kind));
    match (layer.kind, d.name()) {
        (LayerKind::Mp, "W" | "w0") => fill_normal(shape, s.mp_mean, s.mp_std, rng),
        (
            LayerKind::Dep
            | LayerKind::Mpm
            | LayerKind::Rmpm
            | LayerKind::MpmSvd
            | LayerKind::HybridBlock
            | LayerKind::MorphConvS1
            | LayerKind::MorphConvS2,
            "W" | "M" | "w0" | "m0" | "K",
        ) => fill_normal(shape, 0.0, s.morph_std, rng),
        (_, "alpha") => fill_normal(shape, 0.0, s.alpha_std, rng),
        (LayerKind::MorphConvS1, "act") => fill_normal(shape, 0.0, s.conv_act_std, rng),
        (LayerKind::Dep, "lambda") => {
            let u = Uniform::new_inclusive(s.lambda_lo, s.lambda_hi).map_err(|e| Error::Scheme(e.to_string()))?;
            Tensor::new(shape.to_vec(), (0..d.len()).map(|_| u.sample(rng)).collect())
        }
        (LayerKind::Linear | LayerKind::HybridBlock | LayerKind::Maxout, "A") => glorot(shape, layer.n_in, layer.n_out, rng),
        (LayerKind::Conv, "K") => {
            let (fi, fo) = conv_fans(layer);
            glorot(shape, fi, fo, rng)
        }
        (LayerKind::Linear | LayerKind::HybridBlock | LayerKind::Maxout | LayerKind::Conv, "b") => Ok(Tensor::zeros(shape.to_vec())),
        _ => Err(uncovered()),
    }
}
