//! Explicit weight constructions: MPM networks computing affine maps and
//! max-plus-min combinations of them, and Hybrid-MLPs reproducing ReLU and
//! maxout networks on an l1 ball.
//!
//! All constructions route values with large constants `+-C`: a weight of
//! `+C` makes an entry win the maximum, `-C` makes it win the minimum, `0`
//! keeps it out of both, and the `+-C` offsets cancel in the sum.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::layers::{Activation, LayerKind, LayerSpec, NetworkSpec};
use crate::model::Network;
use crate::param::{ParamSet, Parameter};
use crate::tensor::Tensor;

/// `a^T x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub a: Vec<f64>,
    pub b: f64,
}

impl Affine {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + self.b
    }

    fn max_abs_a(&self) -> f64 {
        self.a.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// An affine map to reproduce on the l1 ball of radius `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineTarget {
    pub a: Vec<f64>,
    pub b: f64,
    pub r: f64,
}

/// A built network and the routing constants it uses, one per routed layer.
#[derive(Clone, Debug)]
pub struct Construction {
    pub net: Network,
    pub constants: Vec<f64>,
}

/// Uniform direction on the l1 sphere scaled by `U(0, 1) * r`.
pub fn sample_l1_ball<R: Rng + ?Sized>(d: usize, r: f64, rng: &mut R) -> Vec<f64> {
    let e: Vec<f64> = (0..d).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    let scale = r * rng.random::<f64>();
    e.iter()
        .map(|v| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * scale * v / s
        })
        .collect()
}

/// Builds a [`Network`] from `spec` and a value per declared id.
pub fn assemble(spec: NetworkSpec, mut values: BTreeMap<String, Tensor>) -> Result<Network> {
    let mut params = ParamSet::new();
    for d in spec.param_decls() {
        let v = values.remove(&d.id).ok_or_else(|| Error::MissingParameter(d.id.clone()))?;
        params.insert(Parameter::new(d.id, v, d.role, d.trainable))?;
    }
    if let Some(extra) = values.keys().next() {
        return Err(Error::Parameter(format!("`{extra}` is not declared by the spec")));
    }
    Network::new(spec, params)
}

/// Layers and parameter values under construction.
#[derive(Default)]
struct Builder {
    layers: Vec<LayerSpec>,
    values: BTreeMap<String, Tensor>,
}

impl Builder {
    /// Appends an MPM layer with shared `W`, biases `w0 = m0 = bias` and an
    /// optional per-unit scale.
    fn mpm(&mut self, w: Tensor, bias: Vec<f64>, alpha: Option<Vec<f64>>) {
        let idx = self.layers.len();
        let mut l = LayerSpec::mpm(w.cols(), w.rows());
        l.activation = if alpha.is_some() { Activation::Scale } else { Activation::None };
        self.layers.push(l);
        self.values.insert(format!("{idx}.W"), w);
        self.values.insert(format!("{idx}.w0"), Tensor::vector(bias.clone()));
        self.values.insert(format!("{idx}.m0"), Tensor::vector(bias));
        if let Some(a) = alpha {
            self.values.insert(format!("{idx}.alpha"), Tensor::vector(a));
        }
    }

    fn finish(mut self, d: usize) -> Result<Network> {
        let last = self.layers.pop().expect("at least one layer");
        let idx = self.layers.len();
        self.values.remove(&format!("{idx}.alpha"));
        self.layers.push(last.output());
        assemble(NetworkSpec::new(vec![d], self.layers), self.values)
    }
}

/// First layers of the affine construction for `k` maps on `d` inputs:
/// one layer copying every input into each block and scaling it by the
/// coefficient, then `d - 1` layers summing the last two terms of every
/// block. Leaves `k` outputs holding `a_k^T x`.
fn affine_terms(b: &mut Builder, maps: &[&Affine], d: usize, c: f64) {
    let k = maps.len();
    let mut w = Tensor::zeros(vec![k * d, d]);
    let mut alpha = Vec::with_capacity(k * d);
    for (blk, m) in maps.iter().enumerate() {
        for i in 0..d {
            w.set2(blk * d + i, i, c);
            alpha.push(m.a[i]);
        }
    }
    b.mpm(w, vec![-c; k * d], Some(alpha));
    for n in (2..=d).rev() {
        let mut w = Tensor::zeros(vec![k * (n - 1), k * n]);
        let mut bias = vec![-c; k * (n - 1)];
        for blk in 0..k {
            for i in 0..n - 1 {
                w.set2(blk * (n - 1) + i, blk * n + i, c);
            }
            let sum_row = blk * (n - 1) + n - 2;
            w.set2(sum_row, blk * n + n - 1, -c);
            bias[sum_row] = 0.0;
        }
        b.mpm(w, bias, Some(vec![1.0; k * (n - 1)]));
    }
}

/// MPM network with `d + 1` layers computing `a^T x + b` exactly for
/// `||x||_1 <= r`, using `C = (1 + max |a_i|) r`.
pub fn build_affine_mpm(target: &AffineTarget) -> Result<Construction> {
    let d = target.a.len();
    if d == 0 {
        return Err(Error::Spec("affine target needs at least one input".into()));
    }
    if !(target.r > 0.0) {
        return Err(Error::Spec(format!("ball radius must be positive, got {}", target.r)));
    }
    let map = Affine {
        a: target.a.clone(),
        b: target.b,
    };
    let c = (1.0 + map.max_abs_a()) * target.r;
    let mut b = Builder::default();
    affine_terms(&mut b, &[&map], d, c);
    // Bias layer: max(0, x + b) + min(0, x + b) = x + b.
    b.mpm(Tensor::from_rows(&[vec![target.b]]), vec![0.0], None);
    Ok(Construction {
        net: b.finish(d)?,
        constants: vec![c],
    })
}

/// Routing constant for `maps` on the ball of radius `r`, strictly above
/// `(1 + K max |a|) r + max |b|`.
fn multi_constant(maps: &[&Affine], r: f64) -> f64 {
    let amax = maps.iter().fold(0.0f64, |m, a| m.max(a.max_abs_a()));
    let bmax = maps.iter().fold(0.0f64, |m, a| m.max(a.b.abs()));
    (1.0 + maps.len() as f64 * amax) * r + bmax + 1.0
}

/// MPM network computing `max_k (a_k^T x + b_k) + min_m (c_m^T x + d_m)`
/// exactly on `||x||_1 <= r`: parallel affine blocks followed by one layer
/// routing the first group to the maximum and the second to the minimum.
pub fn build_maxplusmin_mpm(maxes: &[Affine], mins: &[Affine], r: f64) -> Result<Construction> {
    if maxes.is_empty() || mins.is_empty() {
        return Err(Error::Spec("max-plus-min construction needs both target groups".into()));
    }
    if !(r > 0.0) {
        return Err(Error::Spec(format!("ball radius must be positive, got {r}")));
    }
    let maps: Vec<&Affine> = maxes.iter().chain(mins).collect();
    let d = maps[0].a.len();
    if d == 0 || maps.iter().any(|m| m.a.len() != d) {
        return Err(Error::Spec("affine targets need a common positive input width".into()));
    }
    let k = maps.len();
    let c = multi_constant(&maps, r);
    let mut b = Builder::default();
    affine_terms(&mut b, &maps, d, c);
    // Bias layer: W_kk = b_k + C, bias -C.
    let mut w = Tensor::zeros(vec![k, k]);
    for (i, m) in maps.iter().enumerate() {
        w.set2(i, i, m.b + c);
    }
    b.mpm(w, vec![-c; k], Some(vec![1.0; k]));
    let c2 = c;
    let row: Vec<f64> = (0..k).map(|i| if i < maxes.len() { c2 } else { -c2 }).collect();
    b.mpm(Tensor::from_rows(&[row]), vec![0.0], None);
    Ok(Construction {
        net: b.finish(d)?,
        constants: vec![c, c2],
    })
}

/// Operator 1-norm: the largest absolute column sum.
pub fn op_norm_1(a: &Tensor) -> f64 {
    (0..a.cols())
        .map(|j| (0..a.rows()).map(|i| a.at2(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// `(prod_i n_i) r + sum_i (prod_{j > i} n_j) beta_i` over the first
/// `norms.len()` layers.
fn propagated_bound(norms: &[f64], bias_norms: &[f64], r: f64) -> f64 {
    let mut bound = r;
    for (n, b) in norms.iter().zip(bias_norms) {
        bound = n * bound + b;
    }
    bound
}

/// Linear layers `(A, b)` of a reference network, split at its activations.
fn linear_params(net: &Network, idx: usize) -> Result<(Tensor, Tensor)> {
    Ok((
        net.params.get(&format!("{idx}.A"))?.value.clone(),
        net.params.get(&format!("{idx}.b"))?.value.clone(),
    ))
}

/// ReLU network structure: `(Linear, Relu)*` then an output `Linear`.
fn relu_blocks(spec: &NetworkSpec) -> Result<usize> {
    let ls = &spec.layers;
    let bad = || Error::Spec("reference must be (Linear, ReLU)* followed by an output Linear".into());
    if ls.is_empty() || ls.len() % 2 == 0 || ls.last().map(|l| l.kind) != Some(LayerKind::Linear) {
        return Err(bad());
    }
    for pair in ls[..ls.len() - 1].chunks(2) {
        if pair[0].kind != LayerKind::Linear || pair[1].kind != LayerKind::Relu {
            return Err(bad());
        }
    }
    Ok(ls.len() / 2)
}

/// Smallest admissible routing constant per ReLU layer for inputs in the
/// ball of radius `r`: the propagated l1 bound on the pre-activations.
pub fn relu_embedding_bounds(reference: &Network, r: f64) -> Result<Vec<f64>> {
    let blocks = relu_blocks(&reference.spec)?;
    let (mut norms, mut biases, mut out) = (Vec::new(), Vec::new(), Vec::new());
    for n in 0..blocks {
        let (a, b) = linear_params(reference, 2 * n)?;
        norms.push(op_norm_1(&a));
        biases.push(l1(b.data()));
        out.push(propagated_bound(&norms, &biases, r));
    }
    Ok(out)
}

/// Hybrid-MLP reproducing a ReLU network with the given routing constants:
/// each `(Linear, ReLU)` pair becomes a Hybrid block with `W_ii = C`,
/// `W_ij = 0`, `w0 = C`, `m0 = -C`.
pub fn embed_relu_with_constants(reference: &Network, constants: &[f64]) -> Result<Network> {
    let blocks = relu_blocks(&reference.spec)?;
    if constants.len() != blocks {
        return Err(Error::Spec(format!("{} constants for {blocks} ReLU layers", constants.len())));
    }
    let mut layers = Vec::new();
    let mut values = BTreeMap::new();
    for (n, &c) in constants.iter().enumerate() {
        let (a, b) = linear_params(reference, 2 * n)?;
        let o = a.rows();
        let mut w = Tensor::zeros(vec![o, o]);
        for i in 0..o {
            w.set2(i, i, c);
        }
        layers.push(LayerSpec::new(LayerKind::HybridBlock, a.cols(), o));
        values.insert(format!("{n}.A"), a);
        values.insert(format!("{n}.b"), b);
        values.insert(format!("{n}.W"), w);
        values.insert(format!("{n}.w0"), Tensor::filled(vec![o], c));
        values.insert(format!("{n}.m0"), Tensor::filled(vec![o], -c));
    }
    let (a, b) = linear_params(reference, 2 * blocks)?;
    layers.push(LayerSpec::linear(a.cols(), a.rows()).output());
    values.insert(format!("{blocks}.A"), a);
    values.insert(format!("{blocks}.b"), b);
    assemble(NetworkSpec::new(reference.spec.input_shape.clone(), layers), values)
}

/// Hybrid-MLP equal to `reference` on `||x||_1 <= r`, with each constant
/// one above the propagated pre-activation bound.
pub fn embed_relu_into_hybrid(reference: &Network, r: f64) -> Result<Construction> {
    if !(r > 0.0) {
        return Err(Error::Spec(format!("ball radius must be positive, got {r}")));
    }
    let constants: Vec<f64> = relu_embedding_bounds(reference, r)?.iter().map(|b| b + 1.0).collect();
    Ok(Construction {
        net: embed_relu_with_constants(reference, &constants)?,
        constants,
    })
}

/// Maxout network structure: maxout layers then an output `Linear`.
fn maxout_layers(spec: &NetworkSpec) -> Result<usize> {
    let ls = &spec.layers;
    let ok = !ls.is_empty()
        && ls.last().map(|l| l.kind) == Some(LayerKind::Linear)
        && ls[..ls.len() - 1].iter().all(|l| l.kind == LayerKind::Maxout);
    if !ok {
        return Err(Error::Spec("reference must be maxout layers followed by an output Linear".into()));
    }
    Ok(ls.len() - 1)
}

/// Routing constants for a maxout network on the ball of radius `r`: the
/// propagated bound on the l1 norm of all pieces of each layer, plus one.
pub fn maxout_embedding_constants(reference: &Network, r: f64) -> Result<Vec<f64>> {
    let n_layers = maxout_layers(&reference.spec)?;
    let (mut norms, mut biases, mut out) = (Vec::new(), Vec::new(), Vec::new());
    for n in 0..n_layers {
        let l = &reference.spec.layers[n];
        let (a, b) = linear_params(reference, n)?;
        let mut sum = 0.0;
        for p in 0..l.pieces {
            let rows: Vec<Vec<f64>> = (p * l.n_out..(p + 1) * l.n_out).map(|i| a.row(i).to_vec()).collect();
            sum += op_norm_1(&Tensor::from_rows(&rows));
        }
        norms.push(sum);
        biases.push(l1(b.data()));
        out.push(propagated_bound(&norms, &biases, r) + 1.0);
    }
    Ok(out)
}

/// Hybrid-MLP equal to a maxout network on `||x||_1 <= r`. Each maxout
/// layer becomes a linear layer producing all pieces, followed by an
/// unactivated MPM layer with `W_{i, i + kN} = C` for every piece `k`,
/// zero elsewhere, and biases `w0 = m0 = -C`.
pub fn embed_maxout_into_hybrid(reference: &Network, r: f64) -> Result<Construction> {
    if !(r > 0.0) {
        return Err(Error::Spec(format!("ball radius must be positive, got {r}")));
    }
    let n_layers = maxout_layers(&reference.spec)?;
    let constants = maxout_embedding_constants(reference, r)?;
    let mut layers = Vec::new();
    let mut values = BTreeMap::new();
    for (n, &c) in constants.iter().enumerate() {
        let l = &reference.spec.layers[n];
        let (a, b) = linear_params(reference, n)?;
        let (pieces, width) = (l.pieces, l.n_out);
        let lin = layers.len();
        layers.push(LayerSpec::linear(l.n_in, pieces * width));
        values.insert(format!("{lin}.A"), a);
        values.insert(format!("{lin}.b"), b);
        let mut w = Tensor::zeros(vec![width, pieces * width]);
        for i in 0..width {
            for k in 0..pieces {
                w.set2(i, k * width + i, c);
            }
        }
        let morph = layers.len();
        layers.push(LayerSpec::mpm(pieces * width, width).with_activation(Activation::None));
        values.insert(format!("{morph}.W"), w);
        values.insert(format!("{morph}.w0"), Tensor::filled(vec![width], -c));
        values.insert(format!("{morph}.m0"), Tensor::filled(vec![width], -c));
    }
    let (a, b) = linear_params(reference, n_layers)?;
    let out = layers.len();
    layers.push(LayerSpec::linear(a.cols(), a.rows()).output());
    values.insert(format!("{out}.A"), a);
    values.insert(format!("{out}.b"), b);
    Ok(Construction {
        net: assemble(NetworkSpec::new(reference.spec.input_shape.clone(), layers), values)?,
        constants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{init_network, InitScheme};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(net: &Network, x: &[f64]) -> Vec<f64> {
        net.predict(&Tensor::vector(x.to_vec())).unwrap().into_data()
    }

    #[test]
    fn affine_example() {
        let t = AffineTarget {
            a: vec![2.0, -3.0],
            b: 1.0,
            r: 1.0,
        };
        let c = build_affine_mpm(&t).unwrap();
        assert_eq!(c.constants, vec![4.0]);
        assert_eq!(c.net.spec.layers.len(), 3);
        assert!((eval(&c.net, &[0.5, -0.5])[0] - 3.5).abs() < 1e-12);
        // The first layer holds the coefficients as scales, later ones 1.
        assert_eq!(c.net.params.get("0.alpha").unwrap().value.data(), &[2.0, -3.0]);
        assert_eq!(c.net.params.get("1.alpha").unwrap().value.data(), &[1.0]);
    }

    #[test]
    fn zero_slope_gives_a_constant() {
        let t = AffineTarget {
            a: vec![0.0; 3],
            b: 7.0,
            r: 2.0,
        };
        let c = build_affine_mpm(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let x = sample_l1_ball(3, 2.0, &mut rng);
            assert!((eval(&c.net, &x)[0] - 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_affines_are_exact_in_the_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 1..=5 {
            let a: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = AffineTarget {
                a: a.clone(),
                b: rng.random_range(-2.0..2.0),
                r: rng.random_range(0.5..4.0),
            };
            let c = build_affine_mpm(&t).unwrap();
            assert_eq!(c.net.spec.layers.len(), d + 1);
            let f = Affine { a, b: t.b };
            for _ in 0..500 {
                let x = sample_l1_ball(d, t.r, &mut rng);
                assert!((eval(&c.net, &x)[0] - f.eval(&x)).abs() < 1e-9);
            }
        }
        assert!(build_affine_mpm(&AffineTarget { a: vec![], b: 0.0, r: 1.0 }).is_err());
        assert!(build_affine_mpm(&AffineTarget { a: vec![1.0], b: 0.0, r: 0.0 }).is_err());
    }

    #[test]
    fn identical_halves_double() {
        let f = Affine { a: vec![1.5, -0.5], b: 0.25 };
        let c = build_maxplusmin_mpm(&[f.clone()], &[f.clone()], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let x = sample_l1_ball(2, 1.0, &mut rng);
            assert!((eval(&c.net, &x)[0] - 2.0 * f.eval(&x)).abs() < 1e-9);
        }
        assert!(build_maxplusmin_mpm(&[], &[f], 1.0).is_err());
    }

    #[test]
    fn maxplusmin_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut aff = |d: usize| Affine {
            a: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            b: rng.random_range(-1.0..1.0),
        };
        let maxes = vec![aff(3), aff(3)];
        let mins = vec![aff(3)];
        let c = build_maxplusmin_mpm(&maxes, &mins, 1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = sample_l1_ball(3, 1.5, &mut rng);
            let want = maxes.iter().map(|f| f.eval(&x)).fold(f64::NEG_INFINITY, f64::max)
                + mins.iter().map(|f| f.eval(&x)).fold(f64::INFINITY, f64::min);
            assert!((eval(&c.net, &x)[0] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_affines_give_a_constant() {
        let k = |b: f64| Affine { a: vec![0.0, 0.0], b };
        let c = build_maxplusmin_mpm(&[k(1.0), k(3.0)], &[k(-2.0)], 1.0).unwrap();
        assert!((eval(&c.net, &[0.3, -0.6])[0] - 1.0).abs() < 1e-12);
    }

    fn relu_reference(widths: &[usize], seed: u64) -> Network {
        let mut layers = Vec::new();
        for (i, p) in widths.windows(2).enumerate() {
            layers.push(LayerSpec::linear(p[0], p[1]));
            if i + 2 < widths.len() {
                layers.push(LayerSpec::relu(p[1]));
            }
        }
        let last = layers.len() - 1;
        layers[last] = layers[last].clone().output();
        let spec = NetworkSpec::new(vec![widths[0]], layers);
        let mut net = init_network(&spec, &InitScheme::default(), seed).unwrap();
        // Nonzero biases so the ReLUs switch inside the ball.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in net.params.iter_mut() {
            if p.id.ends_with(".b") {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        net
    }

    #[test]
    fn relu_embedding_is_exact() {
        let reference = relu_reference(&[8, 8, 8, 8], 1);
        let c = embed_relu_into_hybrid(&reference, 2.0).unwrap();
        assert_eq!(c.constants.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0f64;
        for _ in 0..2000 {
            let x = sample_l1_ball(8, 2.0, &mut rng);
            let (a, b) = (eval(&reference, &x), eval(&c.net, &x));
            worst = a.iter().zip(&b).fold(worst, |m, (p, q)| m.max((p - q).abs()));
        }
        assert!(worst <= 1e-9, "{worst}");
    }

    #[test]
    fn single_linear_reference_passes_through() {
        let reference = relu_reference(&[3, 2], 0);
        let c = embed_relu_into_hybrid(&reference, 1.0).unwrap();
        assert!(c.constants.is_empty());
        assert_eq!(eval(&c.net, &[0.1, 0.2, -0.3]), eval(&reference, &[0.1, 0.2, -0.3]));
    }

    #[test]
    fn small_constant_fails_outside_the_ball() {
        let reference = relu_reference(&[4, 4, 1], 3);
        let small = embed_relu_with_constants(&reference, &[0.01]).unwrap();
        let x = [5.0, -5.0, 5.0, -5.0];
        assert!((eval(&reference, &x)[0] - eval(&small, &x)[0]).abs() > 1e-3);
    }

    fn maxout_reference(d: usize, width: usize, pieces: usize, seed: u64) -> Network {
        let mut m = LayerSpec::new(LayerKind::Maxout, d, width);
        m.pieces = pieces;
        let spec = NetworkSpec::new(vec![d], vec![m, LayerSpec::linear(width, 2).output()]);
        let mut net = init_network(&spec, &InitScheme::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in net.params.iter_mut() {
            if p.id.ends_with(".b") {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        net
    }

    #[test]
    fn maxout_embedding_is_exact() {
        for pieces in [1, 2, 3] {
            let reference = maxout_reference(4, 5, pieces, pieces as u64);
            let c = embed_maxout_into_hybrid(&reference, 1.5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for _ in 0..1000 {
                let x = sample_l1_ball(4, 1.5, &mut rng);
                let (a, b) = (eval(&reference, &x), eval(&c.net, &x));
                for (p, q) in a.iter().zip(&b) {
                    assert!((p - q).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn constant_pieces_give_a_constant() {
        let mut reference = maxout_reference(3, 2, 2, 0);
        reference.params.get_mut("0.A").unwrap().value.fill(0.0);
        let c = embed_maxout_into_hybrid(&reference, 1.0).unwrap();
        let y0 = eval(&c.net, &[0.0, 0.0, 0.0]);
        assert!(eval(&c.net, &[0.2, -0.5, 0.1])
            .iter()
            .zip(&y0)
            .all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = sample_l1_ball(5, 3.0, &mut rng);
            assert!(l1(&x) <= 3.0 + 1e-12);
        }
    }
}
