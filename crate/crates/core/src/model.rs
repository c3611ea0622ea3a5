//! Batched network evaluation on a [`Tape`], losses and gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Mix, NodeId, Tape};
use crate::error::{dim_err, Error, Result};
use crate::layers::{sample_dropout_mask, Activation, LambdaMode, LayerKind, LayerSpec, NetworkSpec};
use crate::param::{Gradients, ParamSet};
use crate::tensor::Tensor;
use crate::tropical::TropicalMode;

/// Rows per tape when evaluating large inputs.
pub const EVAL_CHUNK: usize = 1000;

/// Supervision for a batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    /// Class labels, trained with softmax cross-entropy.
    Classes(&'a [usize]),
    /// Real targets `[B x out]`, trained with mean squared error.
    Values(&'a Tensor),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Classes(l) => l.len(),
            Targets::Values(t) => t.rows(),
        }
    }

    fn slice(&self, lo: usize, hi: usize) -> Result<OwnedTargets> {
        Ok(match self {
            Targets::Classes(l) => OwnedTargets::Classes(l[lo..hi].to_vec()),
            Targets::Values(t) => OwnedTargets::Values(slice_rows(t, lo, hi)?),
        })
    }
}

enum OwnedTargets {
    Classes(Vec<usize>),
    Values(Tensor),
}

impl OwnedTargets {
    fn borrow(&self) -> Targets<'_> {
        match self {
            OwnedTargets::Classes(l) => Targets::Classes(l),
            OwnedTargets::Values(t) => Targets::Values(t),
        }
    }
}

/// Rows `lo..hi` of a batch, flattened to `[n x cols]`.
pub fn slice_rows(x: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let c = x.cols();
    Tensor::new(vec![hi - lo, c], x.data()[lo * c..hi * c].to_vec())
}

/// Appends `tape` nodes for the whole network and returns the output node.
pub fn forward_on<'p, R: Rng + ?Sized>(
    tape: &mut Tape<'p>,
    spec: &NetworkSpec,
    x: NodeId,
    train: bool,
    rng: &mut R,
) -> Result<NodeId> {
    let mut h = x;
    for (i, layer) in spec.layers.iter().enumerate() {
        h = layer_forward(tape, i, layer, h, train, rng)?;
    }
    Ok(h)
}

/// Records `x` as the input and runs the network. The tape keeps every
/// intermediate value and selection for [`Tape::backward`].
pub fn forward<'p, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    params: &'p ParamSet,
    x: &Tensor,
    train: bool,
    rng: &mut R,
) -> Result<(Tape<'p>, NodeId)> {
    let x = as_batch(spec, x)?;
    let mut tape = Tape::new(params);
    let xi = tape.input(x);
    let out = forward_on(&mut tape, spec, xi, train, rng)?;
    Ok((tape, out))
}

fn as_batch(spec: &NetworkSpec, x: &Tensor) -> Result<Tensor> {
    let n = spec.input_size();
    if x.shape().len() == 1 && x.len() == n {
        return x.clone().reshape(vec![1, n]);
    }
    if x.cols() != n {
        return Err(dim_err(format!("input has {} features, network expects {n}", x.cols())));
    }
    x.clone().reshape(vec![x.rows(), n])
}

fn p(tape: &mut Tape<'_>, idx: usize, name: &str) -> Result<NodeId> {
    tape.param(&format!("{idx}.{name}"))
}

fn opt_p(tape: &mut Tape<'_>, idx: usize, name: &str) -> Result<Option<NodeId>> {
    let id = format!("{idx}.{name}");
    if tape.params().contains(&id) {
        Ok(Some(tape.param(&id)?))
    } else {
        Ok(None)
    }
}

fn drop_mask<R: Rng + ?Sized>(
    tape: &Tape<'_>,
    idx: usize,
    layer: &LayerSpec,
    train: bool,
    rng: &mut R,
) -> Result<Option<Vec<bool>>> {
    if !train || layer.dropout_rate <= 0.0 {
        return Ok(None);
    }
    let len = tape.params().get(&format!("{idx}.W"))?.value.len();
    Ok(Some(sample_dropout_mask(len, layer.dropout_rate, rng)?))
}

fn activate(tape: &mut Tape<'_>, idx: usize, layer: &LayerSpec, y: NodeId) -> Result<NodeId> {
    match layer.activation {
        Activation::None => Ok(y),
        Activation::Scale => {
            let a = p(tape, idx, "alpha")?;
            tape.mul_row(y, a)
        }
        Activation::Sigmoid => Ok(tape.sigmoid(y)),
        Activation::Svd => {
            let (u, s, v) = (p(tape, idx, "U")?, p(tape, idx, "sigma")?, p(tape, idx, "V")?);
            tape.frame_diag(y, u, s, v)
        }
    }
}

/// Max-pooling kernel: `0` within a channel, `-inf` across channels.
pub fn pool_kernel(channels: usize, window: usize) -> Tensor {
    let taps = window * window;
    let mut k = Tensor::filled(vec![channels, channels, window, window], f64::NEG_INFINITY);
    for c in 0..channels {
        let base = (c * channels + c) * taps;
        k.data_mut()[base..base + taps].fill(0.0);
    }
    k
}

fn layer_forward<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    idx: usize,
    layer: &LayerSpec,
    x: NodeId,
    train: bool,
    rng: &mut R,
) -> Result<NodeId> {
    let y = match layer.kind {
        LayerKind::Mp => {
            let w = p(tape, idx, "W")?;
            let b = opt_p(tape, idx, "w0")?;
            let drop = drop_mask(tape, idx, layer, train, rng)?;
            let y = tape.tropical(x, w, b, layer.mode, drop.as_deref())?;
            activate(tape, idx, layer, y)?
        }
        LayerKind::Dep => {
            let (w, m) = (p(tape, idx, "W")?, p(tape, idx, "M")?);
            let (w0, m0) = (opt_p(tape, idx, "w0")?, opt_p(tape, idx, "m0")?);
            let mix = match layer.lambda_mode {
                LambdaMode::Learnable => Mix::Learned(p(tape, idx, "lambda")?),
                LambdaMode::Fixed(l) => Mix::Fixed(l),
            };
            let drop = drop_mask(tape, idx, layer, train, rng)?;
            let y = tape.dilation_erosion(x, w, m, w0, m0, mix, drop.as_deref())?;
            activate(tape, idx, layer, y)?
        }
        LayerKind::Mpm | LayerKind::Rmpm | LayerKind::MpmSvd => {
            let w = p(tape, idx, "W")?;
            let (w0, m0) = (p(tape, idx, "w0")?, p(tape, idx, "m0")?);
            let drop = drop_mask(tape, idx, layer, train, rng)?;
            let y = tape.dilation_erosion(x, w, w, Some(w0), Some(m0), Mix::Sum, drop.as_deref())?;
            activate(tape, idx, layer, y)?
        }
        LayerKind::HybridBlock => {
            let (a, b) = (p(tape, idx, "A")?, p(tape, idx, "b")?);
            let h = tape.linear(x, a, Some(b))?;
            let w = p(tape, idx, "W")?;
            let (w0, m0) = (p(tape, idx, "w0")?, p(tape, idx, "m0")?);
            let drop = drop_mask(tape, idx, layer, train, rng)?;
            tape.dilation_erosion(h, w, w, Some(w0), Some(m0), Mix::Sum, drop.as_deref())?
        }
        LayerKind::Linear => {
            let (a, b) = (p(tape, idx, "A")?, p(tape, idx, "b")?);
            tape.linear(x, a, Some(b))?
        }
        LayerKind::Maxout => {
            let (a, b) = (p(tape, idx, "A")?, p(tape, idx, "b")?);
            let h = tape.linear(x, a, Some(b))?;
            tape.max_pieces(h, layer.pieces)?
        }
        LayerKind::Relu => tape.relu(x),
        LayerKind::Conv => {
            let c = conv_of(layer)?;
            let (k, b) = (p(tape, idx, "K")?, p(tape, idx, "b")?);
            tape.linear_conv(x, k, Some(b), c.in_shape(), c.padding, c.stride, false)?
        }
        LayerKind::MaxPool => {
            let c = conv_of(layer)?;
            let k = tape.constant(pool_kernel(c.in_channels, c.kernel));
            tape.tropical_conv(x, k, None, TropicalMode::MaxPlus, c.in_shape(), c.padding, c.stride)?
        }
        LayerKind::MorphConvS1 | LayerKind::MorphConvS2 => {
            let c = conv_of(layer)?;
            let k = p(tape, idx, "K")?;
            let (w0, m0) = (p(tape, idx, "w0")?, p(tape, idx, "m0")?);
            let y = match layer.temperature {
                None => tape.dilation_erosion_conv(x, k, w0, m0, c.in_shape(), c.padding)?,
                Some(t) => {
                    let hi = tape.soft_tropical_conv(x, k, w0, TropicalMode::MaxPlus, c.in_shape(), c.padding, t)?;
                    let lo = tape.soft_tropical_conv(x, k, m0, TropicalMode::MinPlus, c.in_shape(), c.padding, t)?;
                    tape.add(hi, lo)?
                }
            };
            let (h, w) = c.out_hw()?;
            let out_shape = (c.out_channels, h, w);
            match layer.activation {
                Activation::Scale => {
                    let a = p(tape, idx, "act")?;
                    tape.linear_conv(y, a, None, out_shape, 1, 1, true)?
                }
                Activation::Svd => {
                    let (u, s, v) = (p(tape, idx, "act_U")?, p(tape, idx, "act_s")?, p(tape, idx, "act_V")?);
                    let kern = tape.frame_kernel(u, s, v, 3, 3)?;
                    tape.linear_conv(y, kern, None, out_shape, 1, 1, false)?
                }
                _ => y,
            }
        }
    };
    if layer.residual {
        tape.add(x, y)
    } else {
        Ok(y)
    }
}

fn conv_of(layer: &LayerSpec) -> Result<crate::layers::ConvSpec> {
    layer
        .conv
        .ok_or_else(|| Error::Spec(format!("{:?} layer without conv geometry", layer.kind)))
}

fn loss_node(tape: &mut Tape<'_>, out: NodeId, targets: Targets<'_>) -> Result<NodeId> {
    match targets {
        Targets::Classes(l) => tape.cross_entropy(out, l),
        Targets::Values(t) => tape.mse(out, t),
    }
}

/// A network description together with its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamSet,
}

impl Network {
    /// Checks that `params` holds exactly the parameters `spec` declares.
    pub fn new(spec: NetworkSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        let decls = spec.param_decls();
        for d in &decls {
            let p = params.get(&d.id)?;
            if p.value.shape() != d.shape.as_slice() {
                return Err(dim_err(format!("`{}` has shape {:?}, expected {:?}", d.id, p.value.shape(), d.shape)));
            }
        }
        if decls.len() != params.len() {
            return Err(Error::Parameter(format!(
                "{} parameters supplied, spec declares {}",
                params.len(),
                decls.len()
            )));
        }
        Ok(Self { spec, params })
    }

    /// Deterministic (dropout-free) outputs, computed in chunks.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let x = as_batch(&self.spec, x)?;
        let n = x.rows();
        let mut out = Vec::with_capacity(n * self.spec.output_size);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for lo in (0..n).step_by(EVAL_CHUNK) {
            let hi = (lo + EVAL_CHUNK).min(n);
            let (tape, o) = forward(&self.spec, &self.params, &slice_rows(&x, lo, hi)?, false, &mut rng)?;
            out.extend_from_slice(tape.value(o).data());
        }
        Tensor::new(vec![n, self.spec.output_size], out)
    }

    /// Mean loss, and accuracy for class targets (`None` for regression).
    pub fn evaluate(&self, x: &Tensor, targets: Targets<'_>) -> Result<(f64, Option<f64>)> {
        let out = self.predict(x)?;
        if targets.len() != out.rows() {
            return Err(dim_err(format!("{} targets for {} rows", targets.len(), out.rows())));
        }
        match targets {
            Targets::Classes(l) => {
                let (loss, _) = crate::optim::softmax_cross_entropy(&out, l)?;
                Ok((loss, Some(crate::optim::accuracy(&out, l)?)))
            }
            Targets::Values(t) => Ok((crate::optim::mse(out.data(), t.data()).0, None)),
        }
    }

    /// Loss and gradients of one batch.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        targets: Targets<'_>,
        train: bool,
        rng: &mut R,
    ) -> Result<(f64, Gradients)> {
        let (mut tape, out) = forward(&self.spec, &self.params, x, train, rng)?;
        let l = loss_node(&mut tape, out, targets)?;
        let loss = tape.value(l).data()[0];
        let grads = tape.backward(l, &Tensor::scalar(1.0))?;
        Ok((loss, grads))
    }

    fn loss_and_signature(&self, x: &Tensor, targets: Targets<'_>) -> Result<(f64, Vec<u32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut tape, out) = forward(&self.spec, &self.params, x, false, &mut rng)?;
        let l = loss_node(&mut tape, out, targets)?;
        Ok((tape.value(l).data()[0], tape.branch_signature()))
    }
}

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Fresh inputs tried when a perturbation changes a branch.
    pub retries: usize,
    /// Standard deviation of the input jitter used on a retry.
    pub jitter: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            retries: 5,
            jitter: 0.1,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `id[index]` of the worst coordinate.
    pub location: String,
    pub checked: usize,
    /// Inputs discarded because they sat within `eps` of a branch change.
    pub resamples: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Relative error of a central difference, with disagreement inside the
/// quotient's rounding resolution (a few ulps of the loss over `2h`) counted
/// as agreement.
fn quotient_error(analytic: f64, lp: f64, lm: f64, h: f64) -> f64 {
    let numeric = (lp - lm) / (2.0 * h);
    let resolution = 8.0 * f64::EPSILON * lp.abs().max(lm.abs()) / (2.0 * h);
    if (analytic - numeric).abs() <= resolution {
        0.0
    } else {
        relative_error(analytic, numeric)
    }
}

fn coords(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|k| k * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares [`Tape::backward`] with central differences on every trainable
/// parameter entry and every input entry.
///
/// A point where any perturbation changes a tropical selection or ReLU sign
/// is within `eps` of a kink; the input is then jittered and the check
/// restarted. Exhausting the retries yields [`Error::DegeneratePoint`].
pub fn grad_check(net: &Network, x: &Tensor, targets: Targets<'_>, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let jitter = Normal::new(0.0, opts.jitter).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut x = as_batch(&net.spec, x)?;
    for attempt in 0..=opts.retries {
        if attempt > 0 {
            x.data_mut().iter_mut().for_each(|v| *v += jitter.sample(&mut rng));
        }
        if let Some(mut report) = try_grad_check(net, &x, targets, opts)? {
            report.resamples = attempt;
            return Ok(report);
        }
    }
    Err(Error::DegeneratePoint { retries: opts.retries })
}

fn try_grad_check(net: &Network, x: &Tensor, targets: Targets<'_>, opts: &GradCheckOptions) -> Result<Option<GradCheckReport>> {
    let h = opts.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, grads) = net.loss_and_grads(x, targets, false, &mut rng)?;
    let (_, base_sig) = net.loss_and_signature(x, targets)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        location: String::new(),
        checked: 0,
        resamples: 0,
    };
    let mut record = |err: f64, loc: String| {
        report.checked += 1;
        if err > report.max_rel_err || report.location.is_empty() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.location = loc;
        }
    };

    let mut work = net.clone();
    for pi in 0..net.params.len() {
        let param = net.params.by_index(pi);
        if !param.trainable {
            continue;
        }
        let id = param.id.clone();
        let analytic = grads
            .params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(param.value.shape().to_vec()));
        for k in coords(param.value.len(), opts.max_coords) {
            if !param.is_kept(k) {
                continue;
            }
            let orig = param.value.data()[k];
            let mut eval = |v: f64| -> Result<(f64, Vec<u32>)> {
                work.params.get_mut(&id)?.value.data_mut()[k] = v;
                work.loss_and_signature(x, targets)
            };
            let (lp, sp) = eval(orig + h)?;
            let (lm, sm) = eval(orig - h)?;
            work.params.get_mut(&id)?.value.data_mut()[k] = orig;
            if sp != base_sig || sm != base_sig {
                return Ok(None);
            }
            record(quotient_error(analytic.data()[k], lp, lm, h), format!("{id}[{k}]"));
        }
    }

    let gin = grads.input.as_ref().ok_or_else(|| Error::State("no input gradient".into()))?;
    let mut xp = x.clone();
    for k in 0..x.len() {
        let orig = x.data()[k];
        xp.data_mut()[k] = orig + h;
        let (lp, sp) = work.loss_and_signature(&xp, targets)?;
        xp.data_mut()[k] = orig - h;
        let (lm, sm) = work.loss_and_signature(&xp, targets)?;
        xp.data_mut()[k] = orig;
        if sp != base_sig || sm != base_sig {
            return Ok(None);
        }
        record(quotient_error(gin.data()[k], lp, lm, h), format!("input[{k}]"));
    }
    Ok(Some(report))
}

/// Runs `f` over `[lo, hi)` batches of `n` rows.
pub fn for_each_chunk(n: usize, chunk: usize, mut f: impl FnMut(usize, usize) -> Result<()>) -> Result<()> {
    let mut lo = 0;
    while lo < n {
        let hi = (lo + chunk).min(n);
        f(lo, hi)?;
        lo = hi;
    }
    Ok(())
}

/// Mean loss over `x` evaluated in chunks, with targets sliced alongside.
pub fn chunked_loss(net: &Network, x: &Tensor, targets: Targets<'_>, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let n = x.rows();
    for_each_chunk(n, chunk, |lo, hi| {
        let t = targets.slice(lo, hi)?;
        let (l, _) = net.evaluate(&slice_rows(x, lo, hi)?, t.borrow())?;
        total += l * (hi - lo) as f64;
        Ok(())
    })?;
    Ok(total / n as f64)
}
