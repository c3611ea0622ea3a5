//! Layer and network descriptions plus single-sample reference forwards.
//!
//! [`NetworkSpec`] is declarative: it lists layers and flags, and
//! [`NetworkSpec::param_decls`] derives every parameter id, shape and role
//! from it. The free functions at the bottom evaluate one layer on one
//! input vector with plain loops; the batched training path lives in
//! [`crate::model`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::param::ParamRole;
use crate::tensor::Tensor;
use crate::tropical::{self, TropicalMode};

pub const SPEC_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayerKind {
    /// Biased max-plus or min-plus perceptron layer.
    Mp,
    /// Convex combination of a dilation and an erosion with separate weights.
    Dep,
    /// Sum of a dilation and an erosion sharing `W`, scaled per unit.
    Mpm,
    /// [`LayerKind::Mpm`] with an identity shortcut where sizes match.
    Rmpm,
    /// Morphological sum followed by a fixed-frame diagonal map.
    MpmSvd,
    Linear,
    /// Linear map followed by an unscaled morphological sum.
    HybridBlock,
    /// Morphological conv with a depthwise 3x3 linear activation.
    MorphConvS1,
    /// Morphological conv with a full 3x3 linear activation whose per-tap
    /// matrices have fixed frames and learnable diagonals.
    MorphConvS2,
    Relu,
    /// Linear map to `pieces * n_out` units followed by a max over pieces.
    Maxout,
    /// Linear convolution.
    Conv,
    /// Max pooling, evaluated as a max-plus convolution with a zero kernel.
    MaxPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "value")]
pub enum LambdaMode {
    Learnable,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    /// Learnable per-unit scale (per-channel 3x3 depthwise kernel for
    /// Setting-1 convs).
    Scale,
    /// Learnable singular values in a fixed orthonormal frame.
    Svd,
    Sigmoid,
}

/// Channels-first convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl ConvSpec {
    pub fn out_hw(&self) -> Result<(usize, usize)> {
        Ok((
            tropical::conv_out_extent(self.height, self.kernel, self.padding, self.stride)?,
            tropical::conv_out_extent(self.width, self.kernel, self.padding, self.stride)?,
        ))
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_len(&self) -> Result<usize> {
        let (h, w) = self.out_hw()?;
        Ok(self.out_channels * h * w)
    }

    pub fn in_shape(&self) -> (usize, usize, usize) {
        (self.in_channels, self.height, self.width)
    }
}

fn default_mode() -> TropicalMode {
    TropicalMode::MaxPlus
}

fn default_lambda() -> LambdaMode {
    LambdaMode::Learnable
}

fn default_activation() -> Activation {
    Activation::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub n_in: usize,
    pub n_out: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvSpec>,
    #[serde(default = "default_mode")]
    pub mode: TropicalMode,
    #[serde(default)]
    pub biased: bool,
    #[serde(default = "default_lambda")]
    pub lambda_mode: LambdaMode,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub is_output_layer: bool,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub pieces: usize,
    /// LogSumExp temperature for morphological convs; `None` is exact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, n_in: usize, n_out: usize) -> Self {
        Self {
            kind,
            n_in,
            n_out,
            conv: None,
            mode: TropicalMode::MaxPlus,
            biased: false,
            lambda_mode: LambdaMode::Learnable,
            activation: Activation::None,
            residual: false,
            is_output_layer: false,
            dropout_rate: 0.0,
            pieces: 0,
            temperature: None,
        }
    }

    pub fn mp(n_in: usize, n_out: usize, mode: TropicalMode, biased: bool) -> Self {
        Self {
            mode,
            biased,
            ..Self::new(LayerKind::Mp, n_in, n_out)
        }
    }

    pub fn dep(n_in: usize, n_out: usize, lambda_mode: LambdaMode) -> Self {
        Self {
            lambda_mode,
            ..Self::new(LayerKind::Dep, n_in, n_out)
        }
    }

    pub fn mpm(n_in: usize, n_out: usize) -> Self {
        Self {
            activation: Activation::Scale,
            ..Self::new(LayerKind::Mpm, n_in, n_out)
        }
    }

    pub fn linear(n_in: usize, n_out: usize) -> Self {
        Self::new(LayerKind::Linear, n_in, n_out)
    }

    pub fn relu(n: usize) -> Self {
        Self::new(LayerKind::Relu, n, n)
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    /// Flags the layer as the network output, which also drops its
    /// activation.
    pub fn output(mut self) -> Self {
        self.is_output_layer = true;
        self.activation = Activation::None;
        self.residual = false;
        self
    }

    /// Whether weight dropout applies to this kind of layer.
    pub fn supports_dropout(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Mp | LayerKind::Dep | LayerKind::Mpm | LayerKind::Rmpm | LayerKind::MpmSvd | LayerKind::HybridBlock
        )
    }

    /// Whether this layer has a morphological (tropical) weight.
    pub fn is_morphological(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Mp
                | LayerKind::Dep
                | LayerKind::Mpm
                | LayerKind::Rmpm
                | LayerKind::MpmSvd
                | LayerKind::HybridBlock
                | LayerKind::MorphConvS1
                | LayerKind::MorphConvS2
        )
    }

    fn needs_conv(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::MorphConvS1 | LayerKind::MorphConvS2 | LayerKind::Conv | LayerKind::MaxPool
        )
    }

    /// Checks the layer in isolation.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.n_in == 0 || self.n_out == 0 {
            return err(format!("{:?} layer has a zero extent", self.kind));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return err(format!("dropout rate {} outside [0, 1]", self.dropout_rate));
        }
        if self.dropout_rate > 0.0 && !self.supports_dropout() {
            return err(format!("{:?} layer does not support weight dropout", self.kind));
        }
        if let LambdaMode::Fixed(l) = self.lambda_mode {
            if !(0.0..=1.0).contains(&l) {
                return err(format!("fixed lambda {l} outside [0, 1]"));
            }
        }
        if self.residual && (self.n_in != self.n_out || self.is_output_layer) {
            return err(format!(
                "residual requires n_in = n_out on a hidden layer ({} -> {})",
                self.n_in, self.n_out
            ));
        }
        if self.is_output_layer && self.activation != Activation::None {
            return err(format!("output layer {:?} must not be activated", self.kind));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return err(format!("temperature {t} must be positive"));
            }
        }
        let allowed: &[Activation] = match self.kind {
            LayerKind::Mp => &[Activation::None, Activation::Scale],
            LayerKind::Dep => &[Activation::None, Activation::Scale, Activation::Sigmoid],
            LayerKind::Mpm | LayerKind::Rmpm | LayerKind::MorphConvS1 => &[Activation::None, Activation::Scale],
            LayerKind::MpmSvd | LayerKind::MorphConvS2 => &[Activation::None, Activation::Svd],
            _ => &[Activation::None],
        };
        if !allowed.contains(&self.activation) {
            return err(format!("{:?} layer does not support {:?} activation", self.kind, self.activation));
        }
        match self.kind {
            LayerKind::Relu if self.n_in != self.n_out => {
                return err("ReLU layer must preserve width".into());
            }
            LayerKind::Maxout if self.pieces == 0 => {
                return err("maxout layer needs pieces >= 1".into());
            }
            _ => {}
        }
        if self.needs_conv() {
            let Some(c) = self.conv else {
                return err(format!("{:?} layer needs conv geometry", self.kind));
            };
            if c.in_len() != self.n_in || c.out_len()? != self.n_out {
                return err(format!(
                    "{:?} conv geometry {}->{} does not match n_in/n_out {}->{}",
                    self.kind,
                    c.in_len(),
                    c.out_len()?,
                    self.n_in,
                    self.n_out
                ));
            }
            if self.kind == LayerKind::MaxPool && c.in_channels != c.out_channels {
                return err("max pooling keeps the channel count".into());
            }
            if matches!(self.kind, LayerKind::MorphConvS1 | LayerKind::MorphConvS2) && c.stride != 1 {
                return err("morphological convs use unit stride".into());
            }
        }
        Ok(())
    }

    /// Parameter declarations of layer `idx`, in a fixed order.
    pub fn param_decls(&self, idx: usize) -> Vec<ParamDecl> {
        let id = |name: &str| format!("{idx}.{name}");
        let (o, i) = (self.n_out, self.n_in);
        let mut v = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, role: ParamRole, trainable: bool| {
            v.push(ParamDecl {
                id: id(name),
                shape,
                role,
                trainable,
                layer: idx,
            })
        };
        match self.kind {
            LayerKind::Mp => {
                let role = match self.mode {
                    TropicalMode::MaxPlus => ParamRole::MaxPathWeight,
                    TropicalMode::MinPlus => ParamRole::MinPathWeight,
                };
                push("W", vec![o, i], role, true);
                if self.biased {
                    push("w0", vec![o], ParamRole::Bias, true);
                }
            }
            LayerKind::Dep => {
                push("W", vec![o, i], ParamRole::MaxPathWeight, true);
                push("M", vec![o, i], ParamRole::MinPathWeight, true);
                if self.biased {
                    push("w0", vec![o], ParamRole::Bias, true);
                    push("m0", vec![o], ParamRole::Bias, true);
                }
                if self.lambda_mode == LambdaMode::Learnable {
                    push("lambda", vec![o], ParamRole::Lambda, true);
                }
            }
            LayerKind::Mpm | LayerKind::Rmpm | LayerKind::MpmSvd => {
                push("W", vec![o, i], ParamRole::SharedWeight, true);
                push("w0", vec![o], ParamRole::Bias, true);
                push("m0", vec![o], ParamRole::Bias, true);
            }
            LayerKind::HybridBlock => {
                push("A", vec![o, i], ParamRole::LinearWeight, true);
                push("b", vec![o], ParamRole::Bias, true);
                push("W", vec![o, o], ParamRole::SharedWeight, true);
                push("w0", vec![o], ParamRole::Bias, true);
                push("m0", vec![o], ParamRole::Bias, true);
            }
            LayerKind::Linear => {
                push("A", vec![o, i], ParamRole::LinearWeight, true);
                push("b", vec![o], ParamRole::Bias, true);
            }
            LayerKind::Maxout => {
                push("A", vec![self.pieces * o, i], ParamRole::LinearWeight, true);
                push("b", vec![self.pieces * o], ParamRole::Bias, true);
            }
            LayerKind::MorphConvS1 | LayerKind::MorphConvS2 => {
                let c = self.conv.expect("validated conv geometry");
                push(
                    "K",
                    vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                    ParamRole::SharedWeight,
                    true,
                );
                push("w0", vec![c.out_channels], ParamRole::Bias, true);
                push("m0", vec![c.out_channels], ParamRole::Bias, true);
            }
            LayerKind::Conv => {
                let c = self.conv.expect("validated conv geometry");
                push(
                    "K",
                    vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                    ParamRole::LinearWeight,
                    true,
                );
                push("b", vec![c.out_channels], ParamRole::Bias, true);
            }
            LayerKind::Relu | LayerKind::MaxPool => {}
        }
        match (self.kind, self.activation) {
            (LayerKind::MorphConvS1, Activation::Scale) => {
                let c = self.conv.expect("validated conv geometry").out_channels;
                push("act", vec![c, 1, 3, 3], ParamRole::ActivationKernel, true);
            }
            (LayerKind::MorphConvS2, Activation::Svd) => {
                let c = self.conv.expect("validated conv geometry").out_channels;
                push("act_U", vec![9, c, c], ParamRole::Frame, false);
                push("act_s", vec![9, c], ParamRole::Singular, true);
                push("act_V", vec![9, c, c], ParamRole::Frame, false);
            }
            (_, Activation::Scale) => push("alpha", vec![o], ParamRole::Scale, true),
            (_, Activation::Svd) => {
                push("U", vec![o, o], ParamRole::Frame, false);
                push("sigma", vec![o], ParamRole::Singular, true);
                push("V", vec![o, o], ParamRole::Frame, false);
            }
            _ => {}
        }
        v
    }
}

/// A parameter a network needs, before it is materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub id: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub trainable: bool,
    pub layer: usize,
}

impl ParamDecl {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Short name after the layer prefix, e.g. `W` for `3.W`.
    pub fn name(&self) -> &str {
        self.id.split_once('.').map_or(&self.id, |(_, n)| n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub output_size: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        let output_size = layers.last().map_or(0, |l| l.n_out);
        Self {
            version: SPEC_VERSION,
            input_shape,
            output_size,
            layers,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SPEC_VERSION {
            return Err(Error::Spec(format!("unsupported spec version {}", self.version)));
        }
        if self.layers.is_empty() {
            return Err(Error::Spec("network has no layers".into()));
        }
        let mut width = self.input_size();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.validate().map_err(|e| Error::Spec(format!("layer {i}: {e}")))?;
            if l.n_in != width {
                return Err(Error::Spec(format!("layer {i} expects {} inputs, gets {width}", l.n_in)));
            }
            if l.is_output_layer && i != last {
                return Err(Error::Spec(format!("layer {i} is flagged as output but is not last")));
            }
            width = l.n_out;
        }
        if width != self.output_size {
            return Err(Error::Spec(format!(
                "last layer has {width} outputs, spec says {}",
                self.output_size
            )));
        }
        Ok(())
    }

    pub fn param_decls(&self) -> Vec<ParamDecl> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_decls(i))
            .collect()
    }

    /// Learnable scalar count (fixed frames excluded).
    pub fn param_count(&self) -> usize {
        self.param_decls()
            .iter()
            .filter(|d| d.trainable)
            .map(|d| d.len())
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Index of the first morphological layer, if any.
    pub fn first_morphological(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.is_morphological())
    }
}

/// Independent Bernoulli keep flags with `P(keep) = 1 - rate`.
pub fn sample_dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1]")));
    }
    let keep = 1.0 - rate;
    Ok((0..len).map(|_| rng.random::<f64>() < keep).collect())
}

// ---------------------------------------------------------------------------
// Single-sample reference forwards.
// ---------------------------------------------------------------------------

fn check_len<T>(x: &[T], n: usize, what: &str) -> Result<()> {
    if x.len() != n {
        return Err(dim_err(format!("{what}: expected {n} entries, got {}", x.len())));
    }
    Ok(())
}

/// `w0 (+) W (x) x` in the given mode. A `None` bias is the neutral element.
pub fn mp_forward(x: &[f64], w: &Tensor, w0: Option<&[f64]>, mode: TropicalMode) -> Result<Vec<f64>> {
    Ok(tropical::tropical_vecmul(w, x, w0, mode)?.0)
}

/// `l * (w0 v W (x) x) + (1 - l) * (m0 ^ M (x)' x)`, then optional per-unit
/// scale or a sigmoid.
#[allow(clippy::too_many_arguments)]
pub fn dep_forward(
    x: &[f64],
    w: &Tensor,
    m: &Tensor,
    lambda: &[f64],
    w0: Option<&[f64]>,
    m0: Option<&[f64]>,
    activation: Activation,
    alpha: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::Parameter("lambda outside [0, 1]".into()));
    }
    let hi = tropical::tropical_vecmul(w, x, w0, TropicalMode::MaxPlus)?.0;
    let lo = tropical::tropical_vecmul(m, x, m0, TropicalMode::MinPlus)?.0;
    check_len(lambda, hi.len(), "lambda")?;
    let mut y: Vec<f64> = (0..hi.len())
        .map(|i| lambda[i] * hi[i] + (1.0 - lambda[i]) * lo[i])
        .collect();
    match activation {
        Activation::None => {}
        Activation::Scale => {
            let a = alpha.ok_or_else(|| Error::MissingParameter("alpha".into()))?;
            check_len(a, y.len(), "alpha")?;
            y.iter_mut().zip(a).for_each(|(v, s)| *v *= s);
        }
        Activation::Sigmoid => y.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        Activation::Svd => return Err(Error::Spec("DEP has no SVD activation".into())),
    }
    Ok(y)
}

/// `(w0 v W (x) x) + (m0 ^ W (x)' x)` with shared `W`. Entries whose `keep`
/// flag is false take part in neither path.
pub fn morph_sum(x: &[f64], w: &Tensor, w0: &[f64], m0: &[f64], keep: Option<&[bool]>) -> Result<Vec<f64>> {
    let (hi, lo) = match keep {
        None => (
            tropical::tropical_vecmul(w, x, Some(w0), TropicalMode::MaxPlus)?.0,
            tropical::tropical_vecmul(w, x, Some(m0), TropicalMode::MinPlus)?.0,
        ),
        Some(k) => {
            check_len(k, w.len(), "keep mask")?;
            let mut wmax = w.clone();
            let mut wmin = w.clone();
            for (idx, &kp) in k.iter().enumerate() {
                if !kp {
                    wmax.data_mut()[idx] = f64::NEG_INFINITY;
                    wmin.data_mut()[idx] = f64::INFINITY;
                }
            }
            (
                tropical::tropical_vecmul(&wmax, x, Some(w0), TropicalMode::MaxPlus)?.0,
                tropical::tropical_vecmul(&wmin, x, Some(m0), TropicalMode::MinPlus)?.0,
            )
        }
    };
    Ok(hi.iter().zip(&lo).map(|(a, b)| a + b).collect())
}

/// `alpha * morph_sum(x)`; pass `None` for an output layer.
pub fn mpm_forward(x: &[f64], w: &Tensor, w0: &[f64], m0: &[f64], alpha: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut y = morph_sum(x, w, w0, m0, None)?;
    if let Some(a) = alpha {
        check_len(a, y.len(), "alpha")?;
        y.iter_mut().zip(a).for_each(|(v, s)| *v *= s);
    }
    Ok(y)
}

/// `x + alpha * morph_sum(x)` with `W` entries removed where `keep` is false.
pub fn rmpm_forward(
    x: &[f64],
    w: &Tensor,
    w0: &[f64],
    m0: &[f64],
    alpha: Option<&[f64]>,
    keep: Option<&[bool]>,
) -> Result<Vec<f64>> {
    if w.rows() != x.len() {
        return Err(Error::Spec(format!(
            "residual needs a square layer, got {}x{}",
            w.rows(),
            w.cols()
        )));
    }
    let mut y = morph_sum(x, w, w0, m0, keep)?;
    if let Some(a) = alpha {
        check_len(a, y.len(), "alpha")?;
        y.iter_mut().zip(a).for_each(|(v, s)| *v *= s);
    }
    Ok(x.iter().zip(&y).map(|(a, b)| a + b).collect())
}

/// `U diag(sigma) V^T morph_sum(x)`.
pub fn mpm_svd_forward(
    x: &[f64],
    w: &Tensor,
    w0: &[f64],
    m0: &[f64],
    u: &Tensor,
    sigma: &[f64],
    v: &Tensor,
) -> Result<Vec<f64>> {
    let y = morph_sum(x, w, w0, m0, None)?;
    let n = y.len();
    if u.shape() != [n, n] || v.shape() != [n, n] || sigma.len() != n {
        return Err(dim_err("frame shape"));
    }
    let proj: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| v.at2(j, i) * y[j]).sum::<f64>() * sigma[i])
        .collect();
    Ok((0..n)
        .map(|i| (0..n).map(|j| u.at2(i, j) * proj[j]).sum())
        .collect())
}

/// `morph_sum(A x + b)`.
pub fn hybrid_block_forward(
    x: &[f64],
    a: &Tensor,
    b: &[f64],
    w: &Tensor,
    w0: &[f64],
    m0: &[f64],
    keep: Option<&[bool]>,
) -> Result<Vec<f64>> {
    check_len(x, a.cols(), "hybrid input")?;
    check_len(b, a.rows(), "hybrid bias")?;
    let y: Vec<f64> = (0..a.rows())
        .map(|i| a.row(i).iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + b[i])
        .collect();
    morph_sum(&y, w, w0, m0, keep)
}

/// Activation of a morphological conv block.
#[derive(Clone, Debug)]
pub enum ConvActivation<'a> {
    Identity,
    /// Depthwise 3x3 kernel `[C x 1 x 3 x 3]`, padding 1.
    Depthwise(&'a Tensor),
    /// Per-tap frames `U, V: [9 x C x C]` and diagonals `s: [9 x C]`.
    Frames {
        u: &'a Tensor,
        s: &'a Tensor,
        v: &'a Tensor,
    },
}

/// Dense reference for a linear cross-correlation with padding `p`.
pub fn linear_conv_reference(x: &Tensor, k: &Tensor, p: usize, depthwise: bool) -> Result<Tensor> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let g = tropical::ConvGeom::new(c, h, w, co, kh, kw, p, 1)?;
    let mut out = vec![0.0; co * g.h_out * g.w_out];
    for o in 0..co {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut acc = 0.0;
                let chans: Vec<(usize, usize)> = if depthwise { vec![(o, 0)] } else { (0..c).map(|ci| (ci, ci)).collect() };
                for (src, ki) in chans {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            if let Some(off) = g.input_offset(oy, ox, src, ky, kx) {
                                acc += x.data()[off] * k.data()[((o * k.shape()[1] + ki) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
                out[(o * g.h_out + oy) * g.w_out + ox] = acc;
            }
        }
    }
    Tensor::new(vec![co, g.h_out, g.w_out], out)
}

/// Dense `[C x C x 3 x 3]` kernel with tap `t` equal to `U_t diag(s_t) V_t^T`.
pub fn frames_to_kernel(u: &Tensor, s: &Tensor, v: &Tensor) -> Result<Tensor> {
    let c = u.shape()[1];
    let mut k = Tensor::zeros(vec![c, c, 3, 3]);
    for t in 0..9 {
        let ut = Tensor::new(vec![c, c], u.data()[t * c * c..(t + 1) * c * c].to_vec())?;
        let vt = Tensor::new(vec![c, c], v.data()[t * c * c..(t + 1) * c * c].to_vec())?;
        let mut us = ut.clone();
        for i in 0..c {
            for r in 0..c {
                us.set2(i, r, ut.at2(i, r) * s.data()[t * c + r]);
            }
        }
        let a = us.matmul(&vt.transpose2())?;
        for i in 0..c {
            for j in 0..c {
                k.data_mut()[(i * c + j) * 9 + t] = a.at2(i, j);
            }
        }
    }
    Ok(k)
}

/// Dilation plus erosion with a shared kernel, then the block activation.
pub fn morph_conv_block_forward(
    x: &Tensor,
    kernel: &Tensor,
    w0: &[f64],
    m0: &[f64],
    padding: usize,
    activation: ConvActivation<'_>,
) -> Result<Tensor> {
    let (hi, _) = tropical::tropical_conv2d(x, kernel, w0, TropicalMode::MaxPlus, padding)?;
    let (lo, _) = tropical::tropical_conv2d(x, kernel, m0, TropicalMode::MinPlus, padding)?;
    let data = hi.data().iter().zip(lo.data()).map(|(a, b)| a + b).collect();
    let y = Tensor::new(hi.shape().to_vec(), data)?;
    match activation {
        ConvActivation::Identity => Ok(y),
        ConvActivation::Depthwise(k) => linear_conv_reference(&y, k, 1, true),
        ConvActivation::Frames { u, s, v } => linear_conv_reference(&y, &frames_to_kernel(u, s, v)?, 1, false),
    }
}
