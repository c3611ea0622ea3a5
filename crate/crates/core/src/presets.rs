//! Named network architectures.

use crate::error::{Error, Result};
use crate::layers::{Activation, ConvSpec, LambdaMode, LayerKind, LayerSpec, NetworkSpec};
use crate::tropical::TropicalMode;

/// Hidden width of the fully connected classifiers.
pub const WIDTH: usize = 256;
/// Hidden layer count of the fully connected classifiers.
pub const DEPTH: usize = 5;
/// Hidden width of the regression networks.
pub const REG_WIDTH: usize = 100;

pub const PRESETS: &[&str] = &[
    "mlp",
    "mp",
    "dep",
    "dep-half",
    "act-mp",
    "act-dep",
    "act-dep-34",
    "act-dep-half",
    "mpm",
    "rmpm",
    "rmpm-drop",
    "mpm-svd",
    "hybrid-mlp",
    "maxout",
    "lenet5",
    "mpm-lenet5",
    "mpm-svd-lenet5",
    "reg-mlp",
    "reg-mpm",
    "reg-mpm-noact",
];

fn widths(n_in: usize, n_out: usize, hidden: usize, depth: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(depth + 1);
    let mut prev = n_in;
    for _ in 0..depth {
        v.push((prev, hidden));
        prev = hidden;
    }
    v.push((prev, n_out));
    v
}

/// A stack of `depth` hidden layers plus an output layer built by `make`.
fn stack(n_in: usize, n_out: usize, hidden: usize, depth: usize, make: impl Fn(usize, usize) -> LayerSpec) -> Vec<LayerSpec> {
    let w = widths(n_in, n_out, hidden, depth);
    let last = w.len() - 1;
    w.into_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let l = make(a, b);
            if i == last {
                l.output()
            } else {
                l
            }
        })
        .collect()
}

fn relu_mlp(n_in: usize, n_out: usize, hidden: usize, depth: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (a, b) in widths(n_in, n_out, hidden, depth).into_iter().take(depth) {
        layers.push(LayerSpec::linear(a, b));
        layers.push(LayerSpec::relu(b));
    }
    layers.push(LayerSpec::linear(if depth == 0 { n_in } else { hidden }, n_out).output());
    layers
}

fn dep_stack(n_in: usize, n_out: usize, lambda: LambdaMode, act: Activation) -> Vec<LayerSpec> {
    stack(n_in, n_out, WIDTH, DEPTH, |a, b| LayerSpec::dep(a, b, lambda).with_activation(act))
}

fn mpm_stack(n_in: usize, n_out: usize, hidden: usize, depth: usize, act: Activation) -> Vec<LayerSpec> {
    stack(n_in, n_out, hidden, depth, |a, b| LayerSpec::mpm(a, b).with_activation(act))
}

fn conv(kind: LayerKind, c_in: usize, h: usize, w: usize, c_out: usize, kernel: usize, padding: usize, stride: usize) -> Result<LayerSpec> {
    let geom = ConvSpec {
        in_channels: c_in,
        height: h,
        width: w,
        out_channels: c_out,
        kernel,
        padding,
        stride,
    };
    let mut l = LayerSpec::new(kind, geom.in_len(), geom.out_len()?);
    l.conv = Some(geom);
    Ok(l)
}

/// LeNet-5 variant: 5x5 kernels with padding 1, 2x2 max pooling, then
/// 120 -> 84 -> classes fully connected layers.
fn lenet(input_shape: &[usize], classes: usize, setting: Option<Activation>) -> Result<Vec<LayerSpec>> {
    let [c, h, w] = *input_shape else {
        return Err(Error::Spec(format!("LeNet needs a [C, H, W] input, got {input_shape:?}")));
    };
    let conv_kind = match setting {
        None => LayerKind::Conv,
        Some(Activation::Scale) => LayerKind::MorphConvS1,
        Some(_) => LayerKind::MorphConvS2,
    };
    let mut layers = Vec::new();
    let (mut c, mut h, mut w) = (c, h, w);
    for c_out in [6, 16] {
        let mut l = conv(conv_kind, c, h, w, c_out, 5, 1, 1)?;
        if let Some(a) = setting {
            l.activation = a;
        }
        let (h1, w1) = l.conv.expect("conv geometry").out_hw()?;
        layers.push(l);
        if setting.is_none() {
            layers.push(LayerSpec::relu(c_out * h1 * w1));
        }
        let pool = conv(LayerKind::MaxPool, c_out, h1, w1, c_out, 2, 0, 2)?;
        let (h2, w2) = pool.conv.expect("conv geometry").out_hw()?;
        layers.push(pool);
        (c, h, w) = (c_out, h2, w2);
    }
    let flat = c * h * w;
    match setting {
        None => {
            layers.push(LayerSpec::linear(flat, 120));
            layers.push(LayerSpec::relu(120));
            layers.push(LayerSpec::linear(120, 84));
            layers.push(LayerSpec::relu(84));
            layers.push(LayerSpec::linear(84, classes).output());
        }
        Some(a) => {
            let fc_act = if a == Activation::Scale { Activation::Scale } else { Activation::Svd };
            let kind = if a == Activation::Scale { LayerKind::Mpm } else { LayerKind::MpmSvd };
            for (i, o) in [(flat, 120), (120, 84)] {
                let mut l = LayerSpec::mpm(i, o).with_activation(fc_act);
                l.kind = kind;
                layers.push(l);
            }
            let mut out = LayerSpec::mpm(84, classes).output();
            out.kind = kind;
            layers.push(out);
        }
    }
    Ok(layers)
}

/// Builds the named preset for an input of `input_shape` and `classes`
/// outputs.
pub fn preset(name: &str, input_shape: &[usize], classes: usize) -> Result<NetworkSpec> {
    let n_in: usize = input_shape.iter().product();
    let layers = match name {
        "mlp" => relu_mlp(n_in, classes, WIDTH, DEPTH),
        "mp" | "act-mp" => {
            let act = if name == "mp" { Activation::None } else { Activation::Scale };
            stack(n_in, classes, WIDTH, DEPTH, |a, b| {
                LayerSpec::mp(a, b, TropicalMode::MaxPlus, true).with_activation(act)
            })
        }
        "dep" => dep_stack(n_in, classes, LambdaMode::Learnable, Activation::None),
        "dep-half" => dep_stack(n_in, classes, LambdaMode::Fixed(0.5), Activation::None),
        "act-dep" => dep_stack(n_in, classes, LambdaMode::Learnable, Activation::Scale),
        "act-dep-34" => dep_stack(n_in, classes, LambdaMode::Fixed(0.75), Activation::Scale),
        "act-dep-half" => dep_stack(n_in, classes, LambdaMode::Fixed(0.5), Activation::Scale),
        "mpm" => mpm_stack(n_in, classes, WIDTH, DEPTH, Activation::Scale),
        "rmpm" | "rmpm-drop" => {
            let rate = if name == "rmpm" { 0.0 } else { 0.3 };
            let mut v = mpm_stack(n_in, classes, WIDTH, DEPTH, Activation::Scale);
            for l in &mut v {
                l.kind = LayerKind::Rmpm;
                l.residual = l.n_in == l.n_out && !l.is_output_layer;
                l.dropout_rate = rate;
            }
            v
        }
        "mpm-svd" => {
            let mut v = mpm_stack(n_in, classes, WIDTH, DEPTH, Activation::Svd);
            v.iter_mut().for_each(|l| l.kind = LayerKind::MpmSvd);
            v
        }
        "hybrid-mlp" => {
            let mut v: Vec<LayerSpec> = widths(n_in, classes, WIDTH, DEPTH)
                .into_iter()
                .take(DEPTH)
                .map(|(a, b)| LayerSpec::new(LayerKind::HybridBlock, a, b))
                .collect();
            v.push(LayerSpec::linear(WIDTH, classes).output());
            v
        }
        "maxout" => {
            let mut v: Vec<LayerSpec> = widths(n_in, classes, WIDTH, DEPTH)
                .into_iter()
                .take(DEPTH)
                .map(|(a, b)| LayerSpec {
                    pieces: 2,
                    ..LayerSpec::new(LayerKind::Maxout, a, b)
                })
                .collect();
            v.push(LayerSpec::linear(WIDTH, classes).output());
            v
        }
        "lenet5" => lenet(input_shape, classes, None)?,
        "mpm-lenet5" => lenet(input_shape, classes, Some(Activation::Scale))?,
        "mpm-svd-lenet5" => lenet(input_shape, classes, Some(Activation::Svd))?,
        "reg-mlp" => relu_mlp(n_in, classes, REG_WIDTH, 2),
        "reg-mpm" => mpm_stack(n_in, classes, REG_WIDTH, 2, Activation::Scale),
        "reg-mpm-noact" => mpm_stack(n_in, classes, REG_WIDTH, 2, Activation::None),
        other => return Err(Error::Spec(format!("unknown preset `{other}`"))),
    };
    let spec = NetworkSpec::new(input_shape.to_vec(), layers);
    spec.validate()?;
    Ok(spec)
}
