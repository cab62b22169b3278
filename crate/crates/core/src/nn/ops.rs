use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::kernels::{self, Geometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A layer operation. The first six variants are searchable candidates; the
/// remaining ones only appear as fixed layers (stem activation, downsampling,
/// classifier head).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpKind {
    Identity,
    Zero,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
    },
    /// Inverted-residual block: optional 1x1 expansion with ReLU, depthwise
    /// `kernel x kernel` with ReLU, linear 1x1 projection, plus the input.
    DepthwiseSepConv {
        kernel: usize,
        channels: usize,
        expansion: usize,
    },
    /// Stride-1 average pooling with zero padding (divisor is always k²).
    AvgPool {
        kernel: usize,
    },
    Relu,
    /// 2x2 average pooling with stride 2.
    Downsample,
    Flatten,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Identity => write!(f, "identity"),
            OpKind::Zero => write!(f, "zero"),
            OpKind::Dense {
                in_features,
                out_features,
            } => write!(f, "dense_{in_features}x{out_features}"),
            OpKind::Conv {
                kernel,
                in_channels,
                out_channels,
            } => write!(f, "conv{kernel}_{in_channels}to{out_channels}"),
            OpKind::DepthwiseSepConv {
                kernel,
                channels,
                expansion,
            } => write!(f, "dwsep{kernel}e{expansion}_c{channels}"),
            OpKind::AvgPool { kernel } => write!(f, "avgpool{kernel}"),
            OpKind::Relu => write!(f, "relu"),
            OpKind::Downsample => write!(f, "downsample2"),
            OpKind::Flatten => write!(f, "flatten"),
        }
    }
}

impl OpKind {
    /// Parses a channel-preserving candidate name such as `dwsep5e3`,
    /// `conv3`, `avgpool3`, `identity` or `zero`.
    pub fn parse_candidate(name: &str, channels: usize) -> Result<OpKind> {
        let bad = || Error::InvalidArgument(format!("unknown candidate `{name}`"));
        let op = match name {
            "identity" => OpKind::Identity,
            "zero" => OpKind::Zero,
            "avgpool3" => OpKind::AvgPool { kernel: 3 },
            _ if name.starts_with("conv") => {
                let kernel: usize = name[4..].parse().map_err(|_| bad())?;
                OpKind::Conv {
                    kernel,
                    in_channels: channels,
                    out_channels: channels,
                }
            }
            _ if name.starts_with("dwsep") => {
                let (k, e) = name[5..].split_once('e').ok_or_else(bad)?;
                OpKind::DepthwiseSepConv {
                    kernel: k.parse().map_err(|_| bad())?,
                    channels,
                    expansion: e.parse().map_err(|_| bad())?,
                }
            }
            _ => return Err(bad()),
        };
        op.validate()?;
        Ok(op)
    }

    pub fn validate(&self) -> Result<()> {
        let odd = |k: usize| k % 2 == 1 && k >= 1;
        let ok = match *self {
            OpKind::Dense {
                in_features,
                out_features,
            } => in_features > 0 && out_features > 0,
            OpKind::Conv {
                kernel,
                in_channels,
                out_channels,
            } => odd(kernel) && in_channels > 0 && out_channels > 0,
            OpKind::DepthwiseSepConv {
                kernel,
                channels,
                expansion,
            } => odd(kernel) && channels > 0 && expansion > 0,
            OpKind::AvgPool { kernel } => odd(kernel),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid operation {self:?}"
            )))
        }
    }

    /// Shapes of the parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            OpKind::Dense {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            OpKind::Conv {
                kernel,
                in_channels,
                out_channels,
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            OpKind::DepthwiseSepConv {
                kernel,
                channels,
                expansion,
            } => {
                let wide = channels * expansion;
                let mut shapes = Vec::new();
                if expansion > 1 {
                    shapes.push(vec![wide, channels]);
                    shapes.push(vec![wide]);
                }
                shapes.push(vec![wide, kernel, kernel]);
                shapes.push(vec![wide]);
                shapes.push(vec![channels, wide]);
                shapes.push(vec![channels]);
                shapes
            }
            _ => Vec::new(),
        }
    }

    pub fn param_len(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Output shape for a batched input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Error::Shape(format!("{self} cannot take input {input:?}"));
        match *self {
            OpKind::Identity | OpKind::Zero | OpKind::Relu => Ok(input.to_vec()),
            OpKind::Dense {
                in_features,
                out_features,
            } => match input {
                &[n, f] if f == in_features => Ok(vec![n, out_features]),
                _ => Err(mismatch()),
            },
            OpKind::Conv {
                in_channels,
                out_channels,
                ..
            } => match input {
                &[n, c, h, w] if c == in_channels => Ok(vec![n, out_channels, h, w]),
                _ => Err(mismatch()),
            },
            OpKind::DepthwiseSepConv { channels, .. } => match input {
                &[_, c, _, _] if c == channels => Ok(input.to_vec()),
                _ => Err(mismatch()),
            },
            OpKind::AvgPool { .. } => match input {
                &[_, _, _, _] => Ok(input.to_vec()),
                _ => Err(mismatch()),
            },
            OpKind::Downsample => match input {
                &[n, c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![n, c, h / 2, w / 2]),
                _ => Err(mismatch()),
            },
            OpKind::Flatten => match input {
                [n, rest @ ..] if !rest.is_empty() => Ok(vec![*n, rest.iter().product()]),
                _ => Err(mismatch()),
            },
        }
    }

    /// Multiply-adds for one example with the given (unbatched) input shape.
    /// Pooling, activations, identity and zero count as free.
    pub fn macs(&self, example_shape: &[usize]) -> u64 {
        let spatial = |s: &[usize]| -> u64 {
            match s {
                [_, h, w] => (*h * *w) as u64,
                _ => 0,
            }
        };
        match *self {
            OpKind::Dense {
                in_features,
                out_features,
            } => (in_features * out_features) as u64,
            OpKind::Conv {
                kernel,
                in_channels,
                out_channels,
            } => (kernel * kernel * in_channels * out_channels) as u64 * spatial(example_shape),
            OpKind::DepthwiseSepConv {
                kernel,
                channels,
                expansion,
            } => {
                let wide = (channels * expansion) as u64;
                let c = channels as u64;
                let expand = if expansion > 1 { c * wide } else { 0 };
                (expand + (kernel * kernel) as u64 * wide + wide * c) * spatial(example_shape)
            }
            _ => 0,
        }
    }

    /// Draws fresh parameters: He-normal for weights feeding a ReLU,
    /// LeCun-normal for linear outputs, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        let mut normal = |n: usize, std: f64, out: &mut Vec<f64>| {
            for _ in 0..n {
                let z: f64 = StandardNormal.sample(rng);
                out.push(z * std);
            }
        };
        match *self {
            OpKind::Dense {
                in_features,
                out_features,
            } => {
                normal(
                    in_features * out_features,
                    (1.0 / in_features as f64).sqrt(),
                    &mut out,
                );
                out.extend(std::iter::repeat_n(0.0, out_features));
            }
            OpKind::Conv {
                kernel,
                in_channels,
                out_channels,
            } => {
                let fan_in = (in_channels * kernel * kernel) as f64;
                normal(
                    out_channels * in_channels * kernel * kernel,
                    (2.0 / fan_in).sqrt(),
                    &mut out,
                );
                out.extend(std::iter::repeat_n(0.0, out_channels));
            }
            OpKind::DepthwiseSepConv {
                kernel,
                channels,
                expansion,
            } => {
                let wide = channels * expansion;
                if expansion > 1 {
                    normal(wide * channels, (2.0 / channels as f64).sqrt(), &mut out);
                    out.extend(std::iter::repeat_n(0.0, wide));
                }
                normal(
                    wide * kernel * kernel,
                    (2.0 / (kernel * kernel) as f64).sqrt(),
                    &mut out,
                );
                out.extend(std::iter::repeat_n(0.0, wide));
                // The projection feeds a residual sum; a small start keeps
                // stacked blocks near the identity.
                normal(channels * wide, 0.1 * (1.0 / wide as f64).sqrt(), &mut out);
                out.extend(std::iter::repeat_n(0.0, channels));
            }
            _ => {}
        }
        out
    }

    pub fn is_searchable(&self) -> bool {
        !matches!(self, OpKind::Relu | OpKind::Downsample | OpKind::Flatten)
    }
}

#[derive(Clone, Debug)]
enum Saved {
    Nothing,
    Input(Tensor),
    Output(Tensor),
    Inverted {
        input: Tensor,
        expanded: Option<Vec<f64>>,
        depthwise: Vec<f64>,
    },
}

/// Activation record produced by [`op_forward`] and consumed by [`op_backward`].
#[derive(Clone, Debug)]
pub struct Cache {
    op: OpKind,
    input_shape: Vec<usize>,
    saved: Saved,
}

impl Cache {
    pub fn op(&self) -> &OpKind {
        &self.op
    }

    /// Sign pattern of every ReLU pre-activation seen in the forward pass.
    /// Finite-difference harnesses use it to detect kink crossings.
    pub fn activation_pattern(&self) -> Vec<bool> {
        match &self.saved {
            Saved::Output(out) if self.op == OpKind::Relu => {
                out.data().iter().map(|&v| v > 0.0).collect()
            }
            Saved::Inverted {
                expanded,
                depthwise,
                ..
            } => expanded
                .iter()
                .flatten()
                .chain(depthwise.iter())
                .map(|&v| v > 0.0)
                .collect(),
            _ => Vec::new(),
        }
    }
}

fn check_params(op: &OpKind, params: &[f64]) -> Result<()> {
    if params.len() != op.param_len() {
        return Err(Error::Shape(format!(
            "{op} expects {} parameters, got {}",
            op.param_len(),
            params.len()
        )));
    }
    Ok(())
}

fn relu_in_place(values: &mut [f64]) {
    for v in values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn mask_by(grad: &mut [f64], activation: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Runs one operation forward.
pub fn op_forward(op: &OpKind, params: &[f64], input: &Tensor) -> Result<(Tensor, Cache)> {
    check_params(op, params)?;
    let out_shape = op.output_shape(input.shape())?;
    if !input.is_finite() {
        return Err(Error::NonFinite(format!("input to {op}")));
    }
    let input_shape = input.shape().to_vec();
    let (output, saved) = match *op {
        OpKind::Identity => (input.clone(), Saved::Nothing),
        OpKind::Zero => (Tensor::zeros(&out_shape), Saved::Nothing),
        OpKind::Dense {
            in_features,
            out_features,
        } => {
            let (n, _) = input.dims2()?;
            let (weight, bias) = params.split_at(in_features * out_features);
            let x = input.data();
            let mut out = vec![0.0; n * out_features];
            for b in 0..n {
                let row = &x[b * in_features..(b + 1) * in_features];
                for o in 0..out_features {
                    let wrow = &weight[o * in_features..(o + 1) * in_features];
                    let mut acc = bias[o];
                    for (w, v) in wrow.iter().zip(row) {
                        acc += w * v;
                    }
                    out[b * out_features + o] = acc;
                }
            }
            (Tensor::new(out_shape, out)?, Saved::Input(input.clone()))
        }
        OpKind::Conv {
            kernel,
            in_channels,
            out_channels,
        } => {
            let (n, _, h, w) = input.dims4()?;
            let geo = Geometry {
                batch: n,
                height: h,
                width: w,
            };
            let (weight, bias) = params.split_at(out_channels * in_channels * kernel * kernel);
            let out = kernels::conv_forward(
                &geo,
                input.data(),
                in_channels,
                out_channels,
                kernel,
                weight,
                bias,
            );
            (Tensor::new(out_shape, out)?, Saved::Input(input.clone()))
        }
        OpKind::DepthwiseSepConv {
            kernel,
            channels,
            expansion,
        } => {
            let (n, _, h, w) = input.dims4()?;
            let geo = Geometry {
                batch: n,
                height: h,
                width: w,
            };
            let wide = channels * expansion;
            let mut rest = params;
            let expanded = if expansion > 1 {
                let (we, tail) = rest.split_at(wide * channels);
                let (be, tail) = tail.split_at(wide);
                rest = tail;
                let mut e =
                    kernels::pointwise_forward(n, h * w, input.data(), channels, wide, we, be);
                relu_in_place(&mut e);
                Some(e)
            } else {
                None
            };
            let (wd, tail) = rest.split_at(wide * kernel * kernel);
            let (bd, tail) = tail.split_at(wide);
            let (wp, bp) = tail.split_at(channels * wide);
            let dw_in = expanded.as_deref().unwrap_or(input.data());
            let mut depthwise = kernels::depthwise_forward(&geo, dw_in, wide, kernel, wd, bd);
            relu_in_place(&mut depthwise);
            let mut out = kernels::pointwise_forward(n, h * w, &depthwise, wide, channels, wp, bp);
            for (o, x) in out.iter_mut().zip(input.data()) {
                *o += x;
            }
            (
                Tensor::new(out_shape, out)?,
                Saved::Inverted {
                    input: input.clone(),
                    expanded,
                    depthwise,
                },
            )
        }
        OpKind::AvgPool { kernel } => {
            let (n, c, h, w) = input.dims4()?;
            let geo = Geometry {
                batch: n,
                height: h,
                width: w,
            };
            let weight = vec![1.0 / (kernel * kernel) as f64; c * kernel * kernel];
            let out = kernels::depthwise_forward(&geo, input.data(), c, kernel, &weight, &[]);
            (Tensor::new(out_shape, out)?, Saved::Nothing)
        }
        OpKind::Relu => {
            let mut out = input.clone();
            relu_in_place(out.data_mut());
            (out.clone(), Saved::Output(out))
        }
        OpKind::Downsample => {
            let (n, c, h, w) = input.dims4()?;
            let (oh, ow) = (h / 2, w / 2);
            let x = input.data();
            let mut out = vec![0.0; n * c * oh * ow];
            for p in 0..n * c {
                let src = &x[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for y in 0..oh {
                    for xo in 0..ow {
                        let i = 2 * y * w + 2 * xo;
                        dst[y * ow + xo] =
                            0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                    }
                }
            }
            (Tensor::new(out_shape, out)?, Saved::Nothing)
        }
        OpKind::Flatten => (input.clone().reshaped(out_shape)?, Saved::Nothing),
    };
    Ok((
        output,
        Cache {
            op: op.clone(),
            input_shape,
            saved,
        },
    ))
}

/// Reverse-mode rule for one operation. Returns the input gradient and the
/// parameter gradient laid out like `params`.
pub fn op_backward(
    op: &OpKind,
    params: &[f64],
    cache: &Cache,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let (gin, gp) = backward_impl(op, params, cache, grad_out, true)?;
    Ok((gin, gp.unwrap_or_default()))
}

/// Input gradient only; skips the parameter-gradient accumulation.
pub fn op_backward_input(
    op: &OpKind,
    params: &[f64],
    cache: &Cache,
    grad_out: &Tensor,
) -> Result<Tensor> {
    Ok(backward_impl(op, params, cache, grad_out, false)?.0)
}

fn backward_impl(
    op: &OpKind,
    params: &[f64],
    cache: &Cache,
    grad_out: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if cache.op != *op {
        return Err(Error::StaleCache {
            expected: op.to_string(),
            found: cache.op.to_string(),
        });
    }
    check_params(op, params)?;
    let out_shape = op.output_shape(&cache.input_shape)?;
    if grad_out.shape() != out_shape.as_slice() {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match {op} output {out_shape:?}",
            grad_out.shape()
        )));
    }
    let in_shape = cache.input_shape.clone();
    let no_params = || want_params.then(Vec::new);
    let result = match (op, &cache.saved) {
        (OpKind::Identity, _) => (grad_out.clone(), no_params()),
        (OpKind::Zero, _) => (Tensor::zeros(&in_shape), no_params()),
        (
            &OpKind::Dense {
                in_features,
                out_features,
            },
            Saved::Input(input),
        ) => {
            let n = in_shape[0];
            let weight = &params[..in_features * out_features];
            let x = input.data();
            let g = grad_out.data();
            let mut gin = vec![0.0; n * in_features];
            let mut gp = vec![0.0; if want_params { op.param_len() } else { 0 }];
            for b in 0..n {
                let grow = &g[b * out_features..(b + 1) * out_features];
                let xrow = &x[b * in_features..(b + 1) * in_features];
                let girow = &mut gin[b * in_features..(b + 1) * in_features];
                for (o, &go) in grow.iter().enumerate() {
                    let wrow = &weight[o * in_features..(o + 1) * in_features];
                    for (gi, w) in girow.iter_mut().zip(wrow) {
                        *gi += go * w;
                    }
                    if want_params {
                        let gw = &mut gp[o * in_features..(o + 1) * in_features];
                        for (gw, xv) in gw.iter_mut().zip(xrow) {
                            *gw += go * xv;
                        }
                        gp[in_features * out_features + o] += go;
                    }
                }
            }
            (Tensor::new(in_shape, gin)?, want_params.then_some(gp))
        }
        (
            &OpKind::Conv {
                kernel,
                in_channels,
                out_channels,
            },
            Saved::Input(input),
        ) => {
            let geo = Geometry {
                batch: in_shape[0],
                height: in_shape[2],
                width: in_shape[3],
            };
            let weight = &params[..out_channels * in_channels * kernel * kernel];
            let (gin, pg) = kernels::conv_backward(
                &geo,
                input.data(),
                grad_out.data(),
                in_channels,
                out_channels,
                kernel,
                weight,
                want_params,
            );
            let gp = pg.map(|p| [p.weight, p.bias].concat());
            (Tensor::new(in_shape, gin)?, gp)
        }
        (
            &OpKind::DepthwiseSepConv {
                kernel,
                channels,
                expansion,
            },
            Saved::Inverted {
                input,
                expanded,
                depthwise,
            },
        ) => {
            let (n, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
            let hw = h * w;
            let geo = Geometry {
                batch: n,
                height: h,
                width: w,
            };
            let wide = channels * expansion;
            let mut rest = params;
            let expand_w = if expansion > 1 {
                let (we, tail) = rest.split_at(wide * channels);
                rest = &tail[wide..];
                Some(we)
            } else {
                None
            };
            let (wd, tail) = rest.split_at(wide * kernel * kernel);
            let wp = &tail[wide..wide + channels * wide];

            let (mut g_dw, proj) = kernels::pointwise_backward(
                n,
                hw,
                depthwise,
                grad_out.data(),
                wide,
                channels,
                wp,
                want_params,
            );
            mask_by(&mut g_dw, depthwise);
            let dw_in = expanded.as_deref().unwrap_or(input.data());
            let (mut g_mid, dwg) =
                kernels::depthwise_backward(&geo, dw_in, &g_dw, wide, kernel, wd, want_params);

            let mut gin = grad_out.data().to_vec();
            let mut expand_grads = None;
            if let (Some(we), Some(e)) = (expand_w, expanded.as_deref()) {
                mask_by(&mut g_mid, e);
                let (gx, eg) = kernels::pointwise_backward(
                    n,
                    hw,
                    input.data(),
                    &g_mid,
                    channels,
                    wide,
                    we,
                    want_params,
                );
                for (a, b) in gin.iter_mut().zip(&gx) {
                    *a += b;
                }
                expand_grads = eg;
            } else {
                for (a, b) in gin.iter_mut().zip(&g_mid) {
                    *a += b;
                }
            }
            let gp = if want_params {
                let mut gp = Vec::with_capacity(op.param_len());
                if let Some(eg) = expand_grads {
                    gp.extend(eg.weight);
                    gp.extend(eg.bias);
                }
                let dwg = dwg.expect("requested");
                gp.extend(dwg.weight);
                gp.extend(dwg.bias);
                let proj = proj.expect("requested");
                gp.extend(proj.weight);
                gp.extend(proj.bias);
                Some(gp)
            } else {
                None
            };
            (Tensor::new(in_shape, gin)?, gp)
        }
        (&OpKind::AvgPool { kernel }, _) => {
            let geo = Geometry {
                batch: in_shape[0],
                height: in_shape[2],
                width: in_shape[3],
            };
            let c = in_shape[1];
            let weight = vec![1.0 / (kernel * kernel) as f64; c * kernel * kernel];
            let (gin, _) =
                kernels::depthwise_backward(&geo, &[], grad_out.data(), c, kernel, &weight, false);
            (Tensor::new(in_shape, gin)?, no_params())
        }
        (OpKind::Relu, Saved::Output(out)) => {
            let mut gin = grad_out.data().to_vec();
            mask_by(&mut gin, out.data());
            (Tensor::new(in_shape, gin)?, no_params())
        }
        (OpKind::Downsample, _) => {
            let (h, w) = (in_shape[2], in_shape[3]);
            let (oh, ow) = (h / 2, w / 2);
            let planes = in_shape[0] * in_shape[1];
            let g = grad_out.data();
            let mut gin = vec![0.0; planes * h * w];
            for p in 0..planes {
                for y in 0..oh {
                    for x in 0..ow {
                        let v = 0.25 * g[p * oh * ow + y * ow + x];
                        let i = p * h * w + 2 * y * w + 2 * x;
                        gin[i] = v;
                        gin[i + 1] = v;
                        gin[i + w] = v;
                        gin[i + w + 1] = v;
                    }
                }
            }
            (Tensor::new(in_shape, gin)?, no_params())
        }
        (OpKind::Flatten, _) => (grad_out.clone().reshaped(in_shape)?, no_params()),
        _ => {
            return Err(Error::StaleCache {
                expected: op.to_string(),
                found: "cache without saved activations".into(),
            })
        }
    };
    Ok(result)
}
