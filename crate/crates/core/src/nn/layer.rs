use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{fold_patches, unfold_patches, Tensor};

/// Layer type and its structural hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    /// Stride-1, zero-padded "same" convolution without bias.
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
    },
    Bias {
        channels: usize,
    },
    Scaling {
        channels: usize,
    },
    Relu,
    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    GlobalAvgPool,
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv { kernel, in_channels, out_channels } => {
                vec![vec![out_channels, kernel * kernel * in_channels]]
            }
            LayerKind::Bias { channels } | LayerKind::Scaling { channels } => vec![vec![channels]],
            LayerKind::FullyConnected { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerKind::Relu | LayerKind::MaxPool2 | LayerKind::GlobalAvgPool | LayerKind::Flatten => {
                vec![]
            }
        }
    }

    /// Number of inputs feeding each output unit, used for initialisation scales.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv { kernel, in_channels, .. } => kernel * kernel * in_channels,
            LayerKind::Bias { channels } | LayerKind::Scaling { channels } => channels,
            LayerKind::FullyConnected { inputs, .. } => inputs,
            _ => 1,
        }
    }

    pub fn has_params(&self) -> bool {
        !self.param_shapes().is_empty()
    }

    /// Whether the output keeps a `K x H x W` spatial layout.
    pub fn output_is_spatial(&self) -> bool {
        !matches!(self, LayerKind::GlobalAvgPool | LayerKind::FullyConnected { .. } | LayerKind::Flatten)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match input {
                [k, h, w] => Ok((*k, *h, *w)),
                _ => Err(invalid(format!("{what} expects a K x H x W input, got {input:?}"))),
            }
        };
        match *self {
            LayerKind::Conv { in_channels, out_channels, .. } => {
                let (k, h, w) = spatial("conv")?;
                if k != in_channels {
                    return Err(invalid(format!("conv expects {in_channels} channels, got {k}")));
                }
                Ok(vec![out_channels, h, w])
            }
            LayerKind::Bias { channels } | LayerKind::Scaling { channels } => {
                let (k, _, _) = spatial("bias/scaling")?;
                if k != channels {
                    return Err(invalid(format!("layer expects {channels} channels, got {k}")));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2 => {
                let (k, h, w) = spatial("max pool")?;
                if h < 2 || w < 2 {
                    return Err(invalid("max pool needs at least 2x2 input"));
                }
                Ok(vec![k, h / 2, w / 2])
            }
            LayerKind::GlobalAvgPool => {
                let (k, _, _) = spatial("global average pool")?;
                Ok(vec![k])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::FullyConnected { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(invalid(format!("fully connected expects {inputs} inputs, got {n}")));
                }
                Ok(vec![outputs])
            }
        }
    }
}

/// A named layer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<Tensor>,
}

/// Gradients produced by one layer's backward pass.
pub(crate) struct LayerGrads {
    pub input: Tensor,
    pub params: Vec<Tensor>,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind, params: Vec<Tensor>) -> Result<Self> {
        let name = name.into();
        let expected = kind.param_shapes();
        if params.len() != expected.len() || params.iter().zip(&expected).any(|(p, s)| p.shape() != s.as_slice()) {
            return Err(invalid(format!(
                "layer '{name}': parameters {:?} do not match {:?}",
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>(),
                expected
            )));
        }
        Ok(Self { name, kind, params })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.kind.output_shape(x.shape())?;
        let out = match self.kind {
            LayerKind::Conv { kernel, .. } => {
                let cols = unfold_patches(x, kernel)?;
                self.params[0].matmul(&cols)?.reshape(&out_shape)?
            }
            LayerKind::Bias { .. } => per_channel(x, |c, v| v + self.params[0].data()[c]),
            LayerKind::Scaling { .. } => per_channel(x, |c, v| v * self.params[0].data()[c]),
            LayerKind::Relu => x.map(|v| v.max(0.0)),
            LayerKind::MaxPool2 => {
                let (k, h, w) = x.dims3()?;
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(k * oh * ow);
                for c in 0..k {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let idx = pool_argmax(x.data(), c, h, w, oy, ox);
                            out.push(x.data()[idx]);
                        }
                    }
                }
                Tensor::from_parts(out_shape, out)
            }
            LayerKind::GlobalAvgPool => {
                let (k, h, w) = x.dims3()?;
                let hw = h * w;
                let out = (0..k).map(|c| x.data()[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
                Tensor::from_parts(out_shape, out)
            }
            LayerKind::Flatten => x.reshape(&out_shape)?,
            LayerKind::FullyConnected { inputs, outputs } => {
                let w = self.params[0].data();
                let b = self.params[1].data();
                let out = (0..outputs)
                    .map(|o| {
                        w[o * inputs..(o + 1) * inputs].iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>() + b[o]
                    })
                    .collect();
                Tensor::from_parts(out_shape, out)
            }
        };
        Ok(out)
    }

    /// Backward pass given the layer input and the gradient at its output.
    pub(crate) fn backward(&self, x_in: &Tensor, g_out: &Tensor) -> Result<LayerGrads> {
        let (input, params) = match self.kind {
            LayerKind::Conv { kernel, in_channels, out_channels } => {
                let (_, h, w) = x_in.dims3()?;
                let g = g_out.reshape(&[out_channels, h * w])?;
                let cols = unfold_patches(x_in, kernel)?;
                let dw = matmul_transpose_rhs(&g, &cols);
                let wt_g = matmul_transpose_lhs(&self.params[0], &g);
                let gin = fold_patches(&wt_g, kernel, in_channels, h, w)?;
                (gin, vec![dw])
            }
            LayerKind::Bias { channels } => {
                let (_, h, w) = x_in.dims3()?;
                let hw = h * w;
                let db = (0..channels).map(|c| g_out.data()[c * hw..(c + 1) * hw].iter().sum()).collect();
                (g_out.clone(), vec![Tensor::from_parts(vec![channels], db)])
            }
            LayerKind::Scaling { channels } => {
                let (_, h, w) = x_in.dims3()?;
                let hw = h * w;
                let alpha = self.params[0].data();
                let da = (0..channels)
                    .map(|c| {
                        let r = c * hw..(c + 1) * hw;
                        g_out.data()[r.clone()].iter().zip(&x_in.data()[r]).map(|(g, x)| g * x).sum()
                    })
                    .collect();
                let gin = per_channel(g_out, |c, v| v * alpha[c]);
                (gin, vec![Tensor::from_parts(vec![channels], da)])
            }
            LayerKind::Relu => {
                let data = x_in.data().iter().zip(g_out.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
                (Tensor::from_parts(x_in.shape().to_vec(), data), vec![])
            }
            LayerKind::MaxPool2 => {
                let (k, h, w) = x_in.dims3()?;
                let (oh, ow) = (h / 2, w / 2);
                let mut gin = vec![0.0; k * h * w];
                for c in 0..k {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let idx = pool_argmax(x_in.data(), c, h, w, oy, ox);
                            gin[idx] += g_out.data()[c * oh * ow + oy * ow + ox];
                        }
                    }
                }
                (Tensor::from_parts(vec![k, h, w], gin), vec![])
            }
            LayerKind::GlobalAvgPool => {
                let (k, h, w) = x_in.dims3()?;
                let hw = h * w;
                let mut gin = Vec::with_capacity(k * hw);
                for c in 0..k {
                    let v = g_out.data()[c] / hw as f64;
                    gin.extend(std::iter::repeat_n(v, hw));
                }
                (Tensor::from_parts(vec![k, h, w], gin), vec![])
            }
            LayerKind::Flatten => (g_out.reshape(x_in.shape())?, vec![]),
            LayerKind::FullyConnected { inputs, outputs } => {
                let w = self.params[0].data();
                let g = g_out.data();
                let x = x_in.data();
                let mut dw = vec![0.0; outputs * inputs];
                let mut gin = vec![0.0; inputs];
                for o in 0..outputs {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    let drow = &mut dw[o * inputs..(o + 1) * inputs];
                    for i in 0..inputs {
                        drow[i] = g[o] * x[i];
                        gin[i] += row[i] * g[o];
                    }
                }
                (
                    Tensor::from_parts(x_in.shape().to_vec(), gin),
                    vec![Tensor::from_parts(vec![outputs, inputs], dw), Tensor::from_parts(vec![outputs], g.to_vec())],
                )
            }
        };
        Ok(LayerGrads { input, params })
    }
}

fn per_channel(x: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let k = x.shape()[0];
    let hw = x.numel() / k.max(1);
    let data = x.data().iter().enumerate().map(|(i, &v)| f(i / hw, v)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Flat index of the maximum in one 2x2 window; ties go to the first in row-major order.
pub(crate) fn pool_argmax(data: &[f64], c: usize, h: usize, w: usize, oy: usize, ox: usize) -> usize {
    let base = c * h * w;
    let mut best = base + (2 * oy) * w + 2 * ox;
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
        if data[idx] > data[best] {
            best = idx;
        }
    }
    best
}

// a [m, n] * b[p, n]^T -> [m, p]
fn matmul_transpose_rhs(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let p = b.shape()[0];
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let ar = &a.data()[i * n..(i + 1) * n];
        for j in 0..p {
            let br = &b.data()[j * n..(j + 1) * n];
            out[i * p + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_parts(vec![m, p], out)
}

// a[m, p]^T * b[m, n] -> [p, n]
fn matmul_transpose_lhs(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, p) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; p * n];
    for i in 0..m {
        let br = &b.data()[i * n..(i + 1) * n];
        for j in 0..p {
            let aij = a.data()[i * p + j];
            if aij == 0.0 {
                continue;
            }
            let orow = &mut out[j * n..(j + 1) * n];
            for (o, &v) in orow.iter_mut().zip(br) {
                *o += aij * v;
            }
        }
    }
    Tensor::from_parts(vec![p, n], out)
}
