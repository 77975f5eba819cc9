//! Neural layers built on the autodiff graph, with closed-form parameter
//! accounting and seeded initialization.
//!
//! Conventions: channels-last data, stride 1, zero "same" padding with the
//! extra cell on the trailing side for even kernels. Convolutions are
//! cross-correlations. LSTM gate blocks are packed in the order
//! input, forget, candidate, output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Input {
        shape: Vec<usize>,
    },
    SeparableConv2D {
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        activation: Activation,
    },
    Conv2D {
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        activation: Activation,
    },
    Conv1D {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        activation: Activation,
    },
    BatchNorm {
        channels: usize,
    },
    Dense {
        in_dim: usize,
        units: usize,
        activation: Activation,
    },
    TimeDistributedDense {
        in_dim: usize,
        units: usize,
        activation: Activation,
    },
    Lstm {
        input_dim: usize,
        units: usize,
    },
    Reshape,
    TimeDistributedFlatten,
    Concat,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "Input",
            LayerKind::SeparableConv2D { .. } => "SeparableConv2D",
            LayerKind::Conv2D { .. } => "Conv2D",
            LayerKind::Conv1D { .. } => "Conv1D",
            LayerKind::BatchNorm { .. } => "BatchNormalization",
            LayerKind::Dense { .. } => "Dense",
            LayerKind::TimeDistributedDense { .. } => "TimeDistributed_Dense",
            LayerKind::Lstm { .. } => "LSTM",
            LayerKind::Reshape => "Reshape",
            LayerKind::TimeDistributedFlatten => "TimeDistributed_Flatten",
            LayerKind::Concat => "Concatenate",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(
            self,
            LayerKind::SeparableConv2D { .. } | LayerKind::Conv2D { .. } | LayerKind::Conv1D { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// L2 penalty on this layer's kernel weights.
    #[serde(default)]
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamShape {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl ParamShape {
    fn trainable(name: &'static str, shape: Vec<usize>) -> Self {
        Self {
            name,
            shape,
            trainable: true,
        }
    }
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            l2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |vals: &[usize]| vals.iter().all(|&v| v >= 1);
        let ok = match &self.kind {
            LayerKind::SeparableConv2D {
                kernel,
                in_channels,
                out_channels,
                ..
            }
            | LayerKind::Conv2D {
                kernel,
                in_channels,
                out_channels,
                ..
            } => positive(&[kernel.0, kernel.1, *in_channels, *out_channels]),
            LayerKind::Conv1D {
                kernel,
                in_channels,
                out_channels,
                ..
            } => positive(&[*kernel, *in_channels, *out_channels]),
            LayerKind::BatchNorm { channels } => *channels >= 1,
            LayerKind::Dense { in_dim, units, .. }
            | LayerKind::TimeDistributedDense { in_dim, units, .. } => positive(&[*in_dim, *units]),
            LayerKind::Lstm { input_dim, units } => positive(&[*input_dim, *units]),
            LayerKind::Input { shape } => positive(shape),
            LayerKind::Reshape | LayerKind::TimeDistributedFlatten | LayerKind::Concat => true,
        };
        if ok && self.l2 >= 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("layer {} has a non-positive extent", self.name)))
        }
    }

    /// Parameter tensors in storage order.
    pub fn param_shapes(&self) -> Vec<ParamShape> {
        match &self.kind {
            LayerKind::SeparableConv2D {
                kernel: (kh, kw),
                in_channels: ci,
                out_channels: co,
                ..
            } => vec![
                ParamShape::trainable("depthwise", vec![*kh, *kw, *ci]),
                ParamShape::trainable("pointwise", vec![*ci, *co]),
                ParamShape::trainable("bias", vec![*co]),
            ],
            LayerKind::Conv2D {
                kernel: (kh, kw),
                in_channels: ci,
                out_channels: co,
                ..
            } => vec![
                ParamShape::trainable("kernel", vec![*kh, *kw, *ci, *co]),
                ParamShape::trainable("bias", vec![*co]),
            ],
            LayerKind::Conv1D {
                kernel,
                in_channels,
                out_channels,
                ..
            } => vec![
                ParamShape::trainable("kernel", vec![*kernel, *in_channels, *out_channels]),
                ParamShape::trainable("bias", vec![*out_channels]),
            ],
            LayerKind::BatchNorm { channels } => vec![
                ParamShape::trainable("gamma", vec![*channels]),
                ParamShape::trainable("beta", vec![*channels]),
                ParamShape {
                    name: "moving_mean",
                    shape: vec![*channels],
                    trainable: false,
                },
                ParamShape {
                    name: "moving_variance",
                    shape: vec![*channels],
                    trainable: false,
                },
            ],
            LayerKind::Dense { in_dim, units, .. }
            | LayerKind::TimeDistributedDense { in_dim, units, .. } => vec![
                ParamShape::trainable("kernel", vec![*in_dim, *units]),
                ParamShape::trainable("bias", vec![*units]),
            ],
            LayerKind::Lstm { input_dim, units } => vec![
                ParamShape::trainable("kernel", vec![*input_dim, 4 * units]),
                ParamShape::trainable("recurrent", vec![*units, 4 * units]),
                ParamShape::trainable("bias", vec![4 * units]),
            ],
            LayerKind::Input { .. }
            | LayerKind::Reshape
            | LayerKind::TimeDistributedFlatten
            | LayerKind::Concat => Vec::new(),
        }
    }

    /// Seeded initial values, one tensor per entry of [`Self::param_shapes`].
    ///
    /// Kernels use Glorot-uniform limits `sqrt(6 / (fan_in + fan_out))`,
    /// biases start at zero except the LSTM forget block (1.0), batch norm
    /// starts as the identity with moving statistics (0, 1).
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<Tensor> {
        let glorot = |rng: &mut R, shape: Vec<usize>, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
            Tensor::new(shape, data).expect("shape matches data")
        };
        match &self.kind {
            LayerKind::SeparableConv2D {
                kernel: (kh, kw),
                in_channels: ci,
                out_channels: co,
                ..
            } => vec![
                glorot(rng, vec![*kh, *kw, *ci], kh * kw * ci, kh * kw),
                glorot(rng, vec![*ci, *co], *ci, *co),
                Tensor::zeros(&[*co]),
            ],
            LayerKind::Conv2D {
                kernel: (kh, kw),
                in_channels: ci,
                out_channels: co,
                ..
            } => vec![
                glorot(rng, vec![*kh, *kw, *ci, *co], kh * kw * ci, kh * kw * co),
                Tensor::zeros(&[*co]),
            ],
            LayerKind::Conv1D {
                kernel: k,
                in_channels: ci,
                out_channels: co,
                ..
            } => vec![
                glorot(rng, vec![*k, *ci, *co], k * ci, k * co),
                Tensor::zeros(&[*co]),
            ],
            LayerKind::BatchNorm { channels } => vec![
                Tensor::ones(&[*channels]),
                Tensor::zeros(&[*channels]),
                Tensor::zeros(&[*channels]),
                Tensor::ones(&[*channels]),
            ],
            LayerKind::Dense { in_dim, units, .. }
            | LayerKind::TimeDistributedDense { in_dim, units, .. } => vec![
                glorot(rng, vec![*in_dim, *units], *in_dim, *units),
                Tensor::zeros(&[*units]),
            ],
            LayerKind::Lstm { input_dim, units } => {
                let mut bias = vec![0.0; 4 * units];
                bias[*units..2 * units].fill(1.0);
                vec![
                    glorot(rng, vec![*input_dim, 4 * units], *input_dim, 4 * units),
                    glorot(rng, vec![*units, 4 * units], *units, 4 * units),
                    Tensor::vector(bias),
                ]
            }
            _ => Vec::new(),
        }
    }
}

/// Closed-form parameter count, trainable and non-trainable together.
pub fn param_count(spec: &LayerSpec) -> usize {
    match &spec.kind {
        LayerKind::SeparableConv2D {
            kernel: (kh, kw),
            in_channels: ci,
            out_channels: co,
            ..
        } => kh * kw * ci + ci * co + co,
        LayerKind::Conv2D {
            kernel: (kh, kw),
            in_channels: ci,
            out_channels: co,
            ..
        } => kh * kw * ci * co + co,
        LayerKind::Conv1D {
            kernel,
            in_channels,
            out_channels,
            ..
        } => kernel * in_channels * out_channels + out_channels,
        LayerKind::BatchNorm { channels } => 4 * channels,
        LayerKind::Dense { in_dim, units, .. }
        | LayerKind::TimeDistributedDense { in_dim, units, .. } => in_dim * units + units,
        LayerKind::Lstm { input_dim, units } => 4 * ((input_dim + units) * units + units),
        LayerKind::Input { .. }
        | LayerKind::Reshape
        | LayerKind::TimeDistributedFlatten
        | LayerKind::Concat => 0,
    }
}

pub fn activate(g: &mut Graph, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Tanh => g.tanh(x),
        Activation::Linear => Ok(x),
    }
}

/// Apply a dense map to the last axis of `x`, sharing weights across all
/// leading positions (plain dense on rank 2, time-distributed on rank 3).
pub fn dense(g: &mut Graph, x: Var, kernel: Var, bias: Var, act: Activation) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let d = *shape.last().ok_or_else(|| Error::shape("dense", &shape, &[]))?;
    let kshape = g.value(kernel).shape().to_vec();
    if kshape.len() != 2 || kshape[0] != d {
        return Err(Error::shape("dense", &shape, &kshape));
    }
    let rows = g.value(x).len() / d;
    let flat = g.reshape(x, &[rows, d])?;
    let y = g.matmul(flat, kernel)?;
    let y = g.add(y, bias)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = kshape[1];
    let y = g.reshape(y, &out_shape)?;
    activate(g, y, act)
}

/// Depthwise `kh x kw` filter per input channel, then a pointwise channel
/// mix, one bias per output channel, then the activation.
pub fn separable_conv2d(
    g: &mut Graph,
    x: Var,
    depthwise: Var,
    pointwise: Var,
    bias: Var,
    act: Activation,
) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    let ps = g.value(pointwise).shape().to_vec();
    if xs.len() != 4 || ps.len() != 2 || ps[0] != xs[3] {
        return Err(Error::shape("separable_conv2d", &xs, &ps));
    }
    let d = g.depthwise_conv2d(x, depthwise)?;
    let rows = xs[0] * xs[1] * xs[2];
    let flat = g.reshape(d, &[rows, xs[3]])?;
    let y = g.matmul(flat, pointwise)?;
    let y = g.add(y, bias)?;
    let y = g.reshape(y, &[xs[0], xs[1], xs[2], ps[1]])?;
    activate(g, y, act)
}

pub fn conv2d(g: &mut Graph, x: Var, kernel: Var, bias: Var, act: Activation) -> Result<Var> {
    let y = g.conv2d(x, kernel)?;
    let y = g.add(y, bias)?;
    activate(g, y, act)
}

/// `x: [B, L, Cin]`, `kernel: [k, Cin, Cout]` -> `[B, L, Cout]`.
pub fn conv1d(g: &mut Graph, x: Var, kernel: Var, bias: Var, act: Activation) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    let ks = g.value(kernel).shape().to_vec();
    if xs.len() != 3 || ks.len() != 3 || ks[1] != xs[2] {
        return Err(Error::shape("conv1d", &xs, &ks));
    }
    let x4 = g.reshape(x, &[xs[0], xs[1], 1, xs[2]])?;
    let k4 = g.reshape(kernel, &[ks[0], 1, ks[1], ks[2]])?;
    let y = g.conv2d(x4, k4)?;
    let y = g.add(y, bias)?;
    let y = g.reshape(y, &[xs[0], xs[1], ks[2]])?;
    activate(g, y, act)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Train,
    Infer,
}

/// Batch norm over every axis but the last.
///
/// Train mode normalizes with the batch statistics and returns them so the
/// caller can update moving averages; infer mode uses the stored moving
/// statistics and returns `None`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    moving_mean: &Tensor,
    moving_variance: &Tensor,
    epsilon: f64,
    mode: NormMode,
) -> Result<(Var, Option<BatchStats>)> {
    match mode {
        NormMode::Train => {
            let y = g.batch_norm(x, gamma, beta, epsilon)?;
            let stats = g.batch_stats(y).cloned();
            Ok((y, stats))
        }
        NormMode::Infer => {
            let inv = moving_variance.map(|v| 1.0 / (v + epsilon).sqrt());
            let inv = g.constant(inv);
            let scale = g.mul(gamma, inv)?;
            let mean = g.constant(moving_mean.clone());
            let shifted = g.mul(mean, scale)?;
            let shift = g.sub(beta, shifted)?;
            let y = g.mul(x, scale)?;
            Ok((g.add(y, shift)?, None))
        }
    }
}

/// Exponential moving average update with `momentum` weight on the old value.
pub fn update_moving(moving: &mut Tensor, batch: &[f64], momentum: f64) {
    for (m, b) in moving.data_mut().iter_mut().zip(batch) {
        *m = momentum * *m + (1.0 - momentum) * b;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[input_dim, 4 * units]`
    pub kernel: Var,
    /// `[units, 4 * units]`
    pub recurrent: Var,
    /// `[4 * units]`
    pub bias: Var,
}

/// Hidden and cell state, each `[batch, units]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, batch: usize, units: usize) -> Self {
        Self {
            h: g.constant(Tensor::zeros(&[batch, units])),
            c: g.constant(Tensor::zeros(&[batch, units])),
        }
    }
}

fn lstm_units(g: &Graph, w: &LstmWeights) -> Result<usize> {
    let rs = g.value(w.recurrent).shape();
    if rs.len() != 2 || rs[1] != 4 * rs[0] || g.value(w.bias).shape() != [rs[1]] {
        return Err(Error::shape("lstm", rs, g.value(w.bias).shape()));
    }
    Ok(rs[0])
}

/// Gates from pre-activations `z = W x + b` (recurrent term added here).
fn lstm_cell(g: &mut Graph, z_x: Var, state: LstmState, w: &LstmWeights, units: usize) -> Result<(Var, LstmState)> {
    let zh = g.matmul(state.h, w.recurrent)?;
    let z = g.add(z_x, zh)?;
    let zi = g.slice(z, 1, 0, units)?;
    let zf = g.slice(z, 1, units, units)?;
    let zg = g.slice(z, 1, 2 * units, units)?;
    let zo = g.slice(z, 1, 3 * units, units)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let cand = g.tanh(zg)?;
    let o = g.sigmoid(zo)?;
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, LstmState { h, c }))
}

/// One recurrence step. `x_t: [batch, input_dim]`; returns `(y_t, state)`
/// where `y_t` is the new hidden state.
pub fn lstm_step(g: &mut Graph, x_t: Var, state: LstmState, w: &LstmWeights) -> Result<(Var, LstmState)> {
    let units = lstm_units(g, w)?;
    let xs = g.value(x_t).shape().to_vec();
    let ks = g.value(w.kernel).shape().to_vec();
    if xs.len() != 2 || ks.len() != 2 || ks[0] != xs[1] || ks[1] != 4 * units {
        return Err(Error::shape("lstm_step", &xs, &ks));
    }
    let zx = g.matmul(x_t, w.kernel)?;
    let zx = g.add(zx, w.bias)?;
    lstm_cell(g, zx, state, w, units)
}

/// Run an LSTM from a zero state over `x: [batch, T, input_dim]`, returning
/// every hidden state as `[batch, T, units]`.
pub fn lstm_sequence(g: &mut Graph, x: Var, w: &LstmWeights) -> Result<Var> {
    let units = lstm_units(g, w)?;
    let xs = g.value(x).shape().to_vec();
    let ks = g.value(w.kernel).shape().to_vec();
    if xs.len() != 3 || ks.len() != 2 || ks[0] != xs[2] || ks[1] != 4 * units {
        return Err(Error::shape("lstm_sequence", &xs, &ks));
    }
    let (batch, steps, d) = (xs[0], xs[1], xs[2]);
    let flat = g.reshape(x, &[batch * steps, d])?;
    let proj = g.matmul(flat, w.kernel)?;
    let proj = g.add(proj, w.bias)?;
    let proj = g.reshape(proj, &[batch, steps, 4 * units])?;
    let mut state = LstmState::zeros(g, batch, units);
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let zt = g.slice(proj, 1, t, 1)?;
        let zt = g.reshape(zt, &[batch, 4 * units])?;
        let (h, next) = lstm_cell(g, zt, state, w, units)?;
        state = next;
        outputs.push(g.reshape(h, &[batch, 1, units])?);
    }
    if outputs.len() == 1 {
        Ok(outputs[0])
    } else {
        g.concat(&outputs, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn sep(kh: usize, kw: usize, ci: usize, co: usize) -> LayerSpec {
        LayerSpec::new(
            "s",
            LayerKind::SeparableConv2D {
                kernel: (kh, kw),
                in_channels: ci,
                out_channels: co,
                activation: Activation::Relu,
            },
        )
    }

    fn conv(kh: usize, kw: usize, ci: usize, co: usize) -> LayerSpec {
        LayerSpec::new(
            "c",
            LayerKind::Conv2D {
                kernel: (kh, kw),
                in_channels: ci,
                out_channels: co,
                activation: Activation::Relu,
            },
        )
    }

    #[test]
    fn separable_counts() {
        assert_eq!(param_count(&sep(2, 1, 6, 32)), 236);
        assert_eq!(param_count(&sep(4, 2, 32, 64)), 2368);
        assert_eq!(param_count(&sep(8, 4, 64, 128)), 10368);
    }

    #[test]
    fn conv_counts() {
        assert_eq!(param_count(&conv(2, 1, 6, 32)), 416);
        assert_eq!(param_count(&conv(3, 5, 7, 11)), 3 * 5 * 7 * 11 + 11);
    }

    #[test]
    fn lstm_and_dense_counts() {
        let lstm = |d, u| LayerSpec::new("l", LayerKind::Lstm { input_dim: d, units: u });
        assert_eq!(param_count(&lstm(6, 60)), 16080);
        assert_eq!(param_count(&lstm(60, 6)), 1608);
        let td = |d, u| {
            LayerSpec::new(
                "d",
                LayerKind::TimeDistributedDense {
                    in_dim: d,
                    units: u,
                    activation: Activation::Linear,
                },
            )
        };
        assert_eq!(param_count(&td(512, 6)), 3078);
        assert_eq!(param_count(&td(11, 1)), 12);
        assert_eq!(param_count(&td(7680, 60)), 460860);
        assert_eq!(param_count(&LayerSpec::new("b", LayerKind::BatchNorm { channels: 32 })), 128);
        let c1 = LayerSpec::new(
            "m",
            LayerKind::Conv1D {
                kernel: 60,
                in_channels: 8,
                out_channels: 1,
                activation: Activation::Linear,
            },
        );
        assert_eq!(param_count(&c1), 481);
        for k in [LayerKind::Reshape, LayerKind::TimeDistributedFlatten, LayerKind::Concat] {
            assert_eq!(param_count(&LayerSpec::new("z", k)), 0);
        }
    }

    #[test]
    fn closed_form_matches_shapes() {
        for spec in [sep(8, 4, 64, 128), conv(2, 8, 32, 64)] {
            let n: usize = spec
                .param_shapes()
                .iter()
                .map(|p| p.shape.iter().product::<usize>())
                .sum();
            assert_eq!(n, param_count(&spec));
        }
    }

    #[test]
    fn zero_weight_separable_gives_bias() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = g.constant(rand_tensor(&mut rng, &[1, 5, 3, 2]));
        let dw = g.constant(Tensor::zeros(&[2, 1, 2]));
        let pw = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let y = separable_conv2d(&mut g, x, dw, pw, b, Activation::Relu).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 5, 3, 3]);
        for row in out.data().chunks(3) {
            assert_eq!(row, &[0.5, 0.0, 2.0]);
        }
    }

    #[test]
    fn separable_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 4, 3]));
        let dw = g.constant(Tensor::zeros(&[2, 1, 3]));
        let pw = g.constant(Tensor::zeros(&[2, 4]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(separable_conv2d(&mut g, x, dw, pw, b, Activation::Relu).is_err());
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = rand_tensor(&mut rng, &[2, 3, 4, 3]);
        let x = g.constant(xv.clone());
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            w.set(&[0, 0, c, c], 1.0);
        }
        let w = g.constant(w);
        let b = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let y = conv2d(&mut g, x, w, b, Activation::Linear).unwrap();
        for (i, (o, v)) in g.value(y).data().iter().zip(xv.data()).enumerate() {
            assert!((o - (v + [0.1, 0.2, 0.3][i % 3])).abs() < 1e-15);
        }
    }

    #[test]
    fn conv1d_shapes_and_selection() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.constant(rand_tensor(&mut rng, &[1, 60, 8]));
        let k = g.constant(Tensor::zeros(&[60, 8, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = conv1d(&mut g, x, k, b, Activation::Linear).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 60, 1]);

        let xv = rand_tensor(&mut rng, &[1, 7, 4]);
        let x = g.constant(xv.clone());
        let mut kv = Tensor::zeros(&[1, 4, 1]);
        kv.set(&[0, 2, 0], 1.0);
        let k = g.constant(kv);
        let y = conv1d(&mut g, x, k, b, Activation::Linear).unwrap();
        for t in 0..7 {
            assert_eq!(g.value(y).at(&[0, t, 0]), xv.at(&[0, t, 2]));
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = g.constant(rand_tensor(&mut rng, &[4, 3, 2, 5]).map(|v| 3.0 * v + 1.0));
        let gamma = g.constant(Tensor::ones(&[5]));
        let beta = g.constant(Tensor::zeros(&[5]));
        let (mm, mv) = (Tensor::zeros(&[5]), Tensor::ones(&[5]));
        let (y, stats) = batch_norm(&mut g, x, gamma, beta, &mm, &mv, 0.0, NormMode::Train).unwrap();
        assert!(stats.is_some());
        let out = g.value(y);
        for c in 0..5 {
            let vals: Vec<f64> = out.data().iter().skip(c).step_by(5).copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_modes_agree_on_frozen_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = rand_tensor(&mut rng, &[6, 3]);
        let eps = 1e-3;
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (mm0, mv0) = (Tensor::zeros(&[3]), Tensor::ones(&[3]));
        let (yt, stats) = batch_norm(&mut g, x, gamma, beta, &mm0, &mv0, eps, NormMode::Train).unwrap();
        let stats = stats.unwrap();
        let mm = Tensor::vector(stats.mean.clone());
        let mv = Tensor::vector(stats.variance.clone());
        let (yi, _) = batch_norm(&mut g, x, gamma, beta, &mm, &mv, eps, NormMode::Infer).unwrap();
        for (a, b) in g.value(yt).data().iter().zip(g.value(yi).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn zero_lstm(g: &mut Graph, d: usize, u: usize, forget_bias: f64, input_bias: f64) -> LstmWeights {
        let mut bias = vec![0.0; 4 * u];
        bias[..u].fill(input_bias);
        bias[u..2 * u].fill(forget_bias);
        LstmWeights {
            kernel: g.constant(Tensor::zeros(&[d, 4 * u])),
            recurrent: g.constant(Tensor::zeros(&[u, 4 * u])),
            bias: g.constant(Tensor::vector(bias)),
        }
    }

    #[test]
    fn lstm_step_with_zero_weights() {
        let mut g = Graph::new();
        let w = zero_lstm(&mut g, 3, 2, 0.0, 0.0);
        let x = g.constant(Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap());
        let s = LstmState::zeros(&mut g, 1, 2);
        let (y, next) = lstm_step(&mut g, x, s, &w).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        assert_eq!(g.value(next.c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_perfect_memory() {
        let mut g = Graph::new();
        let w = zero_lstm(&mut g, 2, 3, 50.0, -50.0);
        let c0 = g.constant(Tensor::new(vec![1, 3], vec![0.7, -0.4, 0.1]).unwrap());
        let h0 = g.constant(Tensor::zeros(&[1, 3]));
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let (_, next) = lstm_step(&mut g, x, LstmState { h: h0, c: c0 }, &w).unwrap();
        for (a, b) in g.value(next.c).data().iter().zip([0.7, -0.4, 0.1]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn lstm_sequence_is_causal_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = LayerSpec::new("l", LayerKind::Lstm { input_dim: 3, units: 4 });
        let params = spec.init_params(&mut rng);
        let xv = rand_tensor(&mut rng, &[1, 5, 3]).map(|v| 4.0 * v);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let w = LstmWeights {
                kernel: g.constant(params[0].clone()),
                recurrent: g.constant(params[1].clone()),
                bias: g.constant(params[2].clone()),
            };
            let xv = g.constant(x.clone());
            let y = lstm_sequence(&mut g, xv, &w).unwrap();
            g.value(y).clone()
        };
        let base = run(&xv);
        assert_eq!(base.shape(), &[1, 5, 4]);
        assert!(base.data().iter().all(|v| v.abs() < 1.0));
        let mut bumped = xv.clone();
        bumped.set(&[0, 2, 1], xv.at(&[0, 2, 1]) + 0.5);
        let other = run(&bumped);
        for t in 0..5 {
            let changed = (0..4).any(|u| base.at(&[0, t, u]) != other.at(&[0, t, u]));
            assert_eq!(changed, t >= 2, "step {t}");
        }
    }

    #[test]
    fn time_distributed_dense_shares_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut data = row.clone();
        data.extend(&row);
        let x = g.constant(Tensor::new(vec![1, 2, 4], data).unwrap());
        let k = g.constant(rand_tensor(&mut rng, &[4, 3]));
        let b = g.constant(rand_tensor(&mut rng, &[3]));
        let y = dense(&mut g, x, k, b, Activation::Tanh).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 2, 3]);
        assert_eq!(&v.data()[..3], &v.data()[3..]);
    }

    #[test]
    fn conv1d_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = vec![
            rand_tensor(&mut rng, &[2, 6, 8]),
            rand_tensor(&mut rng, &[4, 8, 2]),
            rand_tensor(&mut rng, &[2]),
            rand_tensor(&mut rng, &[2, 6, 2]),
        ];
        let report = grad_check(
            |g, v| {
                let y = conv1d(g, v[0], v[1], v[2], Activation::Tanh)?;
                let w = g.mul(y, v[3])?;
                g.sum(w)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }
}
