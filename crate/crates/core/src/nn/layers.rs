//! Layer inventory shared by the generator and the discriminators.

use super::graph::{BnMode, Graph, NodeId};
use super::params::{Init, ParamLayout, INIT_STD};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length (stride 1). Even kernels put the extra
    /// padded sample on the right.
    Same,
    /// No padding: a convolution shrinks the length by `kernel - 1`.
    None,
}

impl Padding {
    /// `(left, right)` zero padding of a convolution with this kernel.
    pub fn conv_pads(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Same => {
                let l = (kernel - 1) / 2;
                (l, kernel - 1 - l)
            }
            Padding::None => (0, 0),
        }
    }

    /// Padding of the equivalent stride-1 convolution (flipped kernel) of a
    /// transpose convolution. `Same` crops `(kernel-1)/2` samples on the left
    /// of the full output and the rest on the right.
    pub fn transpose_pads(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Same => {
                let crop_l = (kernel - 1) / 2;
                (kernel - 1 - crop_l, crop_l)
            }
            Padding::None => (kernel - 1, kernel - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    /// Stride is always 1.
    TransposeConv1d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: Padding,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    BatchNorm {
        channels: usize,
    },
    AvgPool2,
    Upsample2,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Sigmoid,
    Concat,
    Flatten,
}

impl LayerSpec {
    /// Trainable scalars, including biases and batch-norm scale/shift.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv1d {
                in_ch,
                out_ch,
                kernel,
                ..
            }
            | LayerSpec::TransposeConv1d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => in_ch * out_ch * kernel + out_ch,
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
            LayerSpec::BatchNorm { channels } => 2 * channels,
            _ => 0,
        }
    }

    /// Samples an input perturbation can move left and right in the output,
    /// for a stride-1 layer. `None` for layers that change resolution.
    pub fn reach(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv1d {
                kernel,
                stride: 1,
                padding,
                ..
            } => {
                let (pl, pr) = padding.conv_pads(kernel);
                // output t reads inputs t-pl ..= t+pr
                Some((pr, pl))
            }
            LayerSpec::TransposeConv1d {
                kernel, padding, ..
            } => {
                let (pl, pr) = padding.transpose_pads(kernel);
                Some((pr, pl))
            }
            LayerSpec::Conv1d { .. }
            | LayerSpec::AvgPool2
            | LayerSpec::Upsample2
            | LayerSpec::Dense { .. }
            | LayerSpec::Flatten => None,
            _ => Some((0, 0)),
        }
    }
}

/// Receptive-field span (in samples) of a chain of stride-1 layers.
pub fn chain_receptive_field(layers: &[LayerSpec]) -> Result<usize> {
    let mut left = 0;
    let mut right = 0;
    for l in layers {
        let (a, b) = l
            .reach()
            .ok_or_else(|| Error::invalid(format!("{l:?} is not a stride-1 layer")))?;
        left += a;
        right += b;
    }
    Ok(left + right + 1)
}

/// How a forward pass treats batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages updated.
    Train,
    /// Batch statistics; running averages left untouched.
    TrainFrozenStats,
    /// Running averages.
    Eval,
    /// Batch statistics folded into an exact mean: batch `k` (from 0)
    /// gets weight `1 / (k + 1)`.
    Calibrate(u32),
}

/// Everything a layer needs during a forward pass.
pub struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub params: &'a [NodeId],
    pub buffers: &'a mut [Tensor<T>],
    pub mode: Mode,
}

/// A layer with its slots in the owning model's [`ParamLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub name: String,
    params: Vec<usize>,
    buffers: Vec<usize>,
}

impl Layer {
    /// Registers the layer's arrays in `layout`.
    pub fn new(layout: &mut ParamLayout, name: impl Into<String>, spec: LayerSpec) -> Self {
        let name = name.into();
        let mut params = vec![];
        let mut buffers = vec![];
        match spec {
            LayerSpec::Conv1d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                params.push(layout.add_param(
                    format!("{name}.weight"),
                    vec![out_ch, in_ch, kernel],
                    Init::Normal(INIT_STD),
                ));
                params.push(layout.add_param(format!("{name}.bias"), vec![out_ch], Init::Zeros));
            }
            LayerSpec::TransposeConv1d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                params.push(layout.add_param(
                    format!("{name}.weight"),
                    vec![in_ch, out_ch, kernel],
                    Init::Normal(INIT_STD),
                ));
                params.push(layout.add_param(format!("{name}.bias"), vec![out_ch], Init::Zeros));
            }
            LayerSpec::Dense { inputs, outputs } => {
                params.push(layout.add_param(
                    format!("{name}.weight"),
                    vec![outputs, inputs],
                    Init::Normal(INIT_STD),
                ));
                params.push(layout.add_param(format!("{name}.bias"), vec![outputs], Init::Zeros));
            }
            LayerSpec::BatchNorm { channels } => {
                params.push(layout.add_param(format!("{name}.gamma"), vec![channels], Init::Ones));
                params.push(layout.add_param(format!("{name}.beta"), vec![channels], Init::Zeros));
                buffers.push(layout.add_buffer(
                    format!("{name}.running_mean"),
                    vec![channels],
                    Init::Zeros,
                ));
                buffers.push(layout.add_buffer(
                    format!("{name}.running_var"),
                    vec![channels],
                    Init::Ones,
                ));
            }
            _ => {}
        }
        Self {
            spec,
            name,
            params,
            buffers,
        }
    }

    fn check(&self, ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("layer {}: {}", self.name, msg())))
        }
    }

    /// Applies the layer. `Concat` is not a unary layer; use [`Graph::concat_channels`].
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let shape = cx.g.shape(x).to_vec();
        Ok(match self.spec {
            LayerSpec::Conv1d {
                in_ch,
                kernel,
                stride,
                padding,
                ..
            } => {
                self.check(shape.len() == 3 && shape[1] == in_ch, || {
                    format!("expected [B, {in_ch}, L], got {shape:?}")
                })?;
                let (pl, pr) = padding.conv_pads(kernel);
                self.check(shape[2] + pl + pr >= kernel, || {
                    format!("input length {} shorter than kernel {kernel}", shape[2])
                })?;
                let (w, b) = (cx.params[self.params[0]], cx.params[self.params[1]]);
                cx.g.conv1d(x, w, Some(b), stride, pl, pr)
            }
            LayerSpec::TransposeConv1d {
                in_ch,
                kernel,
                padding,
                ..
            } => {
                self.check(shape.len() == 3 && shape[1] == in_ch, || {
                    format!("expected [B, {in_ch}, L], got {shape:?}")
                })?;
                let (pl, pr) = padding.transpose_pads(kernel);
                let (w, b) = (cx.params[self.params[0]], cx.params[self.params[1]]);
                let wf = cx.g.flip_transpose(w);
                cx.g.conv1d(x, wf, Some(b), 1, pl, pr)
            }
            LayerSpec::Dense { inputs, .. } => {
                self.check(shape.len() == 2 && shape[1] == inputs, || {
                    format!("expected [B, {inputs}], got {shape:?}")
                })?;
                let (w, b) = (cx.params[self.params[0]], cx.params[self.params[1]]);
                cx.g.dense(x, w, Some(b))
            }
            LayerSpec::BatchNorm { channels } => {
                self.check(shape.len() >= 2 && shape[1] == channels, || {
                    format!("expected {channels} channels, got {shape:?}")
                })?;
                let (gamma, beta) = (cx.params[self.params[0]], cx.params[self.params[1]]);
                let (rm, rv) = (self.buffers[0], self.buffers[1]);
                let mode = if cx.mode == Mode::Eval {
                    BnMode::Running
                } else {
                    BnMode::Batch
                };
                let (y, stats) = {
                    let running = (&cx.buffers[rm].data[..], &cx.buffers[rv].data[..]);
                    cx.g.batch_norm(x, gamma, beta, mode, running, BN_EPS)
                };
                let mom = match cx.mode {
                    Mode::Train => Some(BN_MOMENTUM),
                    Mode::Calibrate(k) => Some(1.0 / (k as f64 + 1.0)),
                    _ => None,
                };
                if let (Some(mom), Some((mean, var))) = (mom, stats) {
                    let mom = T::of(mom);
                    let keep = T::one() - mom;
                    for (r, m) in cx.buffers[rm].data.iter_mut().zip(mean) {
                        *r = keep * *r + mom * m;
                    }
                    for (r, v) in cx.buffers[rv].data.iter_mut().zip(var) {
                        *r = keep * *r + mom * v;
                    }
                }
                y
            }
            LayerSpec::AvgPool2 => {
                self.check(shape.len() == 3 && shape[2] % 2 == 0, || {
                    format!("needs an even length, got {shape:?}")
                })?;
                cx.g.avg_pool2(x)
            }
            LayerSpec::Upsample2 => {
                self.check(shape.len() == 3, || format!("expected [B, C, L], got {shape:?}"))?;
                cx.g.upsample2(x)
            }
            LayerSpec::Relu => cx.g.relu(x),
            LayerSpec::LeakyRelu { slope } => cx.g.leaky_relu(x, slope),
            LayerSpec::Sigmoid => cx.g.sigmoid(x),
            LayerSpec::Flatten => {
                let rest = shape[1..].iter().product();
                cx.g.reshape(x, vec![shape[0], rest])
            }
            LayerSpec::Concat => {
                return Err(Error::invalid(format!(
                    "layer {}: concat takes two inputs",
                    self.name
                )))
            }
        })
    }
}

/// Conv (or transpose conv) followed by batch norm and an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Layer,
    pub norm: Layer,
    pub act: LayerSpec,
}

impl ConvBlock {
    pub fn new(layout: &mut ParamLayout, name: &str, conv: LayerSpec, act: LayerSpec) -> Self {
        let channels = match conv {
            LayerSpec::Conv1d { out_ch, .. } | LayerSpec::TransposeConv1d { out_ch, .. } => out_ch,
            _ => panic!("conv block needs a convolution"),
        };
        Self {
            conv: Layer::new(layout, format!("{name}.conv"), conv),
            norm: Layer::new(layout, format!("{name}.bn"), LayerSpec::BatchNorm { channels }),
            act,
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.conv.forward(cx, x)?;
        let h = self.norm.forward(cx, h)?;
        Ok(match self.act {
            LayerSpec::Relu => cx.g.relu(h),
            LayerSpec::LeakyRelu { slope } => cx.g.leaky_relu(h, slope),
            _ => h,
        })
    }

    pub fn specs(&self) -> [LayerSpec; 3] {
        [self.conv.spec.clone(), self.norm.spec.clone(), self.act.clone()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(LayerSpec::Dense { inputs: 10, outputs: 5 }.param_count(), 55);
        let conv = LayerSpec::Conv1d {
            in_ch: 2,
            out_ch: 4,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        };
        assert_eq!(conv.param_count(), 28);
        assert_eq!(LayerSpec::BatchNorm { channels: 7 }.param_count(), 14);
        assert_eq!(LayerSpec::Relu.param_count(), 0);
    }

    #[test]
    fn receptive_field_of_chains() {
        let conv = |k| LayerSpec::Conv1d {
            in_ch: 1,
            out_ch: 1,
            kernel: k,
            stride: 1,
            padding: Padding::Same,
        };
        assert_eq!(chain_receptive_field(&[conv(5)]).unwrap(), 5);
        assert_eq!(chain_receptive_field(&[conv(4)]).unwrap(), 4);
        assert_eq!(chain_receptive_field(&[conv(3), conv(3)]).unwrap(), 5);
        assert!(chain_receptive_field(&[LayerSpec::AvgPool2]).is_err());
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let mut layout = ParamLayout::default();
        let l = Layer::new(&mut layout, "enc1", LayerSpec::Dense { inputs: 3, outputs: 2 });
        let store = layout.init::<f64>(0);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, true);
        let mut bufs = store.buffers.clone();
        let x = g.input(Tensor::zeros(vec![1, 4]));
        let mut cx = Ctx {
            g: &mut g,
            params: &bound,
            buffers: &mut bufs,
            mode: Mode::Train,
        };
        let err = l.forward(&mut cx, x).unwrap_err().to_string();
        assert!(err.contains("enc1"), "{err}");
    }

    #[test]
    fn same_padding_preserves_length_and_none_shrinks() {
        let mut layout = ParamLayout::default();
        let same = Layer::new(
            &mut layout,
            "a",
            LayerSpec::Conv1d {
                in_ch: 1,
                out_ch: 2,
                kernel: 6,
                stride: 1,
                padding: Padding::Same,
            },
        );
        let none = Layer::new(
            &mut layout,
            "b",
            LayerSpec::Conv1d {
                in_ch: 2,
                out_ch: 1,
                kernel: 6,
                stride: 1,
                padding: Padding::None,
            },
        );
        let tr = Layer::new(
            &mut layout,
            "c",
            LayerSpec::TransposeConv1d {
                in_ch: 1,
                out_ch: 3,
                kernel: 4,
                padding: Padding::Same,
            },
        );
        let store = layout.init::<f64>(0);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, true);
        let mut bufs = store.buffers.clone();
        let x = g.input(Tensor::zeros(vec![2, 1, 20]));
        let mut cx = Ctx {
            g: &mut g,
            params: &bound,
            buffers: &mut bufs,
            mode: Mode::Train,
        };
        let y = same.forward(&mut cx, x).unwrap();
        assert_eq!(cx.g.shape(y), &[2, 2, 20]);
        let z = none.forward(&mut cx, y).unwrap();
        assert_eq!(cx.g.shape(z), &[2, 1, 15]);
        let t = tr.forward(&mut cx, z).unwrap();
        assert_eq!(cx.g.shape(t), &[2, 3, 15]);
    }
}
