//! Critics: dense networks on statistic curves, the four-scale segment
//! discriminator, and the full-signal baseline used by the plain GAN and WGAN.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Ctx, Graph, Layer, LayerSpec, NodeId, Padding, ParamLayout, Real};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Segment-count weights of the scale-invariance loss, from `N/2` to `N/16`.
pub const SI_SCALE_WEIGHTS: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

/// Segments per signal at each scale.
pub const SI_SEGMENTS: [usize; 4] = [2, 4, 8, 16];

/// How the stat-discriminator parameter budget is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatBudget {
    /// About 25k parameters for the three networks together.
    Combined,
    /// About 25k parameters for each network.
    PerNetwork,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatDiscriminatorConfig {
    pub input_len: usize,
    pub widths: Vec<usize>,
    pub slope: f64,
}

impl StatDiscriminatorConfig {
    pub fn new(input_len: usize, budget: StatBudget) -> Self {
        let widths = match budget {
            StatBudget::Combined => vec![64, 56, 32, 24, 16],
            StatBudget::PerNetwork => vec![128, 96, 64, 32, 16],
        };
        Self {
            input_len,
            widths,
            slope: LEAKY_SLOPE,
        }
    }
}

/// Dense network scoring one statistic curve.
#[derive(Debug, Clone, PartialEq)]
pub struct StatDiscriminator {
    pub config: StatDiscriminatorConfig,
    pub layout: ParamLayout,
    hidden: Vec<Layer>,
    out: Layer,
}

impl StatDiscriminator {
    pub fn new(config: StatDiscriminatorConfig) -> Result<Self> {
        if config.input_len == 0 || config.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("stat discriminator widths must be positive"));
        }
        let mut layout = ParamLayout::default();
        let mut hidden = vec![];
        let mut prev = config.input_len;
        for (i, &w) in config.widths.iter().enumerate() {
            hidden.push(Layer::new(
                &mut layout,
                format!("dense{i}"),
                LayerSpec::Dense {
                    inputs: prev,
                    outputs: w,
                },
            ));
            prev = w;
        }
        let out = Layer::new(
            &mut layout,
            "out",
            LayerSpec::Dense {
                inputs: prev,
                outputs: 1,
            },
        );
        Ok(Self {
            config,
            layout,
            hidden,
            out,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.count()
    }

    /// `[B, input_len]` curves to `[B, 1]` probabilities.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for l in &self.hidden {
            h = l.forward(cx, h)?;
            h = cx.g.leaky_relu(h, self.config.slope);
        }
        let h = self.out.forward(cx, h)?;
        Ok(cx.g.sigmoid(h))
    }
}

/// Convolutional network scoring segments of one length.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleNet {
    pub segment: usize,
    pub sigmoid: bool,
    convs: Vec<ConvBlock>,
    dense: Vec<Layer>,
    out: Layer,
}

pub const SCALE_CONV_CHANNELS: [usize; 3] = [8, 16, 8];
pub const SCALE_CONV_KERNEL: usize = 8;
pub const SCALE_CONV_STRIDE: usize = 2;
pub const SCALE_DENSE_WIDTHS: [usize; 2] = [6, 32];

impl ScaleNet {
    /// Shortest segment the conv stack accepts.
    pub fn min_segment() -> usize {
        let mut len = 1;
        for _ in SCALE_CONV_CHANNELS {
            len = (len - 1) * SCALE_CONV_STRIDE + SCALE_CONV_KERNEL;
        }
        len
    }

    fn conv_output_len(segment: usize) -> usize {
        let mut len = segment;
        for _ in SCALE_CONV_CHANNELS {
            len = (len - SCALE_CONV_KERNEL) / SCALE_CONV_STRIDE + 1;
        }
        len
    }

    pub fn new(layout: &mut ParamLayout, name: &str, segment: usize, sigmoid: bool) -> Result<Self> {
        if segment < Self::min_segment() {
            return Err(Error::invalid(format!(
                "segment length {segment} is below the minimum {} of the scale network {name}",
                Self::min_segment()
            )));
        }
        let mut convs = vec![];
        let mut cin = 1;
        for (i, &c) in SCALE_CONV_CHANNELS.iter().enumerate() {
            convs.push(ConvBlock::new(
                layout,
                &format!("{name}.conv{i}"),
                LayerSpec::Conv1d {
                    in_ch: cin,
                    out_ch: c,
                    kernel: SCALE_CONV_KERNEL,
                    stride: SCALE_CONV_STRIDE,
                    padding: Padding::None,
                },
                LayerSpec::LeakyRelu { slope: LEAKY_SLOPE },
            ));
            cin = c;
        }
        let mut prev = cin * Self::conv_output_len(segment);
        let mut dense = vec![];
        for (i, &w) in SCALE_DENSE_WIDTHS.iter().enumerate() {
            dense.push(Layer::new(
                layout,
                format!("{name}.dense{i}"),
                LayerSpec::Dense {
                    inputs: prev,
                    outputs: w,
                },
            ));
            prev = w;
        }
        let out = Layer::new(
            layout,
            format!("{name}.out"),
            LayerSpec::Dense {
                inputs: prev,
                outputs: 1,
            },
        );
        Ok(Self {
            segment,
            sigmoid,
            convs,
            dense,
            out,
        })
    }

    /// `[M, segment]` to `[M, 1]` scores.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let s = cx.g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.segment {
            return Err(Error::invalid(format!(
                "scale network expects [M, {}], got {s:?}",
                self.segment
            )));
        }
        let mut h = cx.g.reshape(x, vec![s[0], 1, self.segment]);
        for c in &self.convs {
            h = c.forward(cx, h)?;
        }
        let hs = cx.g.shape(h).to_vec();
        h = cx.g.reshape(h, vec![hs[0], hs[1] * hs[2]]);
        for d in &self.dense {
            h = d.forward(cx, h)?;
            h = cx.g.leaky_relu(h, LEAKY_SLOPE);
        }
        let h = self.out.forward(cx, h)?;
        Ok(if self.sigmoid { cx.g.sigmoid(h) } else { h })
    }
}

/// Four scale networks scoring the disjoint halves, quarters, eighths and
/// sixteenths of a signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SiDiscriminator {
    pub samples: usize,
    pub layout: ParamLayout,
    nets: Vec<ScaleNet>,
}

/// Per-scale segment scores: `scores[j]` is `[B * SI_SEGMENTS[j], 1]`, with the
/// segment `i` of signal `b` at row `b * SI_SEGMENTS[j] + i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiScores {
    pub scores: [NodeId; 4],
}

impl SiDiscriminator {
    pub fn new(samples: usize) -> Result<Self> {
        if samples == 0 || samples % 16 != 0 {
            return Err(Error::invalid(format!(
                "signal length {samples} is not a positive multiple of 16"
            )));
        }
        let mut layout = ParamLayout::default();
        let mut nets = vec![];
        for &k in &SI_SEGMENTS {
            nets.push(ScaleNet::new(&mut layout, &format!("si{k}"), samples / k, true)?);
        }
        Ok(Self {
            samples,
            layout,
            nets,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.count()
    }

    pub fn segment_lengths(&self) -> [usize; 4] {
        SI_SEGMENTS.map(|k| self.samples / k)
    }

    /// `[B, N]` signals to per-scale segment scores.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<SiScores> {
        let s = cx.g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.samples {
            return Err(Error::invalid(format!(
                "scale-invariance discriminator expects [B, {}], got {s:?}",
                self.samples
            )));
        }
        let mut scores = [x; 4];
        for (j, net) in self.nets.iter().enumerate() {
            let segs = cx.g.reshape(x, vec![s[0] * SI_SEGMENTS[j], net.segment]);
            scores[j] = net.forward(cx, segs)?;
        }
        Ok(SiScores { scores })
    }
}

/// Per-segment cross-entropies `l^(i)_K` for every scale, each `[SI_SEGMENTS[j]]`.
/// `labels` gives one label per signal row of the scored batch.
pub fn si_sub_losses<T: Real>(g: &mut Graph<T>, scores: &SiScores, labels: &[f64]) -> [NodeId; 4] {
    let mut out = scores.scores;
    for (j, &k) in SI_SEGMENTS.iter().enumerate() {
        let per_row: Vec<T> = labels
            .iter()
            .flat_map(|&y| std::iter::repeat_n(T::of(y), k))
            .collect();
        out[j] = g.bce_groups(scores.scores[j], per_row, k);
    }
    out
}

/// Weighted sum of per-segment losses: each segment of length `N/2^(j+1)`
/// carries weight `SI_SCALE_WEIGHTS[j]`.
pub fn si_loss_node<T: Real>(g: &mut Graph<T>, sub: &[NodeId; 4]) -> NodeId {
    let parts: Vec<(NodeId, f64)> = sub
        .iter()
        .zip(SI_SEGMENTS.iter().zip(SI_SCALE_WEIGHTS))
        .map(|(&id, (&k, w))| (g.weighted_sum(id, vec![T::of(w); k]), 1.0))
        .collect();
    g.linear(&parts)
}

/// Scalar version of [`si_loss_node`]: `sub[j]` holds the `SI_SEGMENTS[j]` losses of scale `j`.
pub fn si_loss(sub: &[Vec<f64>; 4]) -> Result<f64> {
    let mut total = 0.0;
    for (j, losses) in sub.iter().enumerate() {
        if losses.len() != SI_SEGMENTS[j] {
            return Err(Error::invalid(format!(
                "scale {j} needs {} sub-losses, got {}",
                SI_SEGMENTS[j],
                losses.len()
            )));
        }
        total += SI_SCALE_WEIGHTS[j] * losses.iter().sum::<f64>();
    }
    Ok(total)
}

/// Single scale network on the whole signal. The WGAN critic omits the sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineDiscriminator {
    pub layout: ParamLayout,
    pub net: ScaleNet,
}

impl BaselineDiscriminator {
    pub fn new(samples: usize, critic: bool) -> Result<Self> {
        let mut layout = ParamLayout::default();
        let net = ScaleNet::new(&mut layout, "full", samples, !critic)?;
        Ok(Self { layout, net })
    }

    pub fn param_count(&self) -> usize {
        self.layout.count()
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        self.net.forward(cx, x)
    }
}

pub const SI_SCORES_HEADER: &str = "segment_length,segment,mean_score";

/// Mean score per segment position, for diagnostics.
pub fn format_si_scores<T: Real>(g: &Graph<T>, d: &SiDiscriminator, scores: &SiScores) -> String {
    let mut s = String::from(SI_SCORES_HEADER);
    s.push('\n');
    for (j, &k) in SI_SEGMENTS.iter().enumerate() {
        let v = &g.value(scores.scores[j]).data;
        let rows = v.len() / k;
        for i in 0..k {
            let m = (0..rows).map(|b| v[b * k + i].as_f64()).sum::<f64>() / rows as f64;
            let _ = writeln!(s, "{},{},{:e}", d.samples / k, i, m);
        }
    }
    s
}
