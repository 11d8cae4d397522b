//! Fully convolutional U-Net generator mapping white noise to a field of the
//! same length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::{trim_borders, FieldEnsemble};
use crate::nn::layers::chain_receptive_field;
use crate::nn::{ConvBlock, Ctx, Graph, Layer, LayerSpec, Mode, NodeId, Padding, ParamLayout, ParamStore, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub levels: usize,
    /// Kernel size per level, shared by the encoder and its mirrored decoder level.
    pub kernels: Vec<usize>,
    /// Channel width per level before the width multiplier.
    pub channels: Vec<usize>,
    pub bridge_blocks: usize,
    pub bridge_kernel: usize,
    pub bridge_channels: usize,
    pub width_multiplier: f64,
}

impl GeneratorConfig {
    /// Full-size preset, about 26 million parameters.
    pub fn paper() -> Self {
        Self {
            levels: 6,
            kernels: vec![2, 4, 8, 16, 32, 64],
            channels: vec![16, 32, 64, 128, 256, 256],
            bridge_blocks: 3,
            bridge_kernel: 32,
            bridge_channels: 144,
            width_multiplier: 1.0,
        }
    }

    /// Four-level preset of about 10^5 parameters for quick runs.
    pub fn desk() -> Self {
        Self {
            levels: 4,
            kernels: vec![2, 4, 8, 16],
            channels: vec![16, 32, 64, 128],
            bridge_blocks: 3,
            bridge_kernel: 32,
            bridge_channels: 144,
            width_multiplier: 0.1875,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::invalid(format!(
                "unknown generator preset {name:?} (expected paper or desk)"
            ))),
        }
    }

    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Per-level widths after the multiplier.
    pub fn level_channels(&self) -> Vec<usize> {
        self.channels.iter().map(|&c| self.scaled(c)).collect()
    }

    pub fn bridge_width(&self) -> usize {
        self.scaled(self.bridge_channels)
    }

    /// Length divisor imposed by the pooling stack.
    pub fn length_quantum(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 16 {
            return Err(Error::invalid(format!("levels must lie in [1, 16], got {}", self.levels)));
        }
        if self.kernels.len() != self.levels || self.channels.len() != self.levels {
            return Err(Error::invalid(format!(
                "kernel and channel schedules need {} entries, got {} and {}",
                self.levels,
                self.kernels.len(),
                self.channels.len()
            )));
        }
        if self.kernels.iter().any(|&k| k == 0) || self.bridge_kernel == 0 {
            return Err(Error::invalid("kernel sizes must be positive"));
        }
        if self.kernels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!(
                "kernel schedule must be non-decreasing with depth, got {:?}",
                self.kernels
            )));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::invalid(format!(
                "width multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.bridge_blocks == 0 || self.channels.iter().any(|&c| c == 0) || self.bridge_channels == 0 {
            return Err(Error::invalid("channel widths and bridge depth must be positive"));
        }
        Ok(())
    }

    pub fn check_length(&self, n: usize) -> Result<()> {
        let q = self.length_quantum();
        if n == 0 || n % q != 0 {
            return Err(Error::invalid(format!(
                "signal length {n} is not a positive multiple of 2^{} = {q}",
                self.levels
            )));
        }
        Ok(())
    }
}

fn conv(in_ch: usize, out_ch: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv1d {
        in_ch,
        out_ch,
        kernel,
        stride: 1,
        padding: Padding::Same,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub layout: ParamLayout,
    encoder: Vec<[ConvBlock; 2]>,
    bridge: Vec<ConvBlock>,
    /// Ordered from the deepest level to the shallowest.
    decoder: Vec<ConvBlock>,
    head: Layer,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let ch = config.level_channels();
        let bw = config.bridge_width();
        let mut encoder = vec![];
        let mut cin = 1;
        for (i, (&c, &k)) in ch.iter().zip(&config.kernels).enumerate() {
            let a = ConvBlock::new(&mut layout, &format!("enc{i}.0"), conv(cin, c, k), LayerSpec::Relu);
            let b = ConvBlock::new(&mut layout, &format!("enc{i}.1"), conv(c, c, k), LayerSpec::Relu);
            encoder.push([a, b]);
            cin = c;
        }
        let mut bridge = vec![];
        for j in 0..config.bridge_blocks {
            bridge.push(ConvBlock::new(
                &mut layout,
                &format!("bridge{j}"),
                conv(cin, bw, config.bridge_kernel),
                LayerSpec::Relu,
            ));
            cin = bw;
        }
        let mut decoder = vec![];
        for i in (0..config.levels).rev() {
            let spec = LayerSpec::TransposeConv1d {
                in_ch: cin + ch[i],
                out_ch: ch[i],
                kernel: config.kernels[i],
                padding: Padding::Same,
            };
            decoder.push(ConvBlock::new(&mut layout, &format!("dec{i}"), spec, LayerSpec::Relu));
            cin = ch[i];
        }
        let head = Layer::new(&mut layout, "head", conv(cin, 1, 1));
        Ok(Self {
            config,
            layout,
            encoder,
            bridge,
            decoder,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.count()
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        self.layout.init(seed)
    }

    /// `noise: [B, N]` to `[B, N]`.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, noise: NodeId) -> Result<NodeId> {
        let s = cx.g.shape(noise).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(format!("generator input must be [B, N], got {s:?}")));
        }
        let (b, n) = (s[0], s[1]);
        self.config.check_length(n)?;
        let mut h = cx.g.reshape(noise, vec![b, 1, n]);
        let mut skips = vec![];
        for [a, c] in &self.encoder {
            h = a.forward(cx, h)?;
            h = c.forward(cx, h)?;
            skips.push(h);
            h = cx.g.avg_pool2(h);
        }
        for blk in &self.bridge {
            h = blk.forward(cx, h)?;
        }
        for blk in &self.decoder {
            let up = cx.g.upsample2(h);
            let skip = skips.pop().expect("one skip per level");
            let cat = cx.g.concat_channels(up, skip);
            h = blk.forward(cx, cat)?;
        }
        let out = self.head.forward(cx, h)?;
        Ok(cx.g.reshape(out, vec![b, n]))
    }

    /// Runs the generator on `noise` rows outside of training.
    pub fn apply<T: Real>(&self, store: &ParamStore<T>, noise: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let mut buffers = store.buffers.clone();
        let x = g.input(noise);
        let mut cx = Ctx {
            g: &mut g,
            params: &bound,
            buffers: &mut buffers,
            mode: Mode::Eval,
        };
        let y = self.forward(&mut cx, x)?;
        Ok(g.value(y).clone())
    }

    /// Replaces the running batch-norm statistics with exact averages of
    /// batch statistics over `batches` fresh noise batches of `batch` rows.
    pub fn recalibrate<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        batches: usize,
        batch: usize,
        len: usize,
        seed: u64,
    ) -> Result<()> {
        if batches == 0 || batch < 2 {
            return Err(Error::invalid("recalibration needs batches of at least two rows"));
        }
        self.config.check_length(len)?;
        for k in 0..batches {
            let noise = noise_rows(batch, len, seed, (k * batch) as u64);
            let mut g = Graph::new();
            let bound = store.bind(&mut g, false);
            let x = g.input(Tensor::from_f64(vec![batch, len], &noise));
            let mut cx = Ctx {
                g: &mut g,
                params: &bound,
                buffers: &mut store.buffers,
                mode: Mode::Calibrate(k as u32),
            };
            self.forward(&mut cx, x)?;
        }
        Ok(())
    }

    /// Samples an output can depend on to its left and right, as
    /// `(left, right)`, maximized over positions modulo `2^levels`.
    pub fn receptive_radius(&self) -> (usize, usize) {
        let q = self.config.length_quantum() as i64;
        let base = q * (1 << 20);
        let (mut left, mut right) = (0i64, 0i64);
        for r in 0..q {
            let t = base + r;
            let (lo, hi) = self.output_deps((t, t));
            left = left.max(t - lo);
            right = right.max(hi - t);
        }
        (left as usize, right as usize)
    }

    /// Total width of the input window an output sample depends on.
    pub fn receptive_field(&self) -> usize {
        let (l, r) = self.receptive_radius();
        l + r + 1
    }

    /// Input interval that output interval `iv` reads, ignoring borders.
    fn output_deps(&self, iv: (i64, i64)) -> (i64, i64) {
        let iv = back_through(&[self.head.spec.clone()], iv);
        self.decoder_deps(0, iv)
    }

    fn decoder_deps(&self, level: usize, iv: (i64, i64)) -> (i64, i64) {
        let k = self.config.levels - 1 - level;
        let cat = back_through(&self.decoder[k].specs(), iv);
        let from_skip = self.encoder_deps(level, cat);
        let up = (cat.0.div_euclid(2), cat.1.div_euclid(2));
        let from_up = if level + 1 == self.config.levels {
            self.bridge_deps(up)
        } else {
            self.decoder_deps(level + 1, up)
        };
        (from_skip.0.min(from_up.0), from_skip.1.max(from_up.1))
    }

    fn bridge_deps(&self, iv: (i64, i64)) -> (i64, i64) {
        let specs: Vec<_> = self.bridge.iter().flat_map(|b| b.specs()).collect();
        let pooled = back_through(&specs, iv);
        let last = self.config.levels - 1;
        self.encoder_deps(last, (2 * pooled.0, 2 * pooled.1 + 1))
    }

    /// Maps an interval of the skip output at `level` back to the input.
    fn encoder_deps(&self, level: usize, iv: (i64, i64)) -> (i64, i64) {
        let [a, b] = &self.encoder[level];
        let specs: Vec<_> = a.specs().into_iter().chain(b.specs()).collect();
        let x = back_through(&specs, iv);
        if level == 0 {
            x
        } else {
            self.encoder_deps(level - 1, (2 * x.0, 2 * x.1 + 1))
        }
    }

    /// Span of the bridge alone, in bottom-level samples.
    pub fn bridge_receptive_field(&self) -> usize {
        let specs: Vec<_> = self.bridge.iter().flat_map(|b| b.specs()).collect();
        chain_receptive_field(&specs).expect("bridge is stride 1")
    }
}

/// Input interval read by an output interval through stride-1 layers applied in order.
fn back_through(specs: &[LayerSpec], mut iv: (i64, i64)) -> (i64, i64) {
    for s in specs.iter().rev() {
        let (right_reach, left_reach) = s.reach().expect("stride-1 layer");
        // output t reads inputs t - left_reach ..= t + right_reach
        iv = (iv.0 - left_reach as i64, iv.1 + right_reach as i64);
    }
    iv
}

/// Rows of unit Gaussian noise, one ChaCha stream per row.
pub fn noise_rows(rows: usize, len: usize, seed: u64, first_row: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(first_row + r);
        out.extend((0..len).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    out
}

/// Rows processed together by [`generate`].
pub const GENERATE_BATCH: usize = 4;

/// Draws `realizations` noises of length `samples + n_b`, runs the generator
/// with running batch-norm statistics and trims `n_b / 2` samples at each end.
pub fn generate<T: Real>(
    model: &Generator,
    store: &ParamStore<T>,
    realizations: usize,
    samples: usize,
    n_b: usize,
    seed: u64,
) -> Result<FieldEnsemble> {
    if realizations == 0 || samples == 0 {
        return Err(Error::invalid("need at least one realization of positive length"));
    }
    if n_b % 2 != 0 {
        return Err(Error::invalid(format!("border trim {n_b} must be even")));
    }
    let len = samples + n_b;
    model.config.check_length(len)?;
    let mut rows = Vec::with_capacity(realizations);
    let mut start = 0;
    while start < realizations {
        let b = GENERATE_BATCH.min(realizations - start);
        let noise = noise_rows(b, len, seed, start as u64);
        let out = model.apply(store, Tensor::from_f64(vec![b, len], &noise))?;
        for r in 0..b {
            let row: Vec<f64> = out.data[r * len..(r + 1) * len].iter().map(|v| v.as_f64()).collect();
            rows.push(trim_borders(&row, n_b)?);
        }
        start += b;
    }
    FieldEnsemble::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> GeneratorConfig {
        GeneratorConfig {
            levels: 1,
            kernels: vec![2],
            channels: vec![2],
            bridge_blocks: 1,
            bridge_kernel: 2,
            bridge_channels: 2,
            width_multiplier: 1.0,
        }
    }

    #[test]
    fn toy_parameter_ledger() {
        // enc conv 1->2 k2: 4+2, bn 4; enc conv 2->2 k2: 8+2, bn 4
        // bridge conv 2->2 k2: 8+2, bn 4
        // dec transpose (2+2)->2 k2: 16+2, bn 4
        // head 2->1 k1: 2+1
        let g = Generator::new(toy()).unwrap();
        assert_eq!(g.param_count(), 6 + 4 + 10 + 4 + 10 + 4 + 18 + 4 + 3);
    }

    #[test]
    fn paper_preset_budget() {
        let g = Generator::new(GeneratorConfig::paper()).unwrap();
        let n = g.param_count() as f64;
        assert!((n / 26e6 - 1.0).abs() < 0.05, "{n}");
    }

    fn batch_mode(g: &Generator, store: &ParamStore<f64>, noise: &[f64], rows: usize, len: usize) -> Vec<f64> {
        let mut gr = Graph::new();
        let bound = store.bind(&mut gr, false);
        let mut buffers = store.buffers.clone();
        let x = gr.input(Tensor::from_f64(vec![rows, len], noise));
        let mut cx = Ctx {
            g: &mut gr,
            params: &bound,
            buffers: &mut buffers,
            mode: Mode::TrainFrozenStats,
        };
        let y = g.forward(&mut cx, x).unwrap();
        gr.value(y).to_vec_f64()
    }

    #[test]
    fn recalibration_matches_batch_statistics() {
        let g = Generator::new(GeneratorConfig {
            width_multiplier: 0.25,
            ..GeneratorConfig::desk()
        })
        .unwrap();
        let mut store = g.init_params::<f64>(3);
        let (rows, len) = (4, 256);
        let noise = noise_rows(rows, len, 11, 0);
        let before = g.apply(&store, Tensor::from_f64(vec![rows, len], &noise)).unwrap().to_vec_f64();
        let want = batch_mode(&g, &store, &noise, rows, len);
        g.recalibrate(&mut store, 1, rows, len, 11).unwrap();
        let got = g.apply(&store, Tensor::from_f64(vec![rows, len], &noise)).unwrap().to_vec_f64();
        let err = |a: &[f64]| a.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
        // running variances are unbiased, batch normalization is not
        assert!(err(&got) < 0.1 * scale, "{} vs {scale}", err(&got));
        assert!(err(&before) > 10.0 * err(&got));

        // more batches average rather than overwrite
        let mut many = store.clone();
        g.recalibrate(&mut many, 3, rows, len, 11).unwrap();
        assert_ne!(many.buffers, store.buffers);
        assert!(g.recalibrate(&mut many, 1, 1, len, 11).is_err());
    }

    #[test]
    fn desk_preset_is_about_1e5() {
        let g = Generator::new(GeneratorConfig::desk()).unwrap();
        let n = g.param_count();
        assert!((50_000..200_000).contains(&n), "{n}");
        assert_eq!(g.config.level_channels(), vec![3, 6, 12, 24]);
    }

    #[test]
    fn rejects_bad_configs_and_lengths() {
        let mut c = GeneratorConfig::desk();
        c.kernels = vec![4, 2, 8, 16];
        assert!(Generator::new(c).is_err());
        let mut c = GeneratorConfig::desk();
        c.channels.pop();
        assert!(Generator::new(c).is_err());
        assert!(GeneratorConfig::desk().check_length(100).is_err());
        assert!(GeneratorConfig::desk().check_length(96).is_ok());
    }

    #[test]
    fn output_length_matches_input() {
        let g = Generator::new(GeneratorConfig::desk()).unwrap();
        let p = g.init_params::<f32>(1);
        let noise = Tensor::from_f64(vec![2, 256], &noise_rows(2, 256, 3, 0));
        let y = g.apply(&p, noise).unwrap();
        assert_eq!(y.shape, vec![2, 256]);
        assert!(y.all_finite());
    }

    #[test]
    fn generate_trims_and_is_deterministic() {
        let g = Generator::new(GeneratorConfig::desk()).unwrap();
        let p = g.init_params::<f32>(1);
        let a = generate(&g, &p, 5, 128, 64, 9).unwrap();
        assert_eq!((a.realizations(), a.samples()), (5, 128));
        let b = generate(&g, &p, 5, 128, 64, 9).unwrap();
        assert_eq!(a.data(), b.data());
        let untrimmed = generate(&g, &p, 1, 192, 0, 9).unwrap();
        assert_eq!(&untrimmed.row(0)[32..160], a.row(0));
        assert!(generate(&g, &p, 1, 100, 0, 9).is_err());
        assert!(generate(&g, &p, 1, 128, 3, 9).is_err());
    }

    #[test]
    fn receptive_field_of_toy() {
        // encoder convs read [t, t+2]; through pool and the bridge conv the
        // up path reads [t-2, t+5] for even t and [t-1, t+4] for odd t;
        // the decoder transpose conv reads [t-1, t]
        let g = Generator::new(toy()).unwrap();
        assert_eq!(g.receptive_radius(), (2, 5));
        assert_eq!(g.receptive_field(), 8);
    }

    #[test]
    fn paper_preset_radius_fits_border_trim() {
        let g = Generator::new(GeneratorConfig::paper()).unwrap();
        let (l, r) = g.receptive_radius();
        assert!(l.max(r) <= 8192, "{l} {r}");
    }
}
