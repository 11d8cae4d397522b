//! Adversarial training: the four-criteria objective, discriminator update
//! schedule, plain GAN and WGAN baselines, loss history and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::discriminators::{
    si_loss_node, si_sub_losses, BaselineDiscriminator, SiDiscriminator, StatBudget, StatDiscriminator,
    StatDiscriminatorConfig, SI_SEGMENTS,
};
use crate::error::{Error, Result};
use crate::field::{FieldEnsemble, ScaleGrid};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::{Adam, AdamConfig, Checkpoint, Ctx, Graph, Mode, NodeId, ParamStore, Tensor};
use crate::stats::realization_curves;

/// Weights of the scale-invariance, `S_2`, skewness and flatness criteria.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.2,
            gamma: 0.15,
            lambda: 0.15,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.lambda]
    }
}

/// Generator-side losses of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub l_si: f64,
    pub l_s2: f64,
    pub l_skew: f64,
    pub l_flat: f64,
    pub total: f64,
    /// Per-segment losses, `si_sub[j]` for segments of length `N / SI_SEGMENTS[j]`.
    pub si_sub: [Vec<f64>; 4],
}

/// `alpha l_SI + beta l_S2 + gamma l_S + lambda l_F`.
pub fn generator_loss(b: &LossBundle, w: &LossWeights) -> f64 {
    w.alpha * b.l_si + w.beta * b.l_s2 + w.gamma * b.l_skew + w.lambda * b.l_flat
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Multicriteria,
    Gan,
    Wgan,
}

/// When discriminators are updated relative to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DSchedule {
    /// `d_steps` discriminator updates before every generator update.
    PerStep,
    /// `d_steps` passes of discriminator updates at the start of every epoch.
    PerEpoch,
}

/// What the statistic discriminators see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveSource {
    PerRealization,
    EnsembleMean,
}

/// How critics see real and generated signals within one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticBatch {
    /// Separate real and generated passes; generator steps score generated rows only.
    Paired,
    /// One pass over the stacked real and generated batch, in critic and generator steps alike.
    Joint,
}

macro_rules! keyword_enum {
    ($t:ty, $($name:literal => $v:expr),+) => {
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(Error::invalid(format!(
                        "unknown value {s:?} (expected one of: {})",
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                $(if *self == $v { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(Variant, "multicriteria" => Variant::Multicriteria, "gan" => Variant::Gan, "wgan" => Variant::Wgan);
keyword_enum!(DSchedule, "per_step" => DSchedule::PerStep, "per_epoch" => DSchedule::PerEpoch);
keyword_enum!(CurveSource, "per_realization" => CurveSource::PerRealization, "ensemble_mean" => CurveSource::EnsembleMean);
keyword_enum!(CriticBatch, "paired" => CriticBatch::Paired, "joint" => CriticBatch::Joint);
keyword_enum!(StatBudget, "combined" => StatBudget::Combined, "per_network" => StatBudget::PerNetwork);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub d_steps: usize,
    /// Signal length `N`.
    pub samples: usize,
    pub seed: u64,
    pub preset: String,
    /// Overrides the preset's width multiplier.
    pub width_multiplier: Option<f64>,
    pub variant: Variant,
    pub d_schedule: DSchedule,
    pub curve_source: CurveSource,
    pub stat_budget: StatBudget,
    pub critic_batch: CriticBatch,
    pub wgan_clip: f64,
    pub critic_steps: usize,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            epochs: 500,
            batch_size: 32,
            lr: 1e-3,
            d_steps: 2,
            samples: 1 << 15,
            seed: 0,
            preset: "paper".into(),
            width_multiplier: None,
            variant: Variant::Multicriteria,
            d_schedule: DSchedule::PerStep,
            curve_source: CurveSource::PerRealization,
            stat_budget: StatBudget::Combined,
            critic_batch: CriticBatch::Joint,
            wgan_clip: 0.01,
            critic_steps: 5,
            checkpoint_every: 0,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "alpha",
    "beta",
    "gamma",
    "lambda",
    "epochs",
    "batch_size",
    "lr",
    "d_steps",
    "samples",
    "seed",
    "preset",
    "width_multiplier",
    "variant",
    "d_schedule",
    "curve_source",
    "stat_budget",
    "critic_batch",
    "wgan_clip",
    "critic_steps",
    "checkpoint_every",
];

fn parse_value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::invalid(format!("bad value {v:?} for config key {key}")))
}

impl TrainConfig {
    /// Desk-scale smoke settings: desk preset, `N = 2^12`, 50 epochs, batch 8.
    pub fn smoke() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            samples: 1 << 12,
            preset: "desk".into(),
            ..Self::default()
        }
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig> {
        let mut c = GeneratorConfig::preset(&self.preset)?;
        if let Some(m) = self.width_multiplier {
            c.width_multiplier = m;
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights.as_array();
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::invalid(format!("loss weights must be non-negative, got {w:?}")));
        }
        if self.variant == Variant::Multicriteria && (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("loss weights must sum to 1, got {w:?}")));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.d_steps == 0 || self.critic_steps == 0 {
            return Err(Error::invalid(
                "epochs, batch_size, d_steps and critic_steps must be positive",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.wgan_clip > 0.0 && self.wgan_clip.is_finite()) {
            return Err(Error::invalid(format!("clip bound must be positive, got {}", self.wgan_clip)));
        }
        let g = self.generator_config()?;
        g.validate()?;
        g.check_length(self.samples)?;
        if self.samples % 16 != 0 {
            return Err(Error::invalid(format!(
                "signal length {} is not a multiple of 16",
                self.samples
            )));
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !CONFIG_KEYS.contains(&k) {
                return Err(Error::invalid(format!("config line {}: unknown key {k:?}", no + 1)));
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::invalid(format!("config line {}: duplicate key {k:?}", no + 1)));
            }
            c.set(k, v)?;
        }
        Ok(c)
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "alpha" => self.weights.alpha = parse_value(k, v)?,
            "beta" => self.weights.beta = parse_value(k, v)?,
            "gamma" => self.weights.gamma = parse_value(k, v)?,
            "lambda" => self.weights.lambda = parse_value(k, v)?,
            "epochs" => self.epochs = parse_value(k, v)?,
            "batch_size" => self.batch_size = parse_value(k, v)?,
            "lr" => self.lr = parse_value(k, v)?,
            "d_steps" => self.d_steps = parse_value(k, v)?,
            "samples" => self.samples = parse_value(k, v)?,
            "seed" => self.seed = parse_value(k, v)?,
            "preset" => {
                GeneratorConfig::preset(v)?;
                self.preset = v.to_string()
            }
            "width_multiplier" => {
                self.width_multiplier = if v == "none" { None } else { Some(parse_value(k, v)?) }
            }
            "variant" => self.variant = v.parse()?,
            "d_schedule" => self.d_schedule = v.parse()?,
            "curve_source" => self.curve_source = v.parse()?,
            "stat_budget" => self.stat_budget = v.parse()?,
            "critic_batch" => self.critic_batch = v.parse()?,
            "wgan_clip" => self.wgan_clip = parse_value(k, v)?,
            "critic_steps" => self.critic_steps = parse_value(k, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(k, v)?,
            _ => unreachable!(),
        }
        Ok(())
    }

    /// Inverse of [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let mut s = String::new();
        let _ = writeln!(s, "alpha={}\nbeta={}\ngamma={}\nlambda={}", w.alpha, w.beta, w.gamma, w.lambda);
        let _ = writeln!(s, "epochs={}\nbatch_size={}\nlr={}", self.epochs, self.batch_size, self.lr);
        let _ = writeln!(s, "d_steps={}\nsamples={}\nseed={}", self.d_steps, self.samples, self.seed);
        let _ = writeln!(s, "preset={}", self.preset);
        match self.width_multiplier {
            Some(m) => {
                let _ = writeln!(s, "width_multiplier={m}");
            }
            None => s.push_str("width_multiplier=none\n"),
        }
        let _ = writeln!(s, "variant={}\nd_schedule={}", self.variant, self.d_schedule);
        let _ = writeln!(s, "curve_source={}\nstat_budget={}", self.curve_source, self.stat_budget);
        let _ = writeln!(s, "critic_batch={}", self.critic_batch);
        let _ = writeln!(s, "wgan_clip={}\ncritic_steps={}", self.wgan_clip, self.critic_steps);
        let _ = writeln!(s, "checkpoint_every={}", self.checkpoint_every);
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Everything except the epoch count must match for a resume.
    fn resume_compatible(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.epochs = other.epochs;
        a.checkpoint_every = other.checkpoint_every;
        a == *other
    }
}

/// Per-step loss records.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistory {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossHistory {
    fn for_variant(v: Variant, samples: usize) -> Self {
        let mut columns: Vec<String> = match v {
            Variant::Multicriteria => ["step", "l_si", "l_s2", "l_skew", "l_flat", "total", "d_si", "d_s2", "d_skew", "d_flat"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Variant::Gan => ["step", "g_adv", "total", "d_real", "d_fake"].iter().map(|s| s.to_string()).collect(),
            Variant::Wgan => ["step", "g_adv", "total", "d_critic"].iter().map(|s| s.to_string()).collect(),
        };
        if v == Variant::Multicriteria {
            for &k in &SI_SEGMENTS {
                for i in 0..k {
                    columns.push(format!("l_si_{}_{i}", samples / k));
                }
            }
        }
        Self { columns, rows: vec![] }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Mean of `name` over consecutive groups of `per_epoch` rows.
    pub fn epoch_means(&self, name: &str, per_epoch: usize) -> Option<Vec<f64>> {
        let col = self.column(name)?;
        Some(
            col.chunks(per_epoch.max(1))
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect(),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, v)| if j == 0 { format!("{}", *v as u64) } else { format!("{v}") })
                .collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty loss history"))?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        if columns.first().map(String::as_str) != Some("step") {
            return Err(Error::invalid("loss history must start with a step column"));
        }
        let mut rows = vec![];
        for (i, l) in lines.enumerate() {
            let r: std::result::Result<Vec<f64>, _> = l.split(',').map(str::parse::<f64>).collect();
            let r = r.map_err(|_| Error::invalid(format!("loss history row {}: bad number", i + 1)))?;
            if r.len() != columns.len() {
                return Err(Error::invalid(format!("loss history row {}: wrong column count", i + 1)));
            }
            rows.push(r);
        }
        Ok(Self { columns, rows })
    }
}

/// Parameters and optimizer state of one network.
#[derive(Debug, Clone, PartialEq)]
struct Net {
    params: ParamStore<f32>,
    opt: Adam<f32>,
}

impl Net {
    fn new(layout: &crate::nn::ParamLayout, seed: u64, adam: AdamConfig) -> Self {
        let params = layout.init(seed);
        let opt = Adam::new(adam, &params);
        Self { params, opt }
    }

    fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push_store(prefix, &self.params);
        for (k, (m, v)) in self.opt.m.iter().zip(&self.opt.v).enumerate() {
            ck.push(format!("{prefix}/adam_m/{k}"), m);
            ck.push(format!("{prefix}/adam_v/{k}"), v);
        }
        ck.set_meta(&format!("{prefix}.adam_step"), self.opt.step);
    }

    fn load(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        ck.load_store(prefix, &mut self.params)?;
        for k in 0..self.opt.m.len() {
            self.opt.m[k] = ck.get(&format!("{prefix}/adam_m/{k}"))?;
            self.opt.v[k] = ck.get(&format!("{prefix}/adam_v/{k}"))?;
        }
        self.opt.step = ck.meta_parse(&format!("{prefix}.adam_step"))?;
        Ok(())
    }
}

enum Critics {
    Multi {
        si: SiDiscriminator,
        si_net: Net,
        stat: StatDiscriminator,
        stat_nets: Vec<Net>,
    },
    Baseline {
        d: BaselineDiscriminator,
        net: Net,
    },
}

const STAT_NAMES: [&str; 3] = ["s2", "skew", "flat"];

/// Random streams keyed by `(seed, step, purpose)`; resuming at a step replays them exactly.
fn stream(seed: u64, step: usize, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((step as u64) << 8 | purpose);
    r
}

const PURPOSE_G_NOISE: u64 = 255;
const PURPOSE_CALIBRATION: u64 = 254;
const PURPOSE_G_REAL: u64 = 253;

/// Noise batches averaged into the generator's evaluation statistics.
pub const CALIBRATION_BATCHES: usize = 16;

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            what: format!("{what} = {v}"),
        })
    }
}

/// Owns all model state of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub grid: ScaleGrid,
    generator: Generator,
    gen: Net,
    critics: Critics,
    real: Vec<f32>,
    realizations: usize,
    real_curves: Vec<f32>,
    mean_curves: Vec<f32>,
    step: usize,
    history: LossHistory,
}

impl Trainer {
    /// Sets up models and caches; the dataset is standardized globally first.
    pub fn new(dataset: &FieldEnsemble, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.samples() != config.samples {
            return Err(Error::invalid(format!(
                "dataset realizations have {} samples, config expects {}",
                dataset.samples(),
                config.samples
            )));
        }
        if dataset.realizations() < config.batch_size {
            return Err(Error::invalid(format!(
                "batch size {} exceeds the {} training realizations",
                config.batch_size,
                dataset.realizations()
            )));
        }
        let data = dataset.standardize()?;
        let grid = ScaleGrid::default_for(config.samples)?;
        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        let generator = Generator::new(config.generator_config()?)?;
        let gen = Net::new(&generator.layout, config.seed, adam);
        let n = config.samples;
        let critics = match config.variant {
            Variant::Multicriteria => {
                let si = SiDiscriminator::new(n)?;
                let si_net = Net::new(&si.layout, config.seed.wrapping_add(1), adam);
                let stat = StatDiscriminator::new(StatDiscriminatorConfig::new(grid.len(), config.stat_budget))?;
                let stat_nets = (0..3)
                    .map(|k| Net::new(&stat.layout, config.seed.wrapping_add(2 + k), adam))
                    .collect();
                Critics::Multi {
                    si,
                    si_net,
                    stat,
                    stat_nets,
                }
            }
            Variant::Gan | Variant::Wgan => {
                let d = BaselineDiscriminator::new(n, config.variant == Variant::Wgan)?;
                let net = Net::new(&d.layout, config.seed.wrapping_add(1), adam);
                Critics::Baseline { d, net }
            }
        };
        let r = data.realizations();
        let nl = grid.len();
        let mut real_curves = Vec::new();
        let mut mean = vec![0.0f64; nl * 3];
        if config.variant == Variant::Multicriteria {
            real_curves.reserve(r * nl * 3);
            for row in data.rows() {
                for (j, c) in realization_curves(row, grid.lags())?.iter().enumerate() {
                    for k in 0..3 {
                        real_curves.push(c[k] as f32);
                        mean[k * nl + j] += c[k] / r as f64;
                    }
                }
            }
        }
        Ok(Self {
            history: LossHistory::for_variant(config.variant, n),
            grid,
            generator,
            gen,
            critics,
            real: data.data().iter().map(|&v| v as f32).collect(),
            realizations: r,
            real_curves,
            mean_curves: mean.into_iter().map(|v| v as f32).collect(),
            step: 0,
            config,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.realizations / self.config.batch_size).max(1)
    }

    /// Generator updates completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch()
    }

    pub fn history(&self) -> &LossHistory {
        &self.history
    }

    pub fn generator(&self) -> (&Generator, &ParamStore<f32>) {
        (&self.generator, &self.gen.params)
    }

    /// Fingerprints of the generator and each critic, in that order.
    pub fn fingerprints(&self) -> Vec<u64> {
        let mut out = vec![self.gen.params.fingerprint()];
        match &self.critics {
            Critics::Multi { si_net, stat_nets, .. } => {
                out.push(si_net.params.fingerprint());
                out.extend(stat_nets.iter().map(|n| n.params.fingerprint()));
            }
            Critics::Baseline { net, .. } => out.push(net.params.fingerprint()),
        }
        out
    }

    fn noise(&self, step: usize, purpose: u64) -> Tensor<f32> {
        let b = self.config.batch_size;
        let n = self.config.samples;
        let mut rng = stream(self.config.seed, step, purpose);
        let data = (0..b * n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        Tensor::new(vec![b, n], data)
    }

    fn real_indices(&self, step: usize, purpose: u64) -> Vec<usize> {
        let mut rng = stream(self.config.seed, step, purpose);
        sample_indices(&mut rng, self.realizations, self.config.batch_size).into_vec()
    }

    /// Generator output with batch statistics, no gradient, no running-stat update.
    fn fake_batch(&self, step: usize, purpose: u64) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let bound = self.gen.params.bind(&mut g, false);
        let mut bufs = self.gen.params.buffers.clone();
        let x = g.input(self.noise(step, purpose));
        let mut cx = Ctx {
            g: &mut g,
            params: &bound,
            buffers: &mut bufs,
            mode: Mode::TrainFrozenStats,
        };
        let y = self.generator.forward(&mut cx, x)?;
        Ok(g.value(y).clone())
    }

    fn real_batch(&self, idx: &[usize]) -> Tensor<f32> {
        let n = self.config.samples;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.real[i * n..(i + 1) * n]);
        }
        Tensor::new(vec![idx.len(), n], data)
    }

    /// Real curve `k` for the chosen rows as `[B, |lags|]`, or the dataset mean as `[1, |lags|]`.
    fn real_curve(&self, idx: &[usize], k: usize) -> Tensor<f32> {
        let nl = self.grid.len();
        match self.config.curve_source {
            CurveSource::EnsembleMean => Tensor::new(vec![1, nl], self.mean_curves[k * nl..(k + 1) * nl].to_vec()),
            CurveSource::PerRealization => {
                let mut data = Vec::with_capacity(idx.len() * nl);
                for &i in idx {
                    let row = &self.real_curves[i * nl * 3..(i + 1) * nl * 3];
                    data.extend((0..nl).map(|j| row[j * 3 + k]));
                }
                Tensor::new(vec![idx.len(), nl], data)
            }
        }
    }

    fn stat_input(&self, g: &mut Graph<f32>, curves: NodeId, k: usize) -> NodeId {
        let c = g.select_last(curves, k);
        match self.config.curve_source {
            CurveSource::EnsembleMean => g.mean_rows(c),
            CurveSource::PerRealization => c,
        }
    }

    /// One update of every critic on a fresh real/generated pair. Returns the critic losses.
    pub fn d_step(&mut self, step: usize, iter: usize) -> Result<Vec<f64>> {
        let purpose = 2 * iter as u64;
        let idx = self.real_indices(step, purpose);
        let fake = self.fake_batch(step, purpose + 1)?;
        let real = self.real_batch(&idx);
        let b = self.config.batch_size;
        let mut labels = vec![1.0; b];
        labels.extend(vec![0.0; b]);
        let clip = self.config.wgan_clip;
        let variant = self.config.variant;
        let paired = self.config.critic_batch == CriticBatch::Paired;
        let mut fake_curves = None;
        if let Critics::Multi { .. } = &self.critics {
            let mut g = Graph::new();
            let x = g.input(fake.clone());
            let c = g.stat_curves(x, self.grid.lags());
            let mut per_stat = vec![];
            for k in 0..3 {
                let id = self.stat_input(&mut g, c, k);
                per_stat.push(g.value(id).clone());
            }
            fake_curves = Some(per_stat);
        }
        let real_curves: Vec<Tensor<f32>> = if fake_curves.is_some() {
            (0..3).map(|k| self.real_curve(&idx, k)).collect()
        } else {
            vec![]
        };
        let mut losses = vec![];
        match &mut self.critics {
            Critics::Multi {
                si,
                si_net,
                stat,
                stat_nets,
            } => {
                let (loss, grads) = train_pass(si_net, |cx| match paired {
                    true => {
                        let mut parts = vec![];
                        for (t, y) in [(&real, 1.0), (&fake, 0.0)] {
                            let x = cx.g.input(t.clone());
                            let scores = si.forward(cx, x)?;
                            let sub = si_sub_losses(cx.g, &scores, &vec![y; b]);
                            parts.push((si_loss_node(cx.g, &sub), 0.5));
                        }
                        Ok(cx.g.linear(&parts))
                    }
                    false => {
                        let x = cx.g.input(concat_rows(&real, &fake));
                        let scores = si.forward(cx, x)?;
                        let sub = si_sub_losses(cx.g, &scores, &labels);
                        Ok(si_loss_node(cx.g, &sub))
                    }
                })?;
                si_net.opt.update(&mut si_net.params, &grads)?;
                losses.push(loss);
                let fake_curves = fake_curves.expect("computed above");
                for k in 0..3 {
                    let both = concat_rows(&real_curves[k], &fake_curves[k]);
                    let rows = both.shape[0] / 2;
                    let mut lab = vec![1.0f32; rows];
                    lab.extend(vec![0.0f32; rows]);
                    let net = &mut stat_nets[k];
                    let (loss, grads) = train_pass(net, |cx| {
                        let x = cx.g.input(both.clone());
                        let p = stat.forward(cx, x)?;
                        Ok(cx.g.bce_groups(p, lab.clone(), 1))
                    })?;
                    net.opt.update(&mut net.params, &grads)?;
                    losses.push(loss);
                }
            }
            Critics::Baseline { d, net } => {
                let mut sides = (0.0, 0.0);
                let (loss, grads) = train_pass(net, |cx| {
                    // scores for the real rows then the generated rows
                    let (pr, pf) = if paired {
                        let xr = cx.g.input(real.clone());
                        let pr = d.forward(cx, xr)?;
                        let xf = cx.g.input(fake.clone());
                        (pr, d.forward(cx, xf)?)
                    } else {
                        let x = cx.g.input(concat_rows(&real, &fake));
                        let p = d.forward(cx, x)?;
                        (cx.g.slice_rows(p, 0, b), cx.g.slice_rows(p, b, b))
                    };
                    if variant == Variant::Wgan {
                        let r = cx.g.weighted_sum(pr, vec![-1.0 / b as f32; b]);
                        let f = cx.g.weighted_sum(pf, vec![1.0 / b as f32; b]);
                        Ok(cx.g.linear(&[(r, 1.0), (f, 1.0)]))
                    } else {
                        let (vr, vf) = (cx.g.value(pr).to_vec_f64(), cx.g.value(pf).to_vec_f64());
                        sides = (bce_mean(&vr, 1.0), bce_mean(&vf, 0.0));
                        let lr = cx.g.bce(pr, 1.0);
                        let lf = cx.g.bce(pf, 0.0);
                        Ok(cx.g.linear(&[(lr, 1.0), (lf, 1.0)]))
                    }
                })?;
                net.opt.update(&mut net.params, &grads)?;
                if variant == Variant::Wgan {
                    net.params.clip(clip);
                    losses.push(loss);
                } else {
                    losses.push(sides.0);
                    losses.push(sides.1);
                }
            }
        }
        for (i, &l) in losses.iter().enumerate() {
            check_finite(step + 1, &format!("critic loss {i}"), l)?;
        }
        Ok(losses)
    }

    /// Builds the generator objective on fresh noise. Returns the graph, the
    /// four criterion nodes (baselines use only the first), the total, and the
    /// bound generator parameters.
    fn g_graph(&self, step: usize, mode: Mode, bufs: &mut [Tensor<f32>]) -> Result<GGraph> {
        let mut g = Graph::new();
        let bound = self.gen.params.bind(&mut g, true);
        let noise = g.input(self.noise(step, PURPOSE_G_NOISE));
        let fake = {
            let mut cx = Ctx {
                g: &mut g,
                params: &bound,
                buffers: bufs,
                mode,
            };
            self.generator.forward(&mut cx, noise)?
        };
        let b = self.config.batch_size;
        let w = self.config.weights;
        // Under joint batches the critics see the same real/generated mix they train on.
        let real = match self.config.critic_batch {
            CriticBatch::Joint => Some(g.input(self.real_batch(&self.real_indices(step, PURPOSE_G_REAL)))),
            CriticBatch::Paired => None,
        };
        let scored = match real {
            Some(r) => g.concat_batch(r, fake),
            None => fake,
        };
        let offset = if real.is_some() { b } else { 0 };
        let mut terms = vec![];
        let mut sub = None;
        match &self.critics {
            Critics::Multi {
                si,
                si_net,
                stat,
                stat_nets,
            } => {
                let mut scores = frozen(&mut g, si_net, |cx| si.forward(cx, scored))?;
                for (j, &k) in SI_SEGMENTS.iter().enumerate() {
                    scores.scores[j] = g.slice_rows(scores.scores[j], offset * k, b * k);
                }
                let s = si_sub_losses(&mut g, &scores, &vec![1.0; b]);
                terms.push(si_loss_node(&mut g, &s));
                sub = Some(s);
                let curves = g.stat_curves(fake, self.grid.lags());
                for (k, net) in stat_nets.iter().enumerate() {
                    let x = self.stat_input(&mut g, curves, k);
                    let p = frozen(&mut g, net, |cx| stat.forward(cx, x))?;
                    terms.push(g.bce(p, 1.0));
                }
            }
            Critics::Baseline { d, net } => {
                let p = frozen(&mut g, net, |cx| d.forward(cx, scored))?;
                let p = g.slice_rows(p, offset, b);
                if self.config.variant == Variant::Wgan {
                    terms.push(g.weighted_sum(p, vec![-1.0 / b as f32; b]));
                } else {
                    terms.push(g.bce(p, 1.0));
                }
            }
        }
        let total = if terms.len() == 4 {
            let coeffs = w.as_array();
            let weighted: Vec<(NodeId, f64)> = terms.iter().copied().zip(coeffs).collect();
            g.linear(&weighted)
        } else {
            g.linear(&[(terms[0], 1.0)])
        };
        Ok(GGraph {
            g,
            terms,
            sub,
            total,
            bound,
        })
    }

    /// One generator update. Returns the generator-side losses.
    pub fn g_step(&mut self, step: usize) -> Result<LossBundle> {
        let mut bufs = self.gen.params.buffers.clone();
        let GGraph {
            mut g,
            terms,
            sub,
            total,
            bound,
        } = self.g_graph(step, Mode::Train, &mut bufs)?;
        let val = |g: &Graph<f32>, id: NodeId| g.scalar(id) as f64;
        let bundle = LossBundle {
            l_si: val(&g, terms[0]),
            l_s2: terms.get(1).map_or(0.0, |&t| val(&g, t)),
            l_skew: terms.get(2).map_or(0.0, |&t| val(&g, t)),
            l_flat: terms.get(3).map_or(0.0, |&t| val(&g, t)),
            total: val(&g, total),
            si_sub: match sub {
                Some(s) => s.map(|id| g.value(id).to_vec_f64()),
                None => Default::default(),
            },
        };
        for (name, v) in [
            ("l_si", bundle.l_si),
            ("l_s2", bundle.l_s2),
            ("l_skew", bundle.l_skew),
            ("l_flat", bundle.l_flat),
            ("total", bundle.total),
        ] {
            check_finite(step + 1, name, v)?;
        }
        g.backward(total);
        let grads = self.gen.params.grads(&g, &bound);
        self.gen.opt.update(&mut self.gen.params, &grads)?;
        self.gen.params.buffers = bufs;
        Ok(bundle)
    }

    /// Generator gradient norm contributed by each weighted criterion, without updating anything.
    pub fn generator_term_grad_norms(&self) -> Result<Vec<f64>> {
        let mut bufs = self.gen.params.buffers.clone();
        let GGraph {
            mut g, terms, bound, ..
        } = self.g_graph(self.step, Mode::TrainFrozenStats, &mut bufs)?;
        let coeffs = if terms.len() == 4 {
            self.config.weights.as_array().to_vec()
        } else {
            vec![1.0]
        };
        let mut out = vec![];
        for (&t, c) in terms.iter().zip(coeffs) {
            let node = g.linear(&[(t, c)]);
            g.backward(node);
            let sq: f64 = bound.iter().map(|&id| g.grad(id).norm().powi(2)).sum();
            out.push(sq.sqrt());
        }
        Ok(out)
    }

    /// Critic updates then one generator update.
    pub fn train_step(&mut self) -> Result<()> {
        let step = self.step;
        let inner = match (self.config.variant, self.config.d_schedule) {
            (Variant::Wgan, DSchedule::PerStep) => self.config.critic_steps,
            (_, DSchedule::PerStep) => self.config.d_steps,
            (_, DSchedule::PerEpoch) => 0,
        };
        if self.config.d_schedule == DSchedule::PerEpoch && step % self.steps_per_epoch() == 0 {
            let per_pass = if self.config.variant == Variant::Wgan {
                self.config.critic_steps
            } else {
                1
            };
            let total = self.config.d_steps * self.steps_per_epoch() * per_pass;
            for i in 0..total {
                self.d_step(step, i)?;
            }
        }
        let mut d_losses = vec![];
        for i in 0..inner {
            d_losses = self.d_step(step, i)?;
        }
        let bundle = self.g_step(step)?;
        if d_losses.is_empty() {
            d_losses = vec![f64::NAN; self.history.columns.len()];
        }
        self.step += 1;
        let mut row = vec![self.step as f64];
        match self.config.variant {
            Variant::Multicriteria => {
                row.extend([bundle.l_si, bundle.l_s2, bundle.l_skew, bundle.l_flat, bundle.total]);
                row.extend(&d_losses[..4]);
                for s in &bundle.si_sub {
                    row.extend(s);
                }
            }
            Variant::Gan => {
                row.extend([bundle.l_si, bundle.total]);
                row.extend(&d_losses[..2]);
            }
            Variant::Wgan => {
                row.extend([bundle.l_si, bundle.total]);
                row.extend(&d_losses[..1]);
            }
        }
        self.history.rows.push(row);
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        for _ in 0..self.steps_per_epoch() {
            self.train_step()?;
        }
        Ok(())
    }

    /// Generator weights with batch-norm running statistics replaced by exact
    /// averages over fresh noise batches. Training state is left untouched.
    pub fn eval_generator(&self) -> ParamStore<f32> {
        let mut store = self.gen.params.clone();
        let seed = stream(self.config.seed, self.step, PURPOSE_CALIBRATION).random();
        self.generator
            .recalibrate(
                &mut store,
                CALIBRATION_BATCHES,
                self.config.batch_size.max(2),
                self.config.samples,
                seed,
            )
            .expect("training length and batch were validated");
        store
    }

    /// Everything needed to resume or to generate.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new::<f32>();
        ck.set_meta("kind", "training");
        ck.set_meta("config", self.config.to_text());
        ck.set_meta("step", self.step);
        write_generator_meta(&mut ck, &self.generator.config, self.config.samples);
        self.gen.save(&mut ck, "gen");
        let eval = self.eval_generator();
        for (n, b) in eval.buffer_names.iter().zip(&eval.buffers) {
            ck.push(format!("gen_eval/{n}"), b);
        }
        match &self.critics {
            Critics::Multi { si_net, stat_nets, .. } => {
                si_net.save(&mut ck, "d_si");
                for (k, n) in stat_nets.iter().enumerate() {
                    n.save(&mut ck, &format!("d_{}", STAT_NAMES[k]));
                }
            }
            Critics::Baseline { net, .. } => net.save(&mut ck, "d_full"),
        }
        let cols = self.history.columns.len();
        let flat: Vec<f64> = self.history.rows.iter().flatten().copied().collect();
        ck.arrays.push(crate::nn::checkpoint::NamedArray {
            name: "history".into(),
            shape: vec![self.history.rows.len(), cols],
            data: flat,
        });
        ck
    }

    /// Restores a run saved by [`Trainer::checkpoint`]. Only `epochs` and
    /// `checkpoint_every` may differ from the saved configuration.
    pub fn resume(dataset: &FieldEnsemble, config: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let saved = TrainConfig::parse(ck.meta_str("config")?)?;
        if !saved.resume_compatible(&config) {
            return Err(Error::invalid(
                "checkpoint was written with a different training configuration",
            ));
        }
        let mut t = Self::new(dataset, config)?;
        t.step = ck.meta_parse("step")?;
        t.gen.load(ck, "gen")?;
        match &mut t.critics {
            Critics::Multi { si_net, stat_nets, .. } => {
                si_net.load(ck, "d_si")?;
                for (k, n) in stat_nets.iter_mut().enumerate() {
                    n.load(ck, &format!("d_{}", STAT_NAMES[k]))?;
                }
            }
            Critics::Baseline { net, .. } => net.load(ck, "d_full")?,
        }
        let h = ck.get::<f64>("history")?;
        let cols = t.history.columns.len();
        if h.shape.len() != 2 || (h.shape[0] > 0 && h.shape[1] != cols) {
            return Err(Error::format("checkpoint", "loss history has the wrong width"));
        }
        t.history.rows = h.data.chunks(cols.max(1)).map(|c| c.to_vec()).collect();
        Ok(t)
    }
}

struct GGraph {
    g: Graph<f32>,
    terms: Vec<NodeId>,
    sub: Option<[NodeId; 4]>,
    total: NodeId,
    bound: Vec<NodeId>,
}

fn concat_rows(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let mut shape = a.shape.clone();
    shape[0] += b.shape[0];
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Tensor::new(shape, data)
}

fn bce_mean(p: &[f64], y: f64) -> f64 {
    let eps = crate::nn::graph::BCE_EPS;
    p.iter()
        .map(|&v| {
            let v = v.clamp(eps, 1.0 - eps);
            -(y * v.ln() + (1.0 - y) * (1.0 - v).ln())
        })
        .sum::<f64>()
        / p.len() as f64
}

/// Forward with trainable critic parameters in batch-statistics mode; returns
/// the loss and parameter gradients. Running statistics are committed.
fn train_pass<F>(net: &mut Net, f: F) -> Result<(f64, Vec<Tensor<f32>>)>
where
    F: FnOnce(&mut Ctx<'_, f32>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = net.params.bind(&mut g, true);
    let mut bufs = net.params.buffers.clone();
    let loss = {
        let mut cx = Ctx {
            g: &mut g,
            params: &bound,
            buffers: &mut bufs,
            mode: Mode::Train,
        };
        f(&mut cx)?
    };
    let value = g.scalar(loss) as f64;
    g.backward(loss);
    let grads = net.params.grads(&g, &bound);
    net.params.buffers = bufs;
    Ok((value, grads))
}

/// Applies a critic with constant parameters on an existing graph.
fn frozen<R, F>(g: &mut Graph<f32>, net: &Net, f: F) -> Result<R>
where
    F: FnOnce(&mut Ctx<'_, f32>) -> Result<R>,
{
    let bound = net.params.bind(g, false);
    let mut bufs = net.params.buffers.clone();
    let mut cx = Ctx {
        g,
        params: &bound,
        buffers: &mut bufs,
        mode: Mode::TrainFrozenStats,
    };
    f(&mut cx)
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::format("checkpoint", format!("bad list {s:?}"))))
        .collect()
}

fn write_generator_meta(ck: &mut Checkpoint, c: &GeneratorConfig, samples: usize) {
    ck.set_meta("generator.levels", c.levels);
    ck.set_meta("generator.kernels", join(&c.kernels));
    ck.set_meta("generator.channels", join(&c.channels));
    ck.set_meta("generator.bridge_blocks", c.bridge_blocks);
    ck.set_meta("generator.bridge_kernel", c.bridge_kernel);
    ck.set_meta("generator.bridge_channels", c.bridge_channels);
    ck.set_meta("generator.width_multiplier", c.width_multiplier);
    ck.set_meta("samples", samples);
}

/// Generator architecture, weights and recalibrated evaluation statistics
/// from a training checkpoint.
pub fn load_generator(ck: &Checkpoint) -> Result<(Generator, ParamStore<f32>)> {
    let config = GeneratorConfig {
        levels: ck.meta_parse("generator.levels")?,
        kernels: parse_list(ck.meta_str("generator.kernels")?)?,
        channels: parse_list(ck.meta_str("generator.channels")?)?,
        bridge_blocks: ck.meta_parse("generator.bridge_blocks")?,
        bridge_kernel: ck.meta_parse("generator.bridge_kernel")?,
        bridge_channels: ck.meta_parse("generator.bridge_channels")?,
        width_multiplier: ck.meta_parse("generator.width_multiplier")?,
    };
    let g = Generator::new(config).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let mut store = g.init_params::<f32>(0);
    ck.load_store("gen", &mut store)?;
    for (n, b) in store.buffer_names.iter().zip(store.buffers.iter_mut()) {
        let v = ck.get::<f32>(&format!("gen_eval/{n}"))?;
        if v.shape != b.shape {
            return Err(Error::format("checkpoint", format!("gen_eval/{n} has the wrong shape")));
        }
        *b = v;
    }
    Ok((g, store))
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    /// Checkpoints written, in order.
    pub checkpoints: Vec<PathBuf>,
}

pub const LOSS_CSV: &str = "losses.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Runs `config.epochs` epochs (continuing `resume_from` when given). With
/// `out_dir`, writes periodic checkpoints, `final.ckpt` and `losses.csv`.
pub fn train(
    dataset: &FieldEnsemble,
    config: TrainConfig,
    out_dir: Option<&Path>,
    resume_from: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let mut t = match resume_from {
        Some(ck) => Trainer::resume(dataset, config, ck)?,
        None => Trainer::new(dataset, config)?,
    };
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut checkpoints = vec![];
    let every = t.config.checkpoint_every;
    let write_history = |t: &Trainer| -> Result<()> {
        if let Some(d) = out_dir {
            let p = d.join(LOSS_CSV);
            fs::write(&p, t.history.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };
    while t.epoch() < t.config.epochs {
        if let Err(e) = t.run_epoch() {
            write_history(&t)?;
            return Err(e);
        }
        let e = t.epoch();
        if let Some(d) = out_dir {
            if every > 0 && e % every == 0 && e < t.config.epochs {
                let p = d.join(format!("epoch_{e:04}.ckpt"));
                t.checkpoint().save(&p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(d) = out_dir {
        let p = d.join(FINAL_CHECKPOINT);
        t.checkpoint().save(&p)?;
        checkpoints.push(p);
    }
    write_history(&t)?;
    Ok(TrainOutcome {
        trainer: t,
        checkpoints,
    })
}

/// [`train`] restricted to the single-discriminator baselines.
pub fn train_baseline(dataset: &FieldEnsemble, config: TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    if config.variant == Variant::Multicriteria {
        return Err(Error::invalid("baseline training needs variant gan or wgan"));
    }
    train(dataset, config, out_dir, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(v: [f64; 4]) -> LossBundle {
        LossBundle {
            l_si: v[0],
            l_s2: v[1],
            l_skew: v[2],
            l_flat: v[3],
            total: 0.0,
            si_sub: Default::default(),
        }
    }

    #[test]
    fn weighted_total_values() {
        let w = LossWeights::default();
        assert!((generator_loss(&bundle([1.0; 4]), &w) - 1.0).abs() < 1e-12);
        assert_eq!(generator_loss(&bundle([2.0, 0.0, 0.0, 0.0]), &w), 1.0);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            lambda: 0.0,
        };
        assert_eq!(generator_loss(&bundle([3.0, 1.0, 7.0, 2.0]), &zero), 0.0);
        let b = bundle([0.3, 1.7, 2.2, 0.9]);
        let d = bundle([0.6, 3.4, 4.4, 1.8]);
        assert_eq!(2.0 * generator_loss(&b, &w), generator_loss(&d, &w));
    }

    #[test]
    fn config_round_trip_and_errors() {
        let mut c = TrainConfig::smoke();
        c.variant = Variant::Wgan;
        c.width_multiplier = Some(0.25);
        c.curve_source = CurveSource::EnsembleMean;
        c.critic_batch = CriticBatch::Paired;
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c, back);
        assert!(TrainConfig::parse("bogus=1").is_err());
        assert!(TrainConfig::parse("epochs=1\nepochs=2").is_err());
        assert!(TrainConfig::parse("epochs=x").is_err());
        assert!(TrainConfig::parse("variant=vae").is_err());
        assert!(TrainConfig::parse("critic_batch=mixed").is_err());
        let d = TrainConfig::parse("# comment\n\nepochs = 3\n").unwrap();
        assert_eq!(d.epochs, 3);
        assert_eq!(d.batch_size, 32);
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.lr, c.d_steps, c.samples), (500, 32, 1e-3, 2, 32768));
        assert_eq!(c.weights.as_array(), [0.5, 0.2, 0.15, 0.15]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let mut c = TrainConfig::smoke();
        c.weights.alpha = 0.6;
        assert!(c.validate().is_err());
        c.variant = Variant::Gan;
        assert!(c.validate().is_ok());
        c.weights.beta = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn history_csv_round_trip() {
        let mut h = LossHistory::for_variant(Variant::Gan, 1024);
        h.rows.push(vec![1.0, 0.1 + 0.2, 1e-300, 3.0, f64::MAX]);
        h.rows.push(vec![2.0, -0.0, 0.5, 1.0 / 3.0, 2.0]);
        let back = LossHistory::parse_csv(&h.to_csv()).unwrap();
        assert_eq!(h, back);
        assert_eq!(h.epoch_means("g_adv", 2).unwrap().len(), 1);
    }

    #[test]
    fn multicriteria_columns() {
        let h = LossHistory::for_variant(Variant::Multicriteria, 1024);
        assert_eq!(&h.columns[..6], &["step", "l_si", "l_s2", "l_skew", "l_flat", "total"]);
        assert_eq!(h.columns.len(), 10 + 30);
        assert_eq!(h.columns[10], "l_si_512_0");
    }
}
