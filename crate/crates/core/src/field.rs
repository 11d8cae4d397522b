//! One-dimensional field ensembles: storage, ingestion, segmentation,
//! standardization, increments and border trimming.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::stats::moments::pairwise_sum;

/// Integral scale of the Modane grid-turbulence record, in sampling distances.
pub const MODANE_INTEGRAL_SCALE: f64 = 2350.0;
/// Kolmogorov scale of the Modane record, in sampling distances.
pub const MODANE_KOLMOGOROV_SCALE: f64 = 5.0;

/// Optional physical metadata carried alongside an ensemble. Never used in computation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FieldMeta {
    /// Mean flow velocity in m/s.
    pub mean_velocity: Option<f64>,
    /// Sampling frequency in Hz.
    pub sampling_frequency: Option<f64>,
    pub taylor_reynolds: Option<f64>,
    /// Integral scale in samples, used for `l/L` axes when present.
    pub integral_scale: Option<f64>,
}

/// `R` realizations of `N` samples each, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEnsemble {
    data: Vec<f64>,
    realizations: usize,
    samples: usize,
    /// Sampling distance.
    pub ls: f64,
    pub meta: FieldMeta,
}

impl FieldEnsemble {
    pub fn new(data: Vec<f64>, realizations: usize, samples: usize) -> Result<Self> {
        if realizations < 1 {
            return Err(Error::invalid("ensemble needs at least one realization"));
        }
        if samples < 2 {
            return Err(Error::invalid("realizations need at least two samples"));
        }
        if data.len() != realizations * samples {
            return Err(Error::invalid(format!(
                "data length {} does not match {realizations}x{samples}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at flat index {i}")));
        }
        Ok(Self {
            data,
            realizations,
            samples,
            ls: 1.0,
            meta: FieldMeta::default(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("rows have different lengths"));
        }
        Self::new(rows.concat(), rows.len(), n)
    }

    pub fn realizations(&self) -> usize {
        self.realizations
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.samples..(i + 1) * self.samples]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.samples)
    }

    /// Ensemble built from a subset of rows, keeping metadata.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.samples);
        for &i in idx {
            if i >= self.realizations {
                return Err(Error::invalid(format!("row {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut out = Self::new(data, idx.len(), self.samples)?;
        out.ls = self.ls;
        out.meta = self.meta.clone();
        Ok(out)
    }

    pub fn mean(&self) -> f64 {
        pairwise_sum(&self.data) / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let sq: Vec<f64> = self.data.iter().map(|v| (v - m) * (v - m)).collect();
        pairwise_sum(&sq) / self.data.len() as f64
    }

    /// One global affine map over all `R x N` samples to mean 0, variance 1.
    pub fn standardize(&self) -> Result<Self> {
        let mean = self.mean();
        let var = self.variance();
        if !(var > 0.0) {
            return Err(Error::DegenerateInput(
                "ensemble has zero variance and cannot be standardized".into(),
            ));
        }
        let sd = var.sqrt();
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        Ok(out)
    }

    /// Writes `<base>.f32` (little-endian float32, row-major) and `<base>.meta`,
    /// creating the parent directory if needed.
    pub fn write(&self, base: &Path) -> Result<()> {
        let (bin, meta) = ensemble_paths(base);
        if let Some(dir) = bin.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut w = BufWriter::new(file);
        for &v in &self.data {
            w.write_f32::<LittleEndian>(v as f32)
                .map_err(|e| Error::io(&bin, e))?;
        }
        w.flush().map_err(|e| Error::io(&bin, e))?;
        fs::write(&meta, self.meta_text()).map_err(|e| Error::io(&meta, e))?;
        Ok(())
    }

    fn meta_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "realizations={}", self.realizations);
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "ls={}", self.ls);
        let opt = [
            ("mean_velocity", self.meta.mean_velocity),
            ("sampling_frequency", self.meta.sampling_frequency),
            ("taylor_reynolds", self.meta.taylor_reynolds),
            ("integral_scale", self.meta.integral_scale),
        ];
        for (k, v) in opt {
            if let Some(v) = v {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        s
    }

    /// Reads an ensemble written by [`FieldEnsemble::write`] (or any producer of the same format).
    pub fn read(base: &Path) -> Result<Self> {
        let (bin, meta_path) = ensemble_paths(base);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut r = None;
        let mut n = None;
        let mut ls = 1.0;
        let mut meta = FieldMeta::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(&meta_path, format!("line {}: expected key=value", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| Error::format(&meta_path, format!("bad number for {k}: {v}")))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| Error::format(&meta_path, format!("bad integer for {k}: {v}")))
            };
            match k {
                "realizations" => r = Some(int(v)?),
                "samples" => n = Some(int(v)?),
                "ls" => ls = num(v)?,
                "mean_velocity" => meta.mean_velocity = Some(num(v)?),
                "sampling_frequency" => meta.sampling_frequency = Some(num(v)?),
                "taylor_reynolds" => meta.taylor_reynolds = Some(num(v)?),
                "integral_scale" => meta.integral_scale = Some(num(v)?),
                other => {
                    return Err(Error::format(&meta_path, format!("unknown key {other}")));
                }
            }
        }
        let r = r.ok_or_else(|| Error::format(&meta_path, "missing realizations="))?;
        let n = n.ok_or_else(|| Error::format(&meta_path, "missing samples="))?;
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != r * n * 4 {
            return Err(Error::format(
                &bin,
                format!("expected {} bytes for {r}x{n} float32, found {}", r * n * 4, bytes.len()),
            ));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| LittleEndian::read_f32(c) as f64)
            .collect();
        let mut ens = Self::new(data, r, n).map_err(|e| Error::format(&bin, e.to_string()))?;
        ens.ls = ls;
        ens.meta = meta;
        Ok(ens)
    }
}

/// Maps `name`, `name.f32` or `name.meta` to the pair of files of one ensemble.
pub fn ensemble_paths(base: &Path) -> (PathBuf, PathBuf) {
    let stem = match base.extension().and_then(|e| e.to_str()) {
        Some("f32") | Some("meta") => base.with_extension(""),
        _ => base.to_path_buf(),
    };
    let mut bin = stem.clone().into_os_string();
    bin.push(".f32");
    let mut meta = stem.into_os_string();
    meta.push(".meta");
    (bin.into(), meta.into())
}

/// Analysis lags (in samples) with the integral and Kolmogorov scale markers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGrid {
    lags: Vec<usize>,
    pub integral_scale: f64,
    pub kolmogorov_scale: f64,
}

impl ScaleGrid {
    pub const DEFAULT_LAG_COUNT: usize = 24;

    pub fn new(lags: Vec<usize>, integral_scale: f64, kolmogorov_scale: f64) -> Result<Self> {
        if lags.is_empty() {
            return Err(Error::invalid("scale grid needs at least one lag"));
        }
        if lags[0] < 1 {
            return Err(Error::invalid("lags must be >= 1"));
        }
        if lags.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("lags must be strictly increasing"));
        }
        if !(kolmogorov_scale < integral_scale) {
            return Err(Error::invalid("Kolmogorov scale must be below the integral scale"));
        }
        Ok(Self {
            lags,
            integral_scale,
            kolmogorov_scale,
        })
    }

    /// `count` approximately log-spaced distinct lags from 1 to `max_lag`.
    pub fn log_spaced(count: usize, max_lag: usize) -> Result<Self> {
        if count < 1 || max_lag < count {
            return Err(Error::invalid(format!(
                "cannot place {count} distinct lags in [1, {max_lag}]"
            )));
        }
        let mut lags = Vec::with_capacity(count);
        let ratio = (max_lag as f64).ln() / (count.max(2) - 1) as f64;
        for i in 0..count {
            let target = (ratio * i as f64).exp().round() as usize;
            let prev = lags.last().copied().unwrap_or(0);
            // push forward on collisions, but leave room for the remaining lags
            let cap = max_lag - (count - 1 - i);
            lags.push(target.max(prev + 1).min(cap));
        }
        Self::new(lags, MODANE_INTEGRAL_SCALE, MODANE_KOLMOGOROV_SCALE)
    }

    /// 24 log-spaced lags from 1 to `N/4`.
    pub fn default_for(samples: usize) -> Result<Self> {
        Self::log_spaced(Self::DEFAULT_LAG_COUNT, samples / 4)
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    pub fn with_integral_scale(mut self, l: f64) -> Result<Self> {
        if !(self.kolmogorov_scale < l) {
            return Err(Error::invalid("integral scale must exceed the Kolmogorov scale"));
        }
        self.integral_scale = l;
        Ok(self)
    }

    /// Checks `lags[last] <= N/2` for an ensemble of `samples` points.
    pub fn check_fits(&self, samples: usize) -> Result<()> {
        let last = *self.lags.last().expect("non-empty grid");
        if last > samples / 2 {
            return Err(Error::invalid(format!(
                "largest lag {last} exceeds half the realization length {samples}"
            )));
        }
        Ok(())
    }

    /// Lags lying in `[lo, hi]`.
    pub fn lags_in(&self, lo: f64, hi: f64) -> Vec<usize> {
        self.lags
            .iter()
            .copied()
            .filter(|&l| l as f64 >= lo && l as f64 <= hi)
            .collect()
    }
}

/// `field[x + lag] - field[x]`, no wraparound.
pub fn increments(field: &[f64], lag: usize) -> Result<Vec<f64>> {
    if lag == 0 || lag >= field.len() {
        return Err(Error::invalid(format!(
            "lag {lag} outside [1, {})",
            field.len()
        )));
    }
    Ok(field[lag..]
        .iter()
        .zip(field)
        .map(|(b, a)| b - a)
        .collect())
}

/// Cuts a long record into realizations `series[i*stride .. i*stride + n]`.
pub fn segment(series: &[f64], n: usize, stride: usize) -> Result<FieldEnsemble> {
    if n > series.len() {
        return Err(Error::invalid(format!(
            "segment length {n} exceeds series length {}",
            series.len()
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let count = (series.len() - n) / stride + 1;
    let mut data = Vec::with_capacity(count * n);
    for i in 0..count {
        data.extend_from_slice(&series[i * stride..i * stride + n]);
    }
    FieldEnsemble::new(data, count, n)
}

/// Drops `n_b / 2` samples from each end.
pub fn trim_borders(field: &[f64], n_b: usize) -> Result<Vec<f64>> {
    if n_b >= field.len() {
        return Err(Error::invalid(format!(
            "border {n_b} must be shorter than the field ({})",
            field.len()
        )));
    }
    if n_b % 2 != 0 {
        return Err(Error::invalid(format!("border {n_b} must be even")));
    }
    let h = n_b / 2;
    Ok(field[h..field.len() - h].to_vec())
}
