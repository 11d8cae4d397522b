//! Ensemble analysis reports (CSV tables and SVG plots) and two-ensemble comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::field::{FieldEnsemble, ScaleGrid};
use crate::stats::csv::{format_pdfs, format_stat_curves, format_zeta, stat_curve_rows, write_text};
use crate::stats::{
    increment_pdf, stat_curves, zeta_fit, IncrementPdf, StatCurves, ZetaResult, DEFAULT_FIT_RANGE, DEFAULT_ORDERS,
    DEFAULT_PDF_LAGS,
};
use crate::svg::{LinePlot, Series};

pub const DEFAULT_PDF_BINS: usize = 64;

pub const STAT_CURVES_FILE: &str = "stat_curves.csv";
pub const ZETA_FILE: &str = "zeta.csv";
pub const PDF_FILE: &str = "pdfs.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub grid: ScaleGrid,
    pub fit_range: [f64; 2],
    pub orders: Vec<f64>,
    /// Lags at or beyond the signal length are skipped.
    pub pdf_lags: Vec<usize>,
    pub pdf_bins: usize,
    /// Overrides the grid's integral scale on the `l/L` axis.
    pub integral_scale: Option<f64>,
}

impl AnalyzeOptions {
    pub fn default_for(samples: usize) -> Result<Self> {
        Ok(Self {
            grid: ScaleGrid::default_for(samples)?,
            fit_range: DEFAULT_FIT_RANGE,
            orders: DEFAULT_ORDERS.to_vec(),
            pdf_lags: DEFAULT_PDF_LAGS.to_vec(),
            pdf_bins: DEFAULT_PDF_BINS,
            integral_scale: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub curves: StatCurves,
    pub zeta: ZetaResult,
    pub pdfs: Vec<IncrementPdf>,
    pub integral_scale: f64,
}

/// Curves, scaling exponents and PDFs of one ensemble. The integral scale for
/// the `l/L` axis comes from the options, then the ensemble metadata, then the grid.
pub fn analyze(ens: &FieldEnsemble, opts: &AnalyzeOptions) -> Result<Analysis> {
    let integral_scale = opts
        .integral_scale
        .or(ens.meta.integral_scale)
        .unwrap_or(opts.grid.integral_scale);
    if !(integral_scale > 0.0) {
        return Err(Error::invalid(format!("integral scale must be positive, got {integral_scale}")));
    }
    let curves = stat_curves(ens, &opts.grid)?;
    let zeta = zeta_fit(ens, &opts.orders, opts.fit_range, &opts.grid)?;
    let pdfs = opts
        .pdf_lags
        .iter()
        .filter(|&&l| l < ens.samples())
        .map(|&l| increment_pdf(ens, l, opts.pdf_bins))
        .collect::<Result<Vec<_>>>()?;
    Ok(Analysis {
        curves,
        zeta,
        pdfs,
        integral_scale,
    })
}

fn log_axis(a: &Analysis) -> Vec<f64> {
    a.curves
        .lags
        .iter()
        .map(|&l| (l as f64 / a.integral_scale).log10())
        .collect()
}

/// Overlay plots of the three curves, the exponents and the PDFs for labelled analyses.
pub fn plots(items: &[(&str, &Analysis)]) -> Vec<(&'static str, String)> {
    let x_label = "log10(l / L)";
    let mut s2 = LinePlot::new("Second-order structure function", x_label, "log S2");
    let mut sk = LinePlot::new("Skewness of increments", x_label, "S(l)");
    let mut fl = LinePlot::new("Flatness of increments", x_label, "log(F / 3)");
    let mut ze = LinePlot::new("Scaling exponents", "p", "zeta_p");
    let mut pd = LinePlot::new("Increment PDFs (shifted by lag)", "standardized increment", "log density");
    for (label, a) in items {
        let x = log_axis(a);
        let c = &a.curves;
        s2.push(Series::line(*label, x.clone(), c.log_s2.clone()).with_err(c.log_s2_std.clone()));
        sk.push(Series::line(*label, x.clone(), c.skewness.clone()).with_err(c.skewness_std.clone()));
        fl.push(Series::line(*label, x, c.log_flatness_over_3.clone()).with_err(c.log_flatness_over_3_std.clone()));
        ze.push(Series::line(*label, a.zeta.orders.clone(), a.zeta.zeta.clone()).with_err(a.zeta.stderr.clone()));
        for (k, p) in a.pdfs.iter().enumerate() {
            let shift = -2.0 * k as f64;
            let y = p.log_density.iter().map(|d| d.map_or(f64::NAN, |v| v + shift)).collect();
            pd.push(Series::line(format!("{label} l={}", p.lag), p.bin_centers.clone(), y));
        }
    }
    if let Some((_, a)) = items.first() {
        let x = log_axis(a);
        sk.push(Series::line("Gaussian", x.clone(), vec![0.0; x.len()]).dashed());
        fl.push(Series::line("Gaussian", x.clone(), vec![0.0; x.len()]).dashed());
        let p = a.zeta.orders.clone();
        ze.push(Series::line("K41 p/3", p.clone(), p.iter().map(|p| p / 3.0).collect()).dashed());
        for (k, pdf) in a.pdfs.iter().enumerate() {
            let shift = -2.0 * k as f64;
            let y = pdf
                .bin_centers
                .iter()
                .map(|z| -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln() + shift)
                .collect();
            let label = if k == 0 { "Gaussian" } else { "" };
            pd.push(Series::line(label, pdf.bin_centers.clone(), y).dashed());
        }
    }
    vec![
        ("log_s2.svg", s2.render()),
        ("skewness.svg", sk.render()),
        ("flatness.svg", fl.render()),
        ("zeta.svg", ze.render()),
        ("pdfs.svg", pd.render()),
    ]
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the three CSV tables and five plots. Returns the written paths.
pub fn write_analysis(a: &Analysis, label: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut files = vec![
        (STAT_CURVES_FILE, format_stat_curves(&stat_curve_rows(&a.curves, a.integral_scale))),
        (ZETA_FILE, format_zeta(&a.zeta)),
        (PDF_FILE, format_pdfs(&a.pdfs)),
    ];
    files.extend(plots(&[(label, a)]));
    let mut out = vec![];
    for (name, text) in files {
        let p = dir.join(name);
        write_text(&p, &text)?;
        out.push(p);
    }
    Ok(out)
}

pub const COMPARE_CURVES_HEADER: &str = "lag,abs_d_log_s2,abs_d_skew,abs_d_logF3";
pub const COMPARE_ZETA_HEADER: &str = "p,abs_d_zeta";

/// Absolute per-lag and per-order differences between two analyses.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub lags: Vec<usize>,
    pub d_log_s2: Vec<f64>,
    pub d_skew: Vec<f64>,
    pub d_log_f3: Vec<f64>,
    pub orders: Vec<f64>,
    pub d_zeta: Vec<f64>,
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

impl Comparison {
    pub fn max_d_log_s2(&self) -> f64 {
        max_of(&self.d_log_s2)
    }

    pub fn max_d_skew(&self) -> f64 {
        max_of(&self.d_skew)
    }

    pub fn max_d_log_f3(&self) -> f64 {
        max_of(&self.d_log_f3)
    }

    pub fn max_d_zeta(&self) -> f64 {
        max_of(&self.d_zeta)
    }

    pub fn format_curves(&self) -> String {
        let mut s = format!("{COMPARE_CURVES_HEADER}\n");
        for i in 0..self.lags.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.lags[i], self.d_log_s2[i], self.d_skew[i], self.d_log_f3[i]
            );
        }
        s
    }

    pub fn format_zeta(&self) -> String {
        let mut s = format!("{COMPARE_ZETA_HEADER}\n");
        for (p, d) in self.orders.iter().zip(&self.d_zeta) {
            let _ = writeln!(s, "{p},{d}");
        }
        s
    }

    /// One `key=value` line per maximum.
    pub fn summary(&self) -> String {
        format!(
            "max_abs_d_log_s2={}\nmax_abs_d_skew={}\nmax_abs_d_logF3={}\nmax_abs_d_zeta={}\n",
            self.max_d_log_s2(),
            self.max_d_skew(),
            self.max_d_log_f3(),
            self.max_d_zeta()
        )
    }
}

pub fn compare(a: &Analysis, b: &Analysis) -> Result<Comparison> {
    if a.curves.lags != b.curves.lags || a.zeta.orders != b.zeta.orders {
        return Err(Error::invalid("analyses use different lag grids or orders"));
    }
    let d = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| (p - q).abs()).collect() };
    Ok(Comparison {
        lags: a.curves.lags.clone(),
        d_log_s2: d(&a.curves.log_s2, &b.curves.log_s2),
        d_skew: d(&a.curves.skewness, &b.curves.skewness),
        d_log_f3: d(&a.curves.log_flatness_over_3, &b.curves.log_flatness_over_3),
        orders: a.zeta.orders.clone(),
        d_zeta: d(&a.zeta.zeta, &b.zeta.zeta),
    })
}

/// Writes difference tables, the summary and overlay plots.
pub fn write_comparison(
    c: &Comparison,
    (label_a, a): (&str, &Analysis),
    (label_b, b): (&str, &Analysis),
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if label_a == label_b {
        return Err(Error::invalid(format!("labels must differ, both are {label_a:?}")));
    }
    create_dir(dir)?;
    let mut files = vec![
        ("compare_curves.csv", c.format_curves()),
        ("compare_zeta.csv", c.format_zeta()),
        ("compare_summary.txt", c.summary()),
    ];
    files.extend(plots(&[(label_a, a), (label_b, b)]));
    let mut out = vec![];
    for (name, text) in files {
        let p = dir.join(name);
        write_text(&p, &text)?;
        out.push(p);
    }
    Ok(out)
}
