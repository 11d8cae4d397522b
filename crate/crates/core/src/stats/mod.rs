//! Multiscale statistics of increments: structure functions, skewness,
//! flatness, scaling exponents and increment PDFs.
//!
//! Everything here runs in 64-bit arithmetic with pairwise summation. The
//! gradient-capable counterpart used by the training loss lives in
//! [`differentiable`].

pub mod csv;
pub mod differentiable;
pub mod moments;
mod pdf;
mod zeta;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{FieldEnsemble, ScaleGrid};
use moments::{column_mean_std, pooled_moments_all, pooled_power_mean, row_moments};

pub use pdf::{increment_pdf, IncrementPdf, DEFAULT_PDF_LAGS};
pub use zeta::{fit_slope, zeta_fit, zeta_fit_curves, ZetaResult, DEFAULT_FIT_RANGE, DEFAULT_ORDERS};

/// How odd orders treat the sign of the increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentMode {
    Signed,
    Absolute,
}

fn check_lags(ens: &FieldEnsemble, grid: &ScaleGrid) -> Result<()> {
    if let Some(&l) = grid.lags().iter().find(|&&l| l >= ens.samples()) {
        return Err(Error::invalid(format!(
            "lag {l} is not below the realization length {}",
            ens.samples()
        )));
    }
    Ok(())
}

/// `S_p(l)`: mean of `(delta_l v)^p` (or `|delta_l v|^p`) over realizations and positions.
pub fn structure_function(
    ens: &FieldEnsemble,
    p: f64,
    grid: &ScaleGrid,
    mode: MomentMode,
) -> Result<Vec<f64>> {
    if !(p > 0.0) {
        return Err(Error::invalid(format!("order p must be positive, got {p}")));
    }
    check_lags(ens, grid)?;
    let signed = mode == MomentMode::Signed;
    Ok(grid
        .lags()
        .par_iter()
        .map(|&l| pooled_power_mean(ens, l, p, signed))
        .collect())
}

/// `S(l) = S_3 / S_2^{3/2}` with signed moments.
pub fn skewness_curve(ens: &FieldEnsemble, grid: &ScaleGrid) -> Result<Vec<f64>> {
    check_lags(ens, grid)?;
    pooled_moments_all(ens, grid.lags())
        .into_iter()
        .map(|m| {
            if m.m2 > 0.0 {
                Ok(m.skewness())
            } else {
                Err(zero_variance(m.lag))
            }
        })
        .collect()
}

/// `F(l) = S_4 / S_2^2`.
pub fn flatness_curve(ens: &FieldEnsemble, grid: &ScaleGrid) -> Result<Vec<f64>> {
    check_lags(ens, grid)?;
    pooled_moments_all(ens, grid.lags())
        .into_iter()
        .map(|m| {
            if m.m2 > 0.0 {
                Ok(m.flatness())
            } else {
                Err(zero_variance(m.lag))
            }
        })
        .collect()
}

/// `log(F(l) / 3)`, zero for Gaussian increments.
pub fn log_flatness_over_3(flatness: &[f64]) -> Vec<f64> {
    flatness.iter().map(|f| (f / 3.0).ln()).collect()
}

fn zero_variance(lag: usize) -> Error {
    Error::DegenerateScale {
        lag,
        reason: "second-order structure function is zero".into(),
    }
}

/// Per-realization and ensemble-summary curves of `log S_2`, `S` and `log(F/3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatCurves {
    pub lags: Vec<usize>,
    /// One row per realization, one column per lag.
    pub per_realization_log_s2: Vec<Vec<f64>>,
    pub per_realization_skewness: Vec<Vec<f64>>,
    pub per_realization_log_flatness_over_3: Vec<Vec<f64>>,
    pub log_s2: Vec<f64>,
    pub log_s2_std: Vec<f64>,
    pub skewness: Vec<f64>,
    pub skewness_std: Vec<f64>,
    pub log_flatness_over_3: Vec<f64>,
    pub log_flatness_over_3_std: Vec<f64>,
}

/// Curves of one realization, `[log S_2, S, log(F/3)]` per lag.
pub fn realization_curves(row: &[f64], lags: &[usize]) -> Result<Vec<[f64; 3]>> {
    lags.iter()
        .map(|&l| {
            let m = row_moments(row, l);
            if m.m2 > 0.0 {
                Ok([m.m2.ln(), m.skewness(), (m.flatness() / 3.0).ln()])
            } else {
                Err(zero_variance(l))
            }
        })
        .collect()
}

/// Curves computed independently per realization, then averaged.
pub fn stat_curves(ens: &FieldEnsemble, grid: &ScaleGrid) -> Result<StatCurves> {
    check_lags(ens, grid)?;
    let per: Vec<Vec<[f64; 3]>> = (0..ens.realizations())
        .into_par_iter()
        .map(|i| realization_curves(ens.row(i), grid.lags()))
        .collect::<Result<_>>()?;
    let pick = |k: usize| -> Vec<Vec<f64>> {
        per.iter()
            .map(|r| r.iter().map(|c| c[k]).collect())
            .collect()
    };
    let s2 = pick(0);
    let sk = pick(1);
    let fl = pick(2);
    let (log_s2, log_s2_std) = column_mean_std(&s2);
    let (skewness, skewness_std) = column_mean_std(&sk);
    let (log_flatness_over_3, log_flatness_over_3_std) = column_mean_std(&fl);
    Ok(StatCurves {
        lags: grid.lags().to_vec(),
        per_realization_log_s2: s2,
        per_realization_skewness: sk,
        per_realization_log_flatness_over_3: fl,
        log_s2,
        log_s2_std,
        skewness,
        skewness_std,
        log_flatness_over_3,
        log_flatness_over_3_std,
    })
}
