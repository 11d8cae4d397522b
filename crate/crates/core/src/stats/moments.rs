//! Deterministic 64-bit moment accumulation.

use rayon::prelude::*;

use crate::field::FieldEnsemble;

const LEAF: usize = 64;

/// Pairwise (cascade) summation with a fixed split tree, so the result only
/// depends on the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= LEAF {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pooled raw moments of the lag-`l` increments of every realization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncrementMoments {
    pub lag: usize,
    pub count: usize,
    /// Mean of `d^2`.
    pub m2: f64,
    /// Mean of `d^3` (signed).
    pub m3: f64,
    /// Mean of `d^4`.
    pub m4: f64,
}

impl IncrementMoments {
    pub fn skewness(&self) -> f64 {
        self.m3 / self.m2.powf(1.5)
    }

    pub fn flatness(&self) -> f64 {
        self.m4 / (self.m2 * self.m2)
    }
}

struct Sums {
    s2: f64,
    s3: f64,
    s4: f64,
}

fn row_sums(row: &[f64], lag: usize, buf: &mut Vec<f64>) -> Sums {
    let n = row.len() - lag;
    buf.clear();
    buf.extend((0..n).map(|i| row[i + lag] - row[i]));
    let d2: Vec<f64> = buf.iter().map(|d| d * d).collect();
    let s2 = pairwise_sum(&d2);
    let d3: Vec<f64> = buf.iter().zip(&d2).map(|(d, q)| d * q).collect();
    let s3 = pairwise_sum(&d3);
    let d4: Vec<f64> = d2.iter().map(|q| q * q).collect();
    let s4 = pairwise_sum(&d4);
    Sums { s2, s3, s4 }
}

/// Raw increment moments of a single realization.
pub fn row_moments(row: &[f64], lag: usize) -> IncrementMoments {
    let mut buf = Vec::new();
    let s = row_sums(row, lag, &mut buf);
    let n = (row.len() - lag) as f64;
    IncrementMoments {
        lag,
        count: row.len() - lag,
        m2: s.s2 / n,
        m3: s.s3 / n,
        m4: s.s4 / n,
    }
}

/// Moments pooled over all realizations and positions.
pub fn pooled_moments(ens: &FieldEnsemble, lag: usize) -> IncrementMoments {
    let mut buf = Vec::new();
    let mut s2 = Vec::with_capacity(ens.realizations());
    let mut s3 = Vec::with_capacity(ens.realizations());
    let mut s4 = Vec::with_capacity(ens.realizations());
    for row in ens.rows() {
        let s = row_sums(row, lag, &mut buf);
        s2.push(s.s2);
        s3.push(s.s3);
        s4.push(s.s4);
    }
    let count = ens.realizations() * (ens.samples() - lag);
    let n = count as f64;
    IncrementMoments {
        lag,
        count,
        m2: pairwise_sum(&s2) / n,
        m3: pairwise_sum(&s3) / n,
        m4: pairwise_sum(&s4) / n,
    }
}

/// [`pooled_moments`] for every lag, lags processed in parallel.
pub fn pooled_moments_all(ens: &FieldEnsemble, lags: &[usize]) -> Vec<IncrementMoments> {
    lags.par_iter().map(|&l| pooled_moments(ens, l)).collect()
}

/// Pooled mean of `|d|^p` (or signed `d^p`, `p` integer) at one lag.
pub fn pooled_power_mean(ens: &FieldEnsemble, lag: usize, p: f64, signed: bool) -> f64 {
    let mut per_row = Vec::with_capacity(ens.realizations());
    let mut vals = Vec::with_capacity(ens.samples());
    for row in ens.rows() {
        vals.clear();
        vals.extend((0..row.len() - lag).map(|i| {
            let d = row[i + lag] - row[i];
            if signed {
                signed_pow(d, p)
            } else {
                d.abs().powf(p)
            }
        }));
        per_row.push(pairwise_sum(&vals));
    }
    pairwise_sum(&per_row) / (ens.realizations() * (ens.samples() - lag)) as f64
}

fn signed_pow(d: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
        d.powi(p as i32)
    } else {
        // non-integer orders of negative numbers are undefined; keep the sign
        d.signum() * d.abs().powf(p)
    }
}

/// Mean and population standard deviation of each column of a row-major matrix.
pub fn column_mean_std(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    let n = rows.len() as f64;
    let mut mean = Vec::with_capacity(cols);
    let mut std = Vec::with_capacity(cols);
    let mut col = Vec::with_capacity(rows.len());
    for j in 0..cols {
        col.clear();
        col.extend(rows.iter().map(|r| r[j]));
        let m = pairwise_sum(&col) / n;
        let dev: Vec<f64> = col.iter().map(|v| (v - m) * (v - m)).collect();
        mean.push(m);
        std.push((pairwise_sum(&dev) / n).sqrt());
    }
    (mean, std)
}
