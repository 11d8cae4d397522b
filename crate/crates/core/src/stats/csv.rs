//! CSV tables for stat curves, scaling exponents and increment PDFs.
//!
//! Floats are written with the shortest round-trip representation, so every
//! table parses back to identical values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{IncrementPdf, StatCurves, ZetaResult};

pub const STAT_CURVES_HEADER: &str =
    "lag,log_l_over_L,log_s2_mean,log_s2_std,skew_mean,skew_std,logF3_mean,logF3_std";
pub const ZETA_HEADER: &str = "p,zeta,stderr";
pub const PDF_HEADER: &str = "lag,bin_center,log_density";
/// Written in place of the log-density of an empty bin.
pub const EMPTY_BIN: &str = "NA";

/// One row of the stat-curve table. `log_l_over_l` is `log10(lag / L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatCurveRow {
    pub lag: usize,
    pub log_l_over_l: f64,
    pub log_s2_mean: f64,
    pub log_s2_std: f64,
    pub skew_mean: f64,
    pub skew_std: f64,
    pub log_f3_mean: f64,
    pub log_f3_std: f64,
}

pub fn stat_curve_rows(curves: &StatCurves, integral_scale: f64) -> Vec<StatCurveRow> {
    curves
        .lags
        .iter()
        .enumerate()
        .map(|(i, &lag)| StatCurveRow {
            lag,
            log_l_over_l: (lag as f64 / integral_scale).log10(),
            log_s2_mean: curves.log_s2[i],
            log_s2_std: curves.log_s2_std[i],
            skew_mean: curves.skewness[i],
            skew_std: curves.skewness_std[i],
            log_f3_mean: curves.log_flatness_over_3[i],
            log_f3_std: curves.log_flatness_over_3_std[i],
        })
        .collect()
}

pub fn format_stat_curves(rows: &[StatCurveRow]) -> String {
    let mut s = String::from(STAT_CURVES_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.lag,
            r.log_l_over_l,
            r.log_s2_mean,
            r.log_s2_std,
            r.skew_mean,
            r.skew_std,
            r.log_f3_mean,
            r.log_f3_std
        );
    }
    s
}

pub fn format_zeta(z: &ZetaResult) -> String {
    let mut s = String::from(ZETA_HEADER);
    s.push('\n');
    for i in 0..z.orders.len() {
        let _ = writeln!(s, "{},{},{}", z.orders[i], z.zeta[i], z.stderr[i]);
    }
    s
}

pub fn format_pdfs(pdfs: &[IncrementPdf]) -> String {
    let mut s = String::from(PDF_HEADER);
    s.push('\n');
    for p in pdfs {
        for (c, d) in p.bin_centers.iter().zip(&p.log_density) {
            match d {
                Some(v) => {
                    let _ = writeln!(s, "{},{},{}", p.lag, c, v);
                }
                None => {
                    let _ = writeln!(s, "{},{},{EMPTY_BIN}", p.lag, c);
                }
            }
        }
    }
    s
}

fn records<'a>(text: &'a str, header: &str, what: &str) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    let first = lines.next().unwrap_or_default().trim();
    if first != header {
        return Err(Error::format(what, format!("unexpected header {first:?}")));
    }
    let width = header.split(',').count();
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let fields: Vec<&str> = l.trim().split(',').collect();
            if fields.len() != width {
                Err(Error::format(
                    what,
                    format!("row {} has {} fields, expected {width}", i + 1, fields.len()),
                ))
            } else {
                Ok(fields)
            }
        })
        .collect()
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(what, format!("cannot parse {s:?}")))
}

pub fn parse_stat_curves(text: &str) -> Result<Vec<StatCurveRow>> {
    let what = "stat-curve csv";
    records(text, STAT_CURVES_HEADER, what)?
        .into_iter()
        .map(|f| {
            Ok(StatCurveRow {
                lag: num(f[0], what)?,
                log_l_over_l: num(f[1], what)?,
                log_s2_mean: num(f[2], what)?,
                log_s2_std: num(f[3], what)?,
                skew_mean: num(f[4], what)?,
                skew_std: num(f[5], what)?,
                log_f3_mean: num(f[6], what)?,
                log_f3_std: num(f[7], what)?,
            })
        })
        .collect()
}

/// Parses a zeta table; `fit_range` is not stored in the file.
pub fn parse_zeta(text: &str, fit_range: [f64; 2]) -> Result<ZetaResult> {
    let what = "zeta csv";
    let mut z = ZetaResult {
        orders: vec![],
        zeta: vec![],
        stderr: vec![],
        fit_range,
    };
    for f in records(text, ZETA_HEADER, what)? {
        z.orders.push(num(f[0], what)?);
        z.zeta.push(num(f[1], what)?);
        z.stderr.push(num(f[2], what)?);
    }
    Ok(z)
}

/// `(lag, bin_center, log_density)` triples; `None` for empty bins.
pub fn parse_pdfs(text: &str) -> Result<Vec<(usize, f64, Option<f64>)>> {
    let what = "pdf csv";
    records(text, PDF_HEADER, what)?
        .into_iter()
        .map(|f| {
            let d = if f[2] == EMPTY_BIN {
                None
            } else {
                Some(num(f[2], what)?)
            };
            Ok((num(f[0], what)?, num(f[1], what)?, d))
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldEnsemble, ScaleGrid};
    use crate::oracles::gaussian_noise;
    use crate::stats::{increment_pdf, stat_curves, zeta_fit};

    #[test]
    fn tables_round_trip() {
        let e = gaussian_noise(3, 1024, 21).unwrap();
        let g = ScaleGrid::default_for(1024).unwrap();
        let c = stat_curves(&e, &g).unwrap();
        let rows = stat_curve_rows(&c, 2350.0);
        assert_eq!(parse_stat_curves(&format_stat_curves(&rows)).unwrap(), rows);

        let z = zeta_fit(&e, &[1.0, 2.0, 3.5], [2.0, 200.0], &g).unwrap();
        assert_eq!(parse_zeta(&format_zeta(&z), z.fit_range).unwrap(), z);

        let p = increment_pdf(&e, 4, 64).unwrap();
        let parsed = parse_pdfs(&format_pdfs(std::slice::from_ref(&p))).unwrap();
        assert_eq!(parsed.len(), 64);
        for (i, (lag, c, d)) in parsed.into_iter().enumerate() {
            assert_eq!(lag, 4);
            assert_eq!(c, p.bin_centers[i]);
            assert_eq!(d, p.log_density[i]);
        }
    }

    #[test]
    fn empty_bins_use_sentinel() {
        // two well separated clusters leave empty bins in the middle
        let mut v = vec![0.0; 64];
        for (i, x) in v.iter_mut().enumerate() {
            *x = if i % 2 == 0 { 0.0 } else { 10.0 } + (i % 5) as f64 * 0.01;
        }
        let e = FieldEnsemble::new(v, 1, 64).unwrap();
        let p = increment_pdf(&e, 1, 32).unwrap();
        assert!(p.log_density.iter().any(Option::is_none));
        let text = format_pdfs(&[p]);
        assert!(text.contains(",NA\n"));
        assert!(!text.contains("inf"));
    }

    #[test]
    fn rejects_wrong_header() {
        assert!(parse_zeta("a,b,c\n1,2,3\n", [1.0, 2.0]).is_err());
        assert!(parse_stat_curves("lag\n").is_err());
    }
}
