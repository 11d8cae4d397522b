use crate::error::{Error, Result};
use crate::field::FieldEnsemble;

use super::moments::pairwise_sum;

/// Lags (in sampling distances) at which increment PDFs are reported by default.
pub const DEFAULT_PDF_LAGS: [usize; 9] = [2, 4, 8, 16, 64, 256, 1024, 4096, 10000];

/// Histogram density of centered, standardized increments at one lag.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementPdf {
    pub lag: usize,
    pub bin_centers: Vec<f64>,
    /// `None` marks an empty bin.
    pub log_density: Vec<Option<f64>>,
    pub n_bins: usize,
    pub bin_width: f64,
}

impl IncrementPdf {
    pub fn density(&self) -> Vec<f64> {
        self.log_density
            .iter()
            .map(|d| d.map_or(0.0, f64::exp))
            .collect()
    }
}

/// Standardized increments pooled over realizations.
pub fn standardized_increments(ens: &FieldEnsemble, lag: usize) -> Result<Vec<f64>> {
    if lag == 0 || lag >= ens.samples() {
        return Err(Error::invalid(format!(
            "lag {lag} outside [1, {})",
            ens.samples()
        )));
    }
    let mut d: Vec<f64> = Vec::with_capacity(ens.realizations() * (ens.samples() - lag));
    for row in ens.rows() {
        d.extend((0..row.len() - lag).map(|i| row[i + lag] - row[i]));
    }
    let n = d.len() as f64;
    let mean = pairwise_sum(&d) / n;
    let dev: Vec<f64> = d.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / n;
    if !(var > 0.0) {
        return Err(Error::DegenerateScale {
            lag,
            reason: "increments have zero variance".into(),
        });
    }
    let sd = var.sqrt();
    d.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    Ok(d)
}

/// Histogram on the symmetric support `[-max|z|, max|z|]` split into `n_bins` bins.
pub fn increment_pdf(ens: &FieldEnsemble, lag: usize, n_bins: usize) -> Result<IncrementPdf> {
    if n_bins < 16 {
        return Err(Error::invalid(format!("need at least 16 bins, got {n_bins}")));
    }
    let z = standardized_increments(ens, lag)?;
    let edge = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let width = 2.0 * edge / n_bins as f64;
    let mut counts = vec![0u64; n_bins];
    for &v in &z {
        let b = (((v + edge) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let total = z.len() as f64;
    let bin_centers = (0..n_bins)
        .map(|b| -edge + (b as f64 + 0.5) * width)
        .collect();
    let log_density = counts
        .iter()
        .map(|&c| (c > 0).then(|| (c as f64 / (total * width)).ln()))
        .collect();
    Ok(IncrementPdf {
        lag,
        bin_centers,
        log_density,
        n_bins,
        bin_width: width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::gaussian_noise;

    #[test]
    fn density_integrates_to_one() {
        let e = gaussian_noise(2, 2048, 1).unwrap();
        let p = increment_pdf(&e, 3, 40).unwrap();
        let integral: f64 = p.density().iter().map(|d| d * p.bin_width).sum();
        assert!((integral - 1.0).abs() < 1e-3);
        assert_eq!(p.bin_centers.len(), 40);
        // symmetric support
        assert!((p.bin_centers[0] + p.bin_centers[39]).abs() < 1e-12);
    }

    #[test]
    fn standardization_is_forced() {
        let e = gaussian_noise(2, 1024, 4).unwrap();
        let scaled: Vec<f64> = e.data().iter().map(|v| 5.0 * v + 3.0).collect();
        let e = FieldEnsemble::new(scaled, 2, 1024).unwrap();
        let z = standardized_increments(&e, 16).unwrap();
        let n = z.len() as f64;
        let m = z.iter().sum::<f64>() / n;
        let v = z.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-3);
    }

    #[test]
    fn errors() {
        let c = FieldEnsemble::new(vec![1.0; 64], 1, 64).unwrap();
        assert!(matches!(
            increment_pdf(&c, 2, 32),
            Err(Error::DegenerateScale { lag: 2, .. })
        ));
        let e = gaussian_noise(1, 64, 1).unwrap();
        assert!(increment_pdf(&e, 2, 8).is_err());
        assert!(increment_pdf(&e, 64, 32).is_err());
    }

    #[test]
    fn default_lags() {
        assert_eq!(DEFAULT_PDF_LAGS, [2, 4, 8, 16, 64, 256, 1024, 4096, 10000]);
    }
}
