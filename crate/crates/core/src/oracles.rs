//! Stochastic fields with known statistics: Gaussian white noise, fractional
//! Brownian motion and the multifractal random walk.
//!
//! Each realization draws from its own ChaCha stream keyed by `(seed, row)`,
//! so parallel and sequential generation agree bit for bit.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::field::FieldEnsemble;

/// Largest length for which the exact Cholesky fallback is attempted.
pub const CHOLESKY_MAX: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleKind {
    Gaussian,
    Fbm { hurst: f64 },
    Mrw {
        hurst: f64,
        lambda2: f64,
        correlation_length: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSpec {
    pub kind: OracleKind,
    pub realizations: usize,
    pub samples: usize,
    pub seed: u64,
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.realizations == 0 || self.samples < 2 {
            return Err(Error::invalid(format!(
                "need at least 1 realization of 2 samples, got {} x {}",
                self.realizations, self.samples
            )));
        }
        let check_h = |h: f64| {
            if h > 0.0 && h < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("Hurst exponent must lie in (0, 1), got {h}")))
            }
        };
        match self.kind {
            OracleKind::Gaussian => Ok(()),
            OracleKind::Fbm { hurst } => check_h(hurst),
            OracleKind::Mrw {
                hurst,
                lambda2,
                correlation_length,
            } => {
                check_h(hurst)?;
                if !(0.0..=0.2).contains(&lambda2) {
                    return Err(Error::invalid(format!(
                        "intermittency must lie in [0, 0.2], got {lambda2}"
                    )));
                }
                if correlation_length == 0 || correlation_length > self.samples {
                    return Err(Error::invalid(format!(
                        "correlation length must lie in [1, {}], got {correlation_length}",
                        self.samples
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn generate(&self) -> Result<FieldEnsemble> {
        self.validate()?;
        let (r, n, seed) = (self.realizations, self.samples, self.seed);
        match self.kind {
            OracleKind::Gaussian => gaussian_noise(r, n, seed),
            OracleKind::Fbm { hurst } => fbm(r, n, hurst, seed),
            OracleKind::Mrw {
                hurst,
                lambda2,
                correlation_length,
            } => mrw(r, n, hurst, lambda2, correlation_length, seed),
        }
    }
}

fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    rng
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// iid standard normal samples.
pub fn gaussian_noise(realizations: usize, samples: usize, seed: u64) -> Result<FieldEnsemble> {
    OracleSpec {
        kind: OracleKind::Gaussian,
        realizations,
        samples,
        seed,
    }
    .validate()?;
    let rows: Vec<Vec<f64>> = (0..realizations)
        .into_par_iter()
        .map(|r| normals(&mut row_rng(seed, r), samples))
        .collect();
    FieldEnsemble::from_rows(&rows)
}

/// Autocovariance of unit-variance fractional Gaussian noise at lag `k`.
pub fn fgn_covariance(hurst: f64, k: usize) -> f64 {
    let h2 = 2.0 * hurst;
    let k = k as f64;
    0.5 * ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2))
}

/// Stationary Gaussian sampler for a covariance sequence `cov[0..n]`.
enum Sampler {
    Circulant {
        fft: Arc<dyn Fft<f64>>,
        sqrt_eig: Vec<f64>,
        n: usize,
    },
    Cholesky {
        lower: Vec<f64>,
        n: usize,
    },
}

impl Sampler {
    fn new(cov: &[f64]) -> Result<Self> {
        let n = cov.len();
        match Self::circulant(cov) {
            Ok(s) => Ok(s),
            Err(e) if n <= CHOLESKY_MAX => Self::cholesky(cov).map_err(|_| e),
            Err(e) => Err(e),
        }
    }

    fn circulant(cov: &[f64]) -> Result<Self> {
        let n = cov.len();
        let m = 2 * n;
        let mut row: Vec<Complex<f64>> = (0..m)
            .map(|j| {
                let k = if j <= n { j } else { m - j };
                Complex::new(if k < n { cov[k] } else { 0.0 }, 0.0)
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(m);
        fft.process(&mut row);
        let scale = cov[0].abs().max(f64::MIN_POSITIVE);
        let mut sqrt_eig = Vec::with_capacity(m);
        for (k, c) in row.iter().enumerate() {
            if c.re < -1e-9 * scale * m as f64 {
                return Err(Error::DegenerateInput(format!(
                    "circulant embedding of length {m} is not nonnegative (eigenvalue {k} = {:.3e})",
                    c.re
                )));
            }
            sqrt_eig.push((c.re.max(0.0) / m as f64).sqrt());
        }
        Ok(Sampler::Circulant { fft, sqrt_eig, n })
    }

    fn cholesky(cov: &[f64]) -> Result<Self> {
        let n = cov.len();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = cov[i - j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::DegenerateInput(
                            "covariance matrix is not positive definite".into(),
                        ));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Sampler::Cholesky { lower: l, n })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Sampler::Circulant { fft, sqrt_eig, n } => {
                let mut buf: Vec<Complex<f64>> = sqrt_eig
                    .iter()
                    .map(|&s| {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        Complex::new(s * re, s * im)
                    })
                    .collect();
                fft.process(&mut buf);
                buf[..*n].iter().map(|c| c.re).collect()
            }
            Sampler::Cholesky { lower, n } => {
                let z = normals(rng, *n);
                (0..*n)
                    .map(|i| (0..=i).map(|k| lower[i * n + k] * z[k]).sum())
                    .collect()
            }
        }
    }
}

fn cumsum(x: &mut [f64]) {
    let mut acc = 0.0;
    for v in x.iter_mut() {
        acc += *v;
        *v = acc;
    }
}

/// Fractional Brownian motion paths: cumulative sums of unit-variance fractional
/// Gaussian noise.
pub fn fbm(realizations: usize, samples: usize, hurst: f64, seed: u64) -> Result<FieldEnsemble> {
    OracleSpec {
        kind: OracleKind::Fbm { hurst },
        realizations,
        samples,
        seed,
    }
    .validate()?;
    let cov: Vec<f64> = (0..samples).map(|k| fgn_covariance(hurst, k)).collect();
    let sampler = Sampler::new(&cov)?;
    let rows: Vec<Vec<f64>> = (0..realizations)
        .into_par_iter()
        .map(|r| {
            let mut x = sampler.sample(&mut row_rng(seed, r));
            cumsum(&mut x);
            x
        })
        .collect();
    FieldEnsemble::from_rows(&rows)
}

/// Multifractal random walk: the cumulative sum of `eps_i * exp(omega_i)`, with
/// `eps` fractional Gaussian noise of exponent `hurst` and `omega` a Gaussian
/// sequence of covariance `lambda2 * ln(L_c / (d + 1))` for lags `d < L_c`.
/// The mean of `omega` is `-Var(omega)`, so `E[exp(2 omega)] = 1` and the
/// increment variance matches that of `fbm(hurst)`.
pub fn mrw(
    realizations: usize,
    samples: usize,
    hurst: f64,
    lambda2: f64,
    correlation_length: usize,
    seed: u64,
) -> Result<FieldEnsemble> {
    OracleSpec {
        kind: OracleKind::Mrw {
            hurst,
            lambda2,
            correlation_length,
        },
        realizations,
        samples,
        seed,
    }
    .validate()?;
    let cov_eps: Vec<f64> = (0..samples).map(|k| fgn_covariance(hurst, k)).collect();
    let eps_sampler = Sampler::new(&cov_eps)?;
    let lc = correlation_length as f64;
    let cov_omega: Vec<f64> = (0..samples)
        .map(|d| {
            if d < correlation_length {
                lambda2 * (lc / (d as f64 + 1.0)).ln()
            } else {
                0.0
            }
        })
        .collect();
    let var_omega = cov_omega[0];
    let omega_sampler = if var_omega > 0.0 {
        Some(Sampler::new(&cov_omega)?)
    } else {
        None
    };
    let rows: Vec<Vec<f64>> = (0..realizations)
        .into_par_iter()
        .map(|r| {
            let mut rng = row_rng(seed, r);
            let mut x = eps_sampler.sample(&mut rng);
            if let Some(s) = &omega_sampler {
                let omega = s.sample(&mut rng);
                for (xi, w) in x.iter_mut().zip(omega) {
                    *xi *= (w - var_omega).exp();
                }
            }
            cumsum(&mut x);
            x
        })
        .collect();
    FieldEnsemble::from_rows(&rows)
}
