use crate::error::{Error, Result};
use crate::field::{FieldEnsemble, ScaleGrid};

use super::{structure_function, MomentMode};

/// Inertial-range fit window, in sampling distances.
pub const DEFAULT_FIT_RANGE: [f64; 2] = [17.0, 274.0];

pub const DEFAULT_ORDERS: [f64; 9] = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0];

/// Fitted scaling exponents `zeta_p` with regression standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ZetaResult {
    pub orders: Vec<f64>,
    pub zeta: Vec<f64>,
    pub stderr: Vec<f64>,
    pub fit_range: [f64; 2],
}

impl ZetaResult {
    pub fn get(&self, p: f64) -> Option<f64> {
        self.orders
            .iter()
            .position(|&q| q == p)
            .map(|i| self.zeta[i])
    }
}

/// Ordinary least squares slope and its standard error.
pub fn fit_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .sum();
    let stderr = if x.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, stderr)
}

/// Fits `log S_p` against `log l` for already-computed structure functions.
///
/// `curves[k][j]` is `S_{orders[k]}` at `lags[j]`.
pub fn zeta_fit_curves(
    lags: &[usize],
    orders: &[f64],
    curves: &[Vec<f64>],
    fit_range: [f64; 2],
) -> Result<ZetaResult> {
    let idx: Vec<usize> = lags
        .iter()
        .enumerate()
        .filter(|(_, &l)| l as f64 >= fit_range[0] && l as f64 <= fit_range[1])
        .map(|(i, _)| i)
        .collect();
    if idx.len() < 3 {
        return Err(Error::invalid(format!(
            "fit range [{}, {}] contains {} lags; at least 3 are needed",
            fit_range[0],
            fit_range[1],
            idx.len()
        )));
    }
    let x: Vec<f64> = idx.iter().map(|&i| (lags[i] as f64).ln()).collect();
    let mut zeta = Vec::with_capacity(orders.len());
    let mut stderr = Vec::with_capacity(orders.len());
    for (k, curve) in curves.iter().enumerate() {
        let mut y = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = curve[i];
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::DegenerateScale {
                    lag: lags[i],
                    reason: format!("S_{} = {s} cannot be log-fitted", orders[k]),
                });
            }
            y.push(s.ln());
        }
        let (slope, se) = fit_slope(&x, &y);
        zeta.push(slope);
        stderr.push(se);
    }
    Ok(ZetaResult {
        orders: orders.to_vec(),
        zeta,
        stderr,
        fit_range,
    })
}

/// Scaling exponents from absolute-moment structure functions inside `fit_range`.
pub fn zeta_fit(
    ens: &FieldEnsemble,
    orders: &[f64],
    fit_range: [f64; 2],
    grid: &ScaleGrid,
) -> Result<ZetaResult> {
    let in_range = grid.lags_in(fit_range[0], fit_range[1]);
    if in_range.len() < 3 {
        return Err(Error::invalid(format!(
            "fit range [{}, {}] contains {} grid lags; at least 3 are needed",
            fit_range[0],
            fit_range[1],
            in_range.len()
        )));
    }
    let sub = ScaleGrid::new(in_range, grid.integral_scale, grid.kolmogorov_scale)?;
    let curves = orders
        .iter()
        .map(|&p| structure_function(ens, p, &sub, MomentMode::Absolute))
        .collect::<Result<Vec<_>>>()?;
    zeta_fit_curves(sub.lags(), orders, &curves, fit_range)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_recovered_for_any_prefactor() {
        let lags: Vec<usize> = vec![10, 17, 30, 55, 100, 180, 274, 400];
        for c in [0.01, 1.0, 250.0] {
            let curve: Vec<f64> = lags.iter().map(|&l| c * (l as f64).powf(0.7)).collect();
            let z = zeta_fit_curves(&lags, &[2.0], &[curve], DEFAULT_FIT_RANGE).unwrap();
            assert!((z.zeta[0] - 0.7).abs() < 1e-10);
            assert!(z.stderr[0] < 1e-10);
        }
    }

    #[test]
    fn too_few_lags_in_range() {
        let lags = vec![1, 2, 20, 300];
        let curve = vec![1.0; 4];
        assert!(matches!(
            zeta_fit_curves(&lags, &[1.0], &[curve], DEFAULT_FIT_RANGE),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn non_positive_moment_is_degenerate() {
        let lags = vec![20, 40, 80];
        let curve = vec![1.0, 0.0, 2.0];
        assert!(matches!(
            zeta_fit_curves(&lags, &[1.0], &[curve], DEFAULT_FIT_RANGE),
            Err(Error::DegenerateScale { lag: 40, .. })
        ));
    }

    #[test]
    fn default_constants() {
        assert_eq!(DEFAULT_FIT_RANGE, [17.0, 274.0]);
        assert_eq!(DEFAULT_ORDERS.len(), 9);
    }

    #[test]
    fn slope_stderr_matches_hand_value() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 0.0, 3.0, 2.0];
        let (s, se) = fit_slope(&x, &y);
        // sxx = 5, sxy = 3 -> slope 0.6; residual SSE = 3.2 -> se = sqrt(3.2/2/5)
        assert!((s - 0.6).abs() < 1e-12);
        assert!((se - (0.32f64).sqrt()).abs() < 1e-12);
    }
}
