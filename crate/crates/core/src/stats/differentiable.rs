//! Gradient-capable `[log S_2, S, log(F/3)]` curves for the training loss.
//!
//! Moments are accumulated in 64-bit regardless of the graph precision so the
//! values agree with [`super::stat_curves`]. Before the log and the ratios,
//! `S_2` and `F` are floored at [`STAT_EPS`]; the floor passes gradients
//! straight through, so a degenerate row still yields finite gradients.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::nn::Real;

pub const STAT_EPS: f64 = 1e-12;

static CLAMP_EVENTS: AtomicUsize = AtomicUsize::new(0);

/// Number of (row, lag) pairs clamped since process start.
pub fn clamp_events() -> usize {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// Moments of one row at one lag, kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct LagCache {
    m2c: f64,
    m3: f64,
    m4: f64,
    fc: f64,
}

/// Writes `[log S_2, S, log(F/3)]` for each lag into `out` (length `3 * lags.len()`,
/// lag-major).
pub fn row_forward<T: Real>(x: &[T], lags: &[usize], out: &mut [T]) -> Vec<LagCache> {
    let mut cache = Vec::with_capacity(lags.len());
    for (j, &l) in lags.iter().enumerate() {
        let n = x.len() - l;
        let (mut s2, mut s3, mut s4) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..n {
            let d = x[i + l].as_f64() - x[i].as_f64();
            let d2 = d * d;
            s2 += d2;
            s3 += d2 * d;
            s4 += d2 * d2;
        }
        let nf = n as f64;
        let (m2, m3, m4) = (s2 / nf, s3 / nf, s4 / nf);
        let mut clamped = false;
        let m2c = if m2 < STAT_EPS {
            clamped = true;
            STAT_EPS
        } else {
            m2
        };
        let f = m4 / (m2c * m2c);
        let fc = if f < STAT_EPS {
            clamped = true;
            STAT_EPS
        } else {
            f
        };
        if clamped {
            CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        }
        out[3 * j] = T::of(m2c.ln());
        out[3 * j + 1] = T::of(m3 / m2c.powf(1.5));
        out[3 * j + 2] = T::of((fc / 3.0).ln());
        cache.push(LagCache { m2c, m3, m4, fc });
    }
    cache
}

/// Accumulates `dL/dx` into `grad_x` given `dL/d(curves)` for one row.
pub fn row_backward<T: Real>(
    x: &[T],
    lags: &[usize],
    cache: &[LagCache],
    grad_out: &[T],
    grad_x: &mut [T],
) {
    for (j, (&l, c)) in lags.iter().zip(cache).enumerate() {
        let g_log_s2 = grad_out[3 * j].as_f64();
        let g_skew = grad_out[3 * j + 1].as_f64();
        let g_flat = grad_out[3 * j + 2].as_f64();
        if g_log_s2 == 0.0 && g_skew == 0.0 && g_flat == 0.0 {
            continue;
        }
        let m2c = c.m2c;
        let g2 = g_log_s2 / m2c - 1.5 * g_skew * c.m3 / m2c.powf(2.5)
            - 2.0 * g_flat * c.m4 / (c.fc * m2c * m2c * m2c);
        let g3 = g_skew / m2c.powf(1.5);
        let g4 = g_flat / (c.fc * m2c * m2c);
        let n = x.len() - l;
        let nf = n as f64;
        for i in 0..n {
            let d = x[i + l].as_f64() - x[i].as_f64();
            let d2 = d * d;
            let gd = T::of((2.0 * g2 * d + 3.0 * g3 * d2 + 4.0 * g4 * d2 * d) / nf);
            grad_x[i + l] += gd;
            grad_x[i] -= gd;
        }
    }
}
