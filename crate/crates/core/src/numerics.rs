//! Log-space arithmetic shared by the lattice, head, and MWER code.
//!
//! Everything is `f64`. Negative infinity is the canonical log-zero and is
//! absorbing under addition with finite values; none of these routines turn a
//! pair of non-NaN inputs into NaN.

use crate::error::{Error, Result};

/// Log of zero probability.
pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// `ln(exp(a) + exp(b))`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// `ln Σ exp(vᵢ)` with max-shifting. Returns `-inf` iff every input is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyReduction);
    }
    Ok(log_sum_exp_nonempty(values))
}

pub(crate) fn log_sum_exp_nonempty(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(LOG_ZERO, f64::max);
    if max == LOG_ZERO {
        return LOG_ZERO;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(temperature))
    }
}

/// Log-softmax of `logits / temperature`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let scaled: Vec<f64> = logits.iter().map(|&z| z / temperature).collect();
    let norm = log_sum_exp_nonempty(&scaled);
    Ok(scaled.into_iter().map(|s| s - norm).collect())
}

/// Softmax of `logits / temperature`, max-shift stabilized.
pub fn stable_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(x)`; `ln(1 - sigmoid(x))` is `log_sigmoid(-x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
