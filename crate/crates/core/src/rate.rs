//! Linear-rate fits of error traces.

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum RateError {
    #[error("trace never drops below {0:e}; no fit window")]
    NoWindowStart(f64),
    #[error("trace never drops below {0:e} after entering the window")]
    NoWindowEnd(f64),
    #[error("fit window has only {0} points")]
    TooShort(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    /// Per-iteration contraction factor `exp(slope)`.
    pub rate: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (usize, usize),
}

/// Least squares of `ln(error_t)` on `t` from the first value below
/// `start` through the first value below `end`.
pub fn fit_linear_rate(errors: &[f64], start: f64, end: f64) -> Result<RateFit, RateError> {
    let a = errors
        .iter()
        .position(|&e| e < start)
        .ok_or(RateError::NoWindowStart(start))?;
    let b = a + errors[a..]
        .iter()
        .position(|&e| e < end)
        .ok_or(RateError::NoWindowEnd(end))?;
    let len = b - a + 1;
    if len < 3 {
        return Err(RateError::TooShort(len));
    }
    let ts = (a..=b).map(|t| t as f64);
    let ls = errors[a..=b].iter().map(|e| libm::log(*e));
    let k = len as f64;
    let mt = ts.clone().sum::<f64>() / k;
    let ml = ls.clone().sum::<f64>() / k;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (t, l) in ts.zip(ls) {
        sxy += (t - mt) * (l - ml);
        sxx += (t - mt) * (t - mt);
        syy += (l - ml) * (l - ml);
    }
    let slope = sxy / sxx;
    let intercept = ml - slope * mt;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit {
        rate: libm::exp(slope),
        slope,
        intercept,
        r_squared,
        window: (a, b),
    })
}
