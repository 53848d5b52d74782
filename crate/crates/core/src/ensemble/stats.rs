use thiserror::Error;

pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
pub enum DomainError {
    #[error("DomainError: Wilson interval needs at least one trial")]
    NoTrials,
    #[error("DomainError: {successes} successes out of {trials} trials")]
    TooMany { successes: u64, trials: u64 },
}

/// Wilson score interval for `successes` out of `trials`, unrounded.
pub fn wilson(successes: u64, trials: u64, z: f64) -> Result<(f64, f64), DomainError> {
    if trials == 0 {
        return Err(DomainError::NoTrials);
    }
    if successes > trials {
        return Err(DomainError::TooMany { successes, trials });
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

/// Rounds to three decimals for reporting.
pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// 95% interval rounded to three decimals.
pub fn wilson_ci(successes: u64, trials: u64) -> Result<(f64, f64), DomainError> {
    let (lo, hi) = wilson(successes, trials, Z95)?;
    Ok((round3(lo), round3(hi)))
}
