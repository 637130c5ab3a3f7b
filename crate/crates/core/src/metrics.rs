//! Capacity-weighted load balance.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("no devices")]
    Empty,
    #[error("{busy} busy times for {peak} peak rates")]
    Length { busy: usize, peak: usize },
    #[error("busy times must be >= 0 with at least one positive, and peaks positive")]
    Values,
}

/// `1 - sum((td_max - td_i) * peak_i) / (td_max * sum(peak_i))` as a fraction in `(0, 1]`.
///
/// `td` is per-device busy time and `peak` per-device FLOP/s.
pub fn load_balance_eta(td: &[f64], peak: &[f64]) -> Result<f64, MetricError> {
    if td.is_empty() {
        return Err(MetricError::Empty);
    }
    if td.len() != peak.len() {
        return Err(MetricError::Length {
            busy: td.len(),
            peak: peak.len(),
        });
    }
    let td_max = td.iter().copied().fold(0.0, f64::max);
    let valid = td.iter().all(|t| t.is_finite() && *t >= 0.0)
        && peak.iter().all(|p| p.is_finite() && *p > 0.0)
        && td_max > 0.0;
    if !valid {
        return Err(MetricError::Values);
    }
    let idle: f64 = td.iter().zip(peak).map(|(t, p)| (td_max - t) * p).sum();
    Ok(1.0 - idle / (td_max * peak.iter().sum::<f64>()))
}
