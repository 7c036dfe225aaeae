use serde::{Deserialize, Serialize};

use super::{QkdError, DEFAULT_BUFFER_BITS, MAC_KEY_BITS};
use crate::types::ValidatorId;

/// Measured average key rates (distance km, bits/s) used to calibrate the
/// attenuation model. The 5 km and 50 km points drive [`reference_fit`]; the
/// 10 km point is kept out of the fit as a held-out check.
pub const REFERENCE_RATES: [(f64, f64); 3] = [(5.0, 13.1e6), (10.0, 10.3e6), (50.0, 1.16e6)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QkdLinkConfig {
    pub endpoint_a: ValidatorId,
    pub endpoint_b: ValidatorId,
    pub distance_km: f64,
    /// Base rate `R0` in bits/s.
    pub base_rate_r0: f64,
    /// Attenuation `lambda` per km.
    pub attenuation_lambda: f64,
    /// Buffer capacity in bits.
    pub buffer_capacity: u64,
}

impl QkdLinkConfig {
    /// A link at `distance_km` using fitted channel parameters and the default buffer.
    pub fn with_fit(a: ValidatorId, b: ValidatorId, distance_km: f64, fit: &ChannelFit) -> Self {
        QkdLinkConfig {
            endpoint_a: a,
            endpoint_b: b,
            distance_km,
            base_rate_r0: fit.base_rate_r0,
            attenuation_lambda: fit.attenuation_lambda,
            buffer_capacity: DEFAULT_BUFFER_BITS,
        }
    }

    pub fn validate(&self) -> Result<(), QkdError> {
        if !(self.distance_km >= 0.0) || !self.distance_km.is_finite() {
            return Err(QkdError::InvalidParameter(format!(
                "distance_km must be >= 0, got {}",
                self.distance_km
            )));
        }
        if !(self.base_rate_r0 > 0.0) || !self.base_rate_r0.is_finite() {
            return Err(QkdError::InvalidParameter(format!(
                "base_rate_r0 must be > 0, got {}",
                self.base_rate_r0
            )));
        }
        if !(self.attenuation_lambda >= 0.0) || !self.attenuation_lambda.is_finite() {
            return Err(QkdError::InvalidParameter(format!(
                "attenuation_lambda must be >= 0, got {}",
                self.attenuation_lambda
            )));
        }
        if self.buffer_capacity == 0 {
            return Err(QkdError::InvalidParameter(
                "buffer_capacity must be > 0".into(),
            ));
        }
        if self.endpoint_a == self.endpoint_b {
            return Err(QkdError::InvalidParameter(format!(
                "link endpoints must differ ({})",
                self.endpoint_a
            )));
        }
        Ok(())
    }

    /// Key rate of this link at its configured distance.
    pub fn rate(&self) -> Result<f64, QkdError> {
        key_rate(self.distance_km, self)
    }

    pub fn connects(&self, v: ValidatorId) -> bool {
        self.endpoint_a == v || self.endpoint_b == v
    }
}

/// `R0 * exp(-lambda * d)` using the rate parameters of `config`.
pub fn key_rate(distance_km: f64, config: &QkdLinkConfig) -> Result<f64, QkdError> {
    if !(distance_km >= 0.0) || !distance_km.is_finite() {
        return Err(QkdError::InvalidParameter(format!(
            "distance must be >= 0, got {distance_km}"
        )));
    }
    Ok(config.base_rate_r0 * (-config.attenuation_lambda * distance_km).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelFit {
    pub base_rate_r0: f64,
    pub attenuation_lambda: f64,
    /// Relative residual `(predicted - observed) / observed` per input point.
    pub residuals: Vec<f64>,
}

impl ChannelFit {
    pub fn predict(&self, distance_km: f64) -> f64 {
        self.base_rate_r0 * (-self.attenuation_lambda * distance_km).exp()
    }
}

/// Fits `(R0, lambda)` to measured `(distance_km, rate)` points.
///
/// Two points are solved in closed form. Three or more are fitted by ordinary
/// least squares on `ln(rate) = ln(R0) - lambda * d`.
pub fn fit_channel_params(points: &[(f64, f64)]) -> Result<ChannelFit, QkdError> {
    if points.len() < 2 {
        return Err(QkdError::FitError(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    for &(d, r) in points {
        if !(d >= 0.0) || !d.is_finite() {
            return Err(QkdError::FitError(format!("invalid distance {d}")));
        }
        if !(r > 0.0) || !r.is_finite() {
            return Err(QkdError::FitError(format!("non-positive rate {r} at {d} km")));
        }
    }
    for (i, &(di, _)) in points.iter().enumerate() {
        if points[i + 1..].iter().any(|&(dj, _)| dj == di) {
            return Err(QkdError::FitError(format!("duplicate distance {di} km")));
        }
    }

    let (ln_r0, lambda) = if points.len() == 2 {
        let (d1, r1) = points[0];
        let (d2, r2) = points[1];
        let lambda = (r1 / r2).ln() / (d2 - d1);
        (r1.ln() + lambda * d1, lambda)
    } else {
        let n = points.len() as f64;
        let mean_d = points.iter().map(|p| p.0).sum::<f64>() / n;
        let mean_y = points.iter().map(|p| p.1.ln()).sum::<f64>() / n;
        let sxy: f64 = points
            .iter()
            .map(|&(d, r)| (d - mean_d) * (r.ln() - mean_y))
            .sum();
        let sxx: f64 = points.iter().map(|&(d, _)| (d - mean_d).powi(2)).sum();
        let slope = sxy / sxx;
        (mean_y - slope * mean_d, -slope)
    };

    if lambda < 0.0 {
        return Err(QkdError::FitError(format!(
            "fitted attenuation is negative ({lambda}); rates grow with distance"
        )));
    }
    let mut fit = ChannelFit {
        base_rate_r0: ln_r0.exp(),
        attenuation_lambda: lambda,
        residuals: Vec::new(),
    };
    fit.residuals = points
        .iter()
        .map(|&(d, r)| (fit.predict(d) - r) / r)
        .collect();
    Ok(fit)
}

/// Closed-form fit through the 5 km and 50 km reference rates.
pub fn reference_fit() -> ChannelFit {
    fit_channel_params(&[REFERENCE_RATES[0], REFERENCE_RATES[2]])
        .expect("reference rates are valid")
}

/// True iff the key rate strictly exceeds the demand.
pub fn sustainability_check(rate_bps: f64, traffic_bps: f64) -> bool {
    rate_bps > traffic_bps
}

/// Key demand of a payload stream once each packet also draws a fresh MAC key.
pub fn traffic_demand_bps(payload_bps: f64, payload_bits_per_packet: u64) -> f64 {
    payload_bps * (payload_bits_per_packet + MAC_KEY_BITS) as f64 / payload_bits_per_packet as f64
}
