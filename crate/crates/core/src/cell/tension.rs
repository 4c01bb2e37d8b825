//! Voltage-driven active tension.
//!
//! Tension relaxes toward a target proportional to normalised voltage, with
//! a rate that switches between slow (during the action potential) and fast
//! (near rest) so contraction follows the plateau but releases promptly on
//! repolarisation:
//!
//! ```text
//! dTa/dt = eps(Vn) * (k_ta * Vn - Ta),   Vn = clamp((V + 86)/126, 0, 1)
//! eps(Vn) = eps0        for Vn >= 0.005
//!         = 10 * eps0   for Vn <  0.005
//! ```
//!
//! The equation is linear in `Ta` for a frozen voltage, so one step is an
//! exact exponential relaxation — unconditionally stable at any step size.

/// Parameters of the tension relaxation law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensionParams {
    /// Peak isometric tension scale, kPa.
    pub k_ta: f64,
    /// Baseline relaxation rate, 1/ms.
    pub eps0: f64,
    /// Voltage mapped to normalised 0 (rest), mV.
    pub v_rest: f64,
    /// Voltage span mapped to normalised 1, mV.
    pub v_span: f64,
    /// Normalised-voltage threshold below which relaxation speeds up.
    pub rest_threshold: f64,
    /// Rate multiplier below the threshold.
    pub rest_speedup: f64,
}

impl Default for TensionParams {
    fn default() -> Self {
        TensionParams {
            k_ta: 9.58,
            eps0: 1.0,
            v_rest: -86.0,
            v_span: 126.0,
            rest_threshold: 0.005,
            rest_speedup: 10.0,
        }
    }
}

impl TensionParams {
    /// Normalised voltage in `[0, 1]`.
    pub fn normalised(&self, v_mv: f64) -> f64 {
        ((v_mv - self.v_rest) / self.v_span).clamp(0.0, 1.0)
    }
}

/// Advance tension `ta` (kPa) by `dt` under membrane voltage `v_mv`.
pub fn advance_tension(ta: f64, v_mv: f64, p: &TensionParams, dt: f64) -> f64 {
    let vn = p.normalised(v_mv);
    let eps = if vn < p.rest_threshold {
        p.rest_speedup * p.eps0
    } else {
        p.eps0
    };
    let target = p.k_ta * vn;
    target + (ta - target) * (-eps * dt).exp()
}
