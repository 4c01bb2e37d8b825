//! Voltage-indexed rate tables for tissue-scale integration.
//!
//! Every voltage-dependent quantity in the membrane model — gate targets,
//! gate decay factors for the tissue step size, and the voltage factors of
//! the non-gated currents — is sampled on a fine uniform voltage grid and
//! reconstructed by linear interpolation. One table lookup replaces roughly
//! forty transcendental evaluations per node per step; interpolation error
//! at 0.1 mV spacing sits orders of magnitude below the discretisation
//! error of the explicit step itself.
//!
//! The inward rectifier depends on the overpotential `V - E_K` rather than
//! `V` alone (potassium drifts slowly), so it gets its own axis.

use super::ionic::{v_gate_rates, voltage_factors, VoltageFactors};
use super::ionic::inward_rectifier_open;
use super::{IonParams, N_VGATES};

const V_MIN: f64 = -120.0;
const V_MAX: f64 = 80.0;
const U_MIN: f64 = -80.0;
const U_MAX: f64 = 220.0;
const STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
struct Row {
    inf: [f64; N_VGATES],
    tau: [f64; N_VGATES],
    /// e^{-dt/tau} for the table's build step size.
    decay: [f64; N_VGATES],
    vf: VoltageFactors,
}

/// Sampled rates for one parameter set and one step size.
#[derive(Debug, Clone)]
pub struct RateTable {
    rows: Vec<Row>,
    xk1: Vec<f64>,
    dt: f64,
    tau_f_scale: f64,
}

impl RateTable {
    /// Sample the voltage-dependent rates of `p`, precomputing gate decay
    /// factors for step size `dt`.
    pub fn new(p: &IonParams, dt: f64) -> Self {
        let n_v = ((V_MAX - V_MIN) / STEP).round() as usize + 1;
        let mut rows = Vec::with_capacity(n_v);
        for i in 0..n_v {
            let v = V_MIN + i as f64 * STEP;
            let (inf, tau) = v_gate_rates(p, v);
            let mut decay = [0.0; N_VGATES];
            for k in 0..N_VGATES {
                decay[k] = (-dt / tau[k]).exp();
            }
            rows.push(Row {
                inf,
                tau,
                decay,
                vf: voltage_factors(p, v),
            });
        }
        let n_u = ((U_MAX - U_MIN) / STEP).round() as usize + 1;
        let xk1 = (0..n_u)
            .map(|i| inward_rectifier_open(U_MIN + i as f64 * STEP))
            .collect();
        RateTable {
            rows,
            xk1,
            dt,
            tau_f_scale: p.tau_f_scale,
        }
    }

    /// Step size the decay factors were built for.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub(crate) fn tau_f_scale(&self) -> f64 {
        self.tau_f_scale
    }

    /// Interpolated gate targets plus either decay factors (when `dt`
    /// matches the build step; final flag true) or raw time constants
    /// (flag false), along with the voltage factors.
    #[allow(clippy::type_complexity)]
    pub(crate) fn gate_row(
        &self,
        v: f64,
        dt: f64,
    ) -> ([f64; N_VGATES], [f64; N_VGATES], VoltageFactors, bool) {
        let (i, w) = locate(v, V_MIN, V_MAX, self.rows.len());
        let (a, b) = (&self.rows[i], &self.rows[i + 1]);
        let exact = (dt - self.dt).abs() < 1e-14;

        let mut inf = [0.0; N_VGATES];
        let mut second = [0.0; N_VGATES];
        for k in 0..N_VGATES {
            inf[k] = a.inf[k] + w * (b.inf[k] - a.inf[k]);
            second[k] = if exact {
                a.decay[k] + w * (b.decay[k] - a.decay[k])
            } else {
                a.tau[k] + w * (b.tau[k] - a.tau[k])
            };
        }
        let vf = VoltageFactors {
            cal_a: a.vf.cal_a + w * (b.vf.cal_a - a.vf.cal_a),
            cal_b: a.vf.cal_b + w * (b.vf.cal_b - a.vf.cal_b),
            ncx_e1: a.vf.ncx_e1 + w * (b.vf.ncx_e1 - a.vf.ncx_e1),
            ncx_e2: a.vf.ncx_e2 + w * (b.vf.ncx_e2 - a.vf.ncx_e2),
            nak_f: a.vf.nak_f + w * (b.vf.nak_f - a.vf.nak_f),
            pk_f: a.vf.pk_f + w * (b.vf.pk_f - a.vf.pk_f),
        };
        (inf, second, vf, exact)
    }

    /// Interpolated inward-rectifier open fraction at overpotential `u`.
    pub(crate) fn xk1_row(&self, u: f64) -> f64 {
        let (i, w) = locate(u, U_MIN, U_MAX, self.xk1.len());
        self.xk1[i] + w * (self.xk1[i + 1] - self.xk1[i])
    }
}

/// Clamped table coordinates: lower sample index and interpolation weight.
fn locate(x: f64, min: f64, max: f64, n: usize) -> (usize, f64) {
    let clamped = x.clamp(min, max);
    let pos = (clamped - min) / STEP;
    let i = (pos as usize).min(n - 2);
    (i, pos - i as f64)
}

#[cfg(test)]
mod tests {
    use super::super::ionic::{advance, CellState};
    use super::*;

    #[test]
    fn interpolated_rates_match_the_analytic_formulas() {
        let p = IonParams::baseline();
        let t = RateTable::new(&p, 0.08);
        // Off-grid voltages spanning rest, upstroke and plateau. The sodium
        // inactivation rates switch formulas at -40 mV with a small genuine
        // jump, so the grid cell straddling -40 is exercised separately.
        for &v in &[-85.13, -62.077, -40.13, -39.99, -12.345, 0.01, 14.997, 35.55] {
            let (inf_t, tau_t, _, exact) = t.gate_row(v, 0.01);
            assert!(!exact, "0.01 differs from the build step");
            let (inf_a, tau_a) = v_gate_rates(&p, v);
            for k in 0..N_VGATES {
                assert!(
                    (inf_t[k] - inf_a[k]).abs() < 5e-4,
                    "gate {k} inf at {v}: {} vs {}",
                    inf_t[k],
                    inf_a[k]
                );
                let rel = (tau_t[k] - tau_a[k]).abs() / tau_a[k];
                assert!(rel < 5e-3, "gate {k} tau at {v}: rel err {rel}");
            }
        }

        // Inside the branch-switch cell the table bridges the two sodium
        // inactivation formulas; the value must stay between the branches.
        let (_, tau_mid, _, _) = t.gate_row(-40.05, 0.01);
        let (_, below) = v_gate_rates(&p, -40.1);
        let (_, above) = v_gate_rates(&p, -40.0);
        for k in [super::super::ionic::G_H, super::super::ionic::G_J] {
            let (lo, hi) = (below[k].min(above[k]), below[k].max(above[k]));
            assert!(
                (lo..=hi).contains(&tau_mid[k]),
                "gate {k} bridge {} outside [{lo}, {hi}]",
                tau_mid[k]
            );
        }
    }

    #[test]
    fn decay_factors_are_used_only_for_the_build_step() {
        let p = IonParams::baseline();
        let t = RateTable::new(&p, 0.08);
        let (_, decay, _, exact) = t.gate_row(-80.0, 0.08);
        assert!(exact);
        let (_, tau) = v_gate_rates(&p, -80.0);
        for k in 0..N_VGATES {
            let expect = (-0.08 / tau[k]).exp();
            assert!((decay[k] - expect).abs() < 1e-4, "gate {k}");
        }
    }

    #[test]
    fn out_of_range_voltages_clamp_instead_of_exploding() {
        let p = IonParams::baseline();
        let t = RateTable::new(&p, 0.08);
        let (inf_low, ..) = t.gate_row(-500.0, 0.08);
        let (inf_min, ..) = t.gate_row(V_MIN, 0.08);
        assert_eq!(inf_low, inf_min);
        let x_hi = t.xk1_row(1e6);
        assert!(x_hi.is_finite());
    }

    #[test]
    fn table_driven_pacing_reproduces_the_analytic_action_potential() {
        let p = IonParams::baseline();
        let dt = 0.08;
        let t = RateTable::new(&p, dt);
        let run = |lut: Option<&RateTable>| {
            let mut s = CellState::resting();
            let mut peak = f64::NEG_INFINITY;
            let mut samples = Vec::new();
            let mut time = 0.0;
            let mut step = 0usize;
            while time < 400.0 {
                let stim = if time < 1.0 { -52.0 } else { 0.0 };
                advance(&mut s, &p, lut, dt, stim);
                time += dt;
                step += 1;
                peak = peak.max(s.v);
                if step % 625 == 0 {
                    samples.push(s.v); // every 50 ms
                }
            }
            (peak, s.v, samples)
        };
        let (peak_a, rest_a, samp_a) = run(None);
        let (peak_t, rest_t, samp_t) = run(Some(&t));
        assert!((peak_a - peak_t).abs() < 1.0, "{peak_a} vs {peak_t}");
        assert!((rest_a - rest_t).abs() < 0.5);
        for (a, b) in samp_a.iter().zip(&samp_t) {
            assert!((a - b).abs() < 2.0, "sampled voltage {a} vs {b}");
        }
    }
}
