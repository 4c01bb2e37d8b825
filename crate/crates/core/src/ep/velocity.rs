//! Conduction-velocity measurement on a tissue sheet.
//!
//! A plane wave is launched from the face of the domain at the negative end
//! of a chosen direction; two probe nodes at 25% and 75% of the domain's
//! extent along that direction record their first 0 mV upcrossing, and the
//! velocity is the projected probe separation over the activation delay.

use super::{EpError, EpSystem};
use crate::cell::{IonParams, RateTable, STIM_AMPLITUDE, STIM_DURATION};

/// Result of one planar-wave velocity measurement.
#[derive(Debug, Clone, Copy)]
pub struct CvMeasurement {
    /// Conduction velocity in mm/ms.
    pub velocity: f64,
    /// Activation time of the near probe (ms from stimulus onset).
    pub t_near: f64,
    /// Activation time of the far probe.
    pub t_far: f64,
    /// Projected distance between the probes in mm.
    pub distance: f64,
    /// System indices of the probe nodes.
    pub probes: [usize; 2],
}

const UPSTROKE_LEVEL: f64 = 0.0;

/// Measure the planar conduction velocity of `sys` along `direction`,
/// starting every node from rest. The stimulated band is two mean edge
/// lengths deep; `max_time` bounds the wait for the far probe (ms).
pub fn conduction_velocity(
    sys: &mut EpSystem,
    p: &IonParams,
    lut: Option<&RateTable>,
    direction: [f64; 2],
    max_time: f64,
) -> Result<CvMeasurement, EpError> {
    let norm = (direction[0] * direction[0] + direction[1] * direction[1]).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(EpError::BadParameter(
            "propagation direction has zero length".into(),
        ));
    }
    let dir = [direction[0] / norm, direction[1] / norm];
    if !(max_time > 0.0) {
        return Err(EpError::BadParameter(format!(
            "non-positive measurement window {max_time}"
        )));
    }

    let n = sys.n_sys();
    // Projected (s) and transverse (t) coordinates of every system node.
    let mut s = vec![0.0; n];
    let mut tr = vec![0.0; n];
    for i in 0..n {
        let [x, y] = sys.mesh().coords()[sys.node_map().full_of(i)];
        s[i] = x * dir[0] + y * dir[1];
        tr[i] = -x * dir[1] + y * dir[0];
    }
    let s_min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let s_max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let t_mid = {
        let lo = tr.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = tr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    let extent = s_max - s_min;
    if !(extent > 0.0) {
        return Err(EpError::BadParameter(
            "domain has no extent along the requested direction".into(),
        ));
    }

    let band = 2.0 * sys.mesh().mean_edge_length();
    let stim: Vec<(usize, f64)> = (0..n)
        .filter(|&i| s[i] <= s_min + band)
        .map(|i| (i, STIM_AMPLITUDE))
        .collect();
    if stim.is_empty() {
        return Err(EpError::BadParameter(
            "no nodes inside the stimulus band".into(),
        ));
    }

    // Probe stations at 25% and 75% of the extent, biased toward the domain
    // mid-line to stay clear of lateral boundary effects.
    let pick = |target: f64| -> usize {
        (0..n)
            .min_by(|&a, &b| {
                let da = (s[a] - target).hypot(0.5 * (tr[a] - t_mid));
                let db = (s[b] - target).hypot(0.5 * (tr[b] - t_mid));
                da.partial_cmp(&db).expect("finite coordinates")
            })
            .expect("non-empty system")
    };
    let near = pick(s_min + 0.25 * extent);
    let far = pick(s_min + 0.75 * extent);
    let distance = s[far] - s[near];
    if !(distance > 0.0) {
        return Err(EpError::BadParameter(format!(
            "probes are not separated along the direction ({distance} mm)"
        )));
    }

    let dt = sys.dt();
    let mut states = sys.resting_states();
    let mut prev = [states[near].v, states[far].v];
    let mut t_cross = [f64::NAN; 2];
    let steps = (max_time / dt).ceil() as usize;
    for k in 0..steps {
        let t0 = k as f64 * dt;
        let active: &[(usize, f64)] = if t0 < STIM_DURATION { &stim } else { &[] };
        sys.step(&mut states, p, lut, active)?;
        for (slot, &node) in [near, far].iter().enumerate() {
            let v = states[node].v;
            if t_cross[slot].is_nan() && prev[slot] < UPSTROKE_LEVEL && v >= UPSTROKE_LEVEL {
                let frac = (UPSTROKE_LEVEL - prev[slot]) / (v - prev[slot]);
                t_cross[slot] = t0 + frac * dt;
            }
            prev[slot] = v;
        }
        if !t_cross[0].is_nan() && !t_cross[1].is_nan() {
            break;
        }
    }

    if t_cross[0].is_nan() || t_cross[1].is_nan() {
        return Err(EpError::NoActivation {
            probe: if t_cross[0].is_nan() { near } else { far },
            waited: max_time,
        });
    }
    let delay = t_cross[1] - t_cross[0];
    if !(delay > 0.0) {
        return Err(EpError::BadParameter(format!(
            "probes activated out of order (delay {delay} ms)"
        )));
    }
    Ok(CvMeasurement {
        velocity: distance / delay,
        t_near: t_cross[0],
        t_far: t_cross[1],
        distance,
        probes: [near, far],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ep::DiffusionSpec;
    use crate::mesh::generate_square_mesh;

    #[test]
    fn planar_wave_speed_is_physiological_along_the_fibre() {
        let mesh = generate_square_mesh(8.0, 0.35, 7).unwrap();
        let d = DiffusionSpec {
            fiber: [1.0, 0.0],
            ..Default::default()
        };
        let mut sys = EpSystem::new(&mesh, d, 0.08, 1e-9).unwrap();
        let p = IonParams::baseline();
        let lut = RateTable::new(&p, 0.08);
        let cv = conduction_velocity(&mut sys, &p, Some(&lut), [1.0, 0.0], 60.0).unwrap();
        assert!(
            cv.velocity > 0.3 && cv.velocity < 0.9,
            "velocity {} mm/ms",
            cv.velocity
        );
        assert!(cv.t_far > cv.t_near);
        assert!(cv.distance > 2.0);
    }

    #[test]
    fn zero_direction_is_rejected() {
        let mesh = generate_square_mesh(4.0, 0.5, 7).unwrap();
        let mut sys = EpSystem::new(&mesh, DiffusionSpec::default(), 0.08, 1e-9).unwrap();
        let p = IonParams::baseline();
        let err = conduction_velocity(&mut sys, &p, None, [0.0, 0.0], 10.0).unwrap_err();
        assert!(matches!(err, EpError::BadParameter(_)));
    }

    #[test]
    fn too_short_a_window_reports_the_unreached_probe() {
        let mesh = generate_square_mesh(6.0, 0.4, 7).unwrap();
        let mut sys = EpSystem::new(&mesh, DiffusionSpec::default(), 0.08, 1e-9).unwrap();
        let p = IonParams::baseline();
        let lut = RateTable::new(&p, 0.08);
        let err = conduction_velocity(&mut sys, &p, Some(&lut), [1.0, 0.0], 2.0).unwrap_err();
        assert!(matches!(err, EpError::NoActivation { .. }), "{err:?}");
    }
}
