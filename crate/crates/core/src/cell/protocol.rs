//! Single-cell pacing protocols and restitution analysis.
//!
//! Pacing applies a -52 pA/pF, 1 ms square stimulus at the top of every
//! cycle. A beat's activation time is the upward -40 mV crossing (linearly
//! interpolated between steps), its duration (APD90) runs from activation to
//! the downward crossing of `rest + 0.1 * (peak - rest)`, and a beat counts
//! as captured only if it reaches positive voltage.
//!
//! Dynamic restitution paces down a ladder of cycle lengths without pauses,
//! collecting (diastolic interval, duration) points from the last two beats
//! at each cycle length so alternans contributes both branches. The maximum
//! slope is estimated by finite differences over the sorted curve, skipping
//! pairs closer than 2 ms in diastolic interval where the quotient would
//! amplify measurement noise.

use super::ionic::{advance, CellState, IonParams};
use super::CellError;

/// Stimulus amplitude, pA/pF (negative depolarises).
pub const STIM_AMPLITUDE: f64 = -52.0;
/// Stimulus duration, ms.
pub const STIM_DURATION: f64 = 1.0;
/// Voltage threshold whose upward crossing marks activation, mV.
pub const ACTIVATION_THRESHOLD: f64 = -40.0;
/// Smallest diastolic-interval difference a slope quotient may divide by.
pub const MIN_DI_SPACING: f64 = 2.0;

/// Per-beat measurements from a pacing run.
#[derive(Debug, Clone, Copy)]
pub struct BeatSummary {
    /// Cycle length this beat was paced at, ms.
    pub cycle_length: f64,
    /// Voltage at stimulus onset, mV.
    pub rest_v: f64,
    /// Maximum voltage reached, mV.
    pub peak_v: f64,
    /// Maximum upstroke velocity, mV/ms.
    pub max_dvdt: f64,
    /// Activation time within the beat, ms (NaN if never activated).
    pub t_activation: f64,
    /// Action potential duration at 90% repolarisation, ms (NaN if the beat
    /// was not captured or had not repolarised before the next stimulus).
    pub apd90: f64,
    /// Whether the beat reached positive voltage.
    pub captured: bool,
}

/// One point of a restitution curve.
#[derive(Debug, Clone, Copy)]
pub struct RestitutionPoint {
    pub cycle_length: f64,
    /// Diastolic interval preceding the beat, ms.
    pub di: f64,
    /// Duration of the beat, ms.
    pub apd90: f64,
}

/// Pace `n_beats` at cycle length `cl`, mutating `state` so ladders can be
/// chained. Returns one summary per beat.
pub fn pace_cell(
    p: &IonParams,
    state: &mut CellState,
    cl: f64,
    n_beats: usize,
    dt: f64,
) -> Result<Vec<BeatSummary>, CellError> {
    check_timing(cl, dt)?;
    let steps = (cl / dt).round() as usize;
    let mut beats = Vec::with_capacity(n_beats);
    for _ in 0..n_beats {
        beats.push(run_beat(p, state, cl, steps, dt, None));
    }
    Ok(beats)
}

/// Run a single paced beat, recording `(t, V)` at every step. The trace
/// starts at stimulus onset with the pre-stimulus state.
pub fn beat_trace(
    p: &IonParams,
    state: &mut CellState,
    cl: f64,
    dt: f64,
) -> Result<(BeatSummary, Vec<(f64, f64)>), CellError> {
    check_timing(cl, dt)?;
    let steps = (cl / dt).round() as usize;
    let mut trace = Vec::with_capacity(steps + 1);
    let summary = run_beat(p, state, cl, steps, dt, Some(&mut trace));
    Ok((summary, trace))
}

fn check_timing(cl: f64, dt: f64) -> Result<(), CellError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(CellError::BadParameter(format!("step size {dt}")));
    }
    if !(cl > 2.0 * STIM_DURATION) || !cl.is_finite() {
        return Err(CellError::BadParameter(format!(
            "cycle length {cl} too short for a {STIM_DURATION} ms stimulus"
        )));
    }
    Ok(())
}

fn run_beat(
    p: &IonParams,
    state: &mut CellState,
    cl: f64,
    steps: usize,
    dt: f64,
    mut trace: Option<&mut Vec<(f64, f64)>>,
) -> BeatSummary {
    let rest_v = state.v;
    let mut peak_v = state.v;
    let mut max_dvdt = 0.0f64;
    let mut t_activation = f64::NAN;
    let mut t_repolarised = f64::NAN;

    if let Some(tr) = trace.as_deref_mut() {
        tr.push((0.0, state.v));
    }
    for k in 0..steps {
        let t = k as f64 * dt;
        let stim = if t < STIM_DURATION { STIM_AMPLITUDE } else { 0.0 };
        let v_prev = state.v;
        advance(state, p, None, dt, stim);
        let t_next = t + dt;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((t_next, state.v));
        }

        peak_v = peak_v.max(state.v);
        max_dvdt = max_dvdt.max((state.v - v_prev) / dt);
        if t_activation.is_nan() && v_prev < ACTIVATION_THRESHOLD && state.v >= ACTIVATION_THRESHOLD
        {
            let frac = (ACTIVATION_THRESHOLD - v_prev) / (state.v - v_prev);
            t_activation = t + frac * dt;
        }
        // 90% repolarisation relative to this beat's own baseline and peak.
        if t_repolarised.is_nan() && !t_activation.is_nan() && t > t_activation {
            let v90 = rest_v + 0.1 * (peak_v - rest_v);
            if v_prev > v90 && state.v <= v90 {
                let frac = (v_prev - v90) / (v_prev - state.v);
                t_repolarised = t + frac * dt;
            }
        }
    }

    let captured = peak_v > 0.0;
    let apd90 = if captured && !t_activation.is_nan() && !t_repolarised.is_nan() {
        t_repolarised - t_activation
    } else {
        f64::NAN
    };
    BeatSummary {
        cycle_length: cl,
        rest_v,
        peak_v,
        max_dvdt,
        t_activation,
        apd90,
        captured,
    }
}

/// Default cycle-length ladder for dynamic restitution, ms. Spacing tightens
/// toward short cycles where the curve is steepest.
pub fn standard_cl_ladder() -> Vec<f64> {
    vec![
        800.0, 600.0, 500.0, 450.0, 400.0, 370.0, 340.0, 320.0, 300.0, 285.0, 270.0, 255.0,
        240.0, 230.0, 220.0, 210.0, 200.0, 190.0, 180.0, 170.0, 160.0,
    ]
}

/// Dynamic restitution: pace down `cls` without pauses, `beats_per_cl` beats
/// each, and collect (DI, APD90) from the last two beats per cycle length.
/// Stops when capture is lost.
pub fn dynamic_restitution(
    p: &IonParams,
    cls: &[f64],
    beats_per_cl: usize,
    dt: f64,
) -> Result<Vec<RestitutionPoint>, CellError> {
    if beats_per_cl < 3 {
        return Err(CellError::BadParameter(
            "need at least 3 beats per cycle length".into(),
        ));
    }
    let mut state = CellState::resting();
    let mut points = Vec::new();
    for &cl in cls {
        let beats = pace_cell(p, &mut state, cl, beats_per_cl, dt)?;
        let lost = beats[beats.len() - 2..]
            .iter()
            .all(|b| !b.captured || b.apd90.is_nan());
        // A beat's diastolic interval ends at its own activation and starts
        // at the previous beat's 90% repolarisation.
        for w in beats.windows(2).rev().take(2) {
            let (prev, this) = (&w[0], &w[1]);
            if prev.apd90.is_nan() || this.apd90.is_nan() {
                continue;
            }
            let di = cl + this.t_activation - prev.t_activation - prev.apd90;
            if di > 0.0 {
                points.push(RestitutionPoint {
                    cycle_length: cl,
                    di,
                    apd90: this.apd90,
                });
            }
        }
        if lost {
            break;
        }
    }
    Ok(points)
}

/// Maximum finite-difference slope of the restitution curve, over pairs of
/// points at least [`MIN_DI_SPACING`] apart in diastolic interval. Returns
/// 0.0 when fewer than two usable points exist.
pub fn max_restitution_slope(points: &[RestitutionPoint]) -> f64 {
    let mut sorted: Vec<&RestitutionPoint> = points
        .iter()
        .filter(|p| p.di.is_finite() && p.apd90.is_finite())
        .collect();
    sorted.sort_by(|a, b| a.di.partial_cmp(&b.di).unwrap());
    let mut best: f64 = 0.0;
    for i in 1..sorted.len() {
        // Compare against the nearest earlier point far enough away.
        for j in (0..i).rev() {
            let ddi = sorted[i].di - sorted[j].di;
            if ddi >= MIN_DI_SPACING {
                best = best.max((sorted[i].apd90 - sorted[j].apd90) / ddi);
                break;
            }
        }
    }
    best
}
