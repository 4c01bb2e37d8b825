//! Spiral initiation: stimulus, cut, hold, settle, checkpoint.
//!
//! A stimulus current on a thin strip along the left face launches a
//! planar wave. When the cut rule fires (at a fixed time, or when the
//! front crosses a fixed position), the lower half of the domain is held
//! at the resting voltage for a short window, amputating half of the wave;
//! the surviving free end curls into a rotor, which is then left to settle.
//! The final state is checkpointed.
//!
//! Initiation always runs the healthy baseline parameterisation: the
//! variant under study is swapped in when the checkpoint is resumed, so
//! that every variant starts from one and the same established spiral.

use std::path::Path;

use crate::cell::CellState;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::run::{write_postmortem, Coupled, Experiment, Phase};
use super::{CutRule, SimError};

/// Width of the stimulated strip, in fine-mesh edge lengths: the boundary
/// column plus roughly one interior column, enough to overcome the
/// diffusive loading at any resolution.
const STIM_STRIP_EDGES: f64 = 1.6;

/// Sanity window for the wavefront position at a timed cut, as fractions
/// of the domain side: below, the wave launched too slowly (or not at
/// all); above, it is already leaving the domain and no free end would
/// remain to curl.
const FRONT_WINDOW: (f64, f64) = (0.3, 0.95);

/// Runs the initiation protocol and writes the checkpoint to `path`.
pub fn init_spiral(exp: &Experiment, path: &Path) -> Result<Checkpoint, SimError> {
    let fingerprint = exp.config.fingerprint();
    let mut coupled = Coupled::new(exp, Phase::Init)?;
    if let Err(e) = init_loop(exp, &mut coupled) {
        let at_ms = coupled.t_ms();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let _ = std::fs::create_dir_all(dir);
        let postmortem = write_postmortem(&coupled, fingerprint, dir);
        return Err(SimError::Stage {
            stage: "init",
            at_ms,
            source: Box::new(e),
            postmortem,
        });
    }
    let ck = coupled.checkpoint(fingerprint);
    save_checkpoint(&ck, path)?;
    log::info!(
        "initiation complete at t = {:.1} ms, checkpoint {} ({} nodes)",
        ck.t_ms,
        path.display(),
        ck.states.len()
    );
    Ok(ck)
}

fn init_loop(exp: &Experiment, c: &mut Coupled) -> Result<(), SimError> {
    let cfg = &exp.config;
    let p = &cfg.protocol;
    let dt = cfg.numerics.dt_ms;
    let per = cfg.numerics.ep_steps_per_mech;
    let side = cfg.mesh.side_mm;
    let rest_v = CellState::resting().v;

    // Node bookkeeping in the reference frame, in system indexing.
    let coords = exp.fine.coords();
    let map = c.ep.node_map();
    let stim_width = STIM_STRIP_EDGES * cfg.mesh.edge_mm;
    let stim: Vec<(usize, f64)> = map
        .sys_nodes()
        .iter()
        .enumerate()
        .filter(|&(_, &full)| coords[full][0] <= stim_width)
        .map(|(sys, _)| (sys, p.stim_amplitude))
        .collect();
    if stim.is_empty() {
        return Err(SimError::Protocol(
            "no conducting nodes on the stimulated strip".into(),
        ));
    }
    let hold: Vec<usize> = map
        .sys_nodes()
        .iter()
        .enumerate()
        .filter(|&(_, &full)| coords[full][1] < side / 2.0)
        .map(|(sys, _)| sys)
        .collect();
    let sys_x: Vec<f64> = map.sys_nodes().iter().map(|&full| coords[full][0]).collect();
    let front_of = |states: &[CellState]| -> Option<f64> {
        states
            .iter()
            .zip(&sys_x)
            .filter(|(s, _)| s.v > 0.0)
            .map(|(_, &x)| x)
            .fold(None, |acc, x| Some(acc.map_or(x, |a: f64| a.max(x))))
    };

    let rule = p.cut_rule();
    let mut cut_at: Option<f64> = None;
    let n_steps = (p.settle_time_ms / dt).round() as u64;
    log::info!(
        "initiating: {} stimulated nodes, {n_steps} steps to t = {} ms",
        stim.len(),
        p.settle_time_ms
    );

    for step in 0..n_steps {
        let t_start = step as f64 * dt;
        let active: &[(usize, f64)] = if t_start + 1e-9 < p.stim_duration_ms {
            &stim
        } else {
            &[]
        };
        c.ep_step(active)?;
        if c.mech_due(per) {
            c.mech_update(exp)?;
        }
        let t = c.t_ms();

        if cut_at.is_none() {
            match rule {
                CutRule::AtTime(tc) if t + 1e-9 >= tc => {
                    let Some(front) = front_of(&c.states) else {
                        return Err(SimError::Protocol(format!(
                            "no wavefront anywhere at the {tc} ms cut"
                        )));
                    };
                    let (lo, hi) = (FRONT_WINDOW.0 * side, FRONT_WINDOW.1 * side);
                    if front < lo || front > hi {
                        return Err(SimError::Protocol(format!(
                            "wavefront at x = {front:.1} mm at the {tc} ms cut, \
                             outside the usable window [{lo:.1}, {hi:.1}] mm"
                        )));
                    }
                    cut_at = Some(t);
                    log::info!("cut at t = {t:.2} ms, front at x = {front:.1} mm");
                }
                CutRule::FrontCrosses(x) => {
                    if front_of(&c.states).is_some_and(|front| front >= x) {
                        cut_at = Some(t);
                        log::info!("front crossed x = {x} mm, cut at t = {t:.2} ms");
                    }
                }
                _ => {}
            }
        }
        if let Some(tc) = cut_at {
            if t <= tc + p.hold_duration_ms + 1e-9 {
                for &i in &hold {
                    c.states[i].v = rest_v;
                }
            }
        }
    }

    if matches!(rule, CutRule::FrontCrosses(_)) && cut_at.is_none() {
        return Err(SimError::Protocol(
            "the wavefront never reached the configured cut position".into(),
        ));
    }
    if !c.states.iter().any(|s| s.v > -40.0) {
        return Err(SimError::Protocol(
            "the wave extinguished before the end of initiation".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::checkpoint::load_checkpoint;
    use crate::sim::{ExperimentConfig, SimError};

    fn quick_config(dir: &std::path::Path, protocol: &str) -> ExperimentConfig {
        let text = format!(
            r#"
[experiment]
tissue = "control"
slope = "1.1"
domain = "static"
end_time_ms = 60.0
output_dir = "{}"

[mesh]
side_mm = 10.0
edge_mm = 0.9
refine_levels = 2
seed = 3

[protocol]
{protocol}
"#,
            dir.display()
        );
        ExperimentConfig::from_toml_str(&text).unwrap()
    }

    #[test]
    fn initiation_is_deterministic_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(
            dir.path(),
            "cut_front_x_mm = 5.0\nhold_duration_ms = 4.0\nsettle_time_ms = 24.0",
        );
        let exp = Experiment::build(cfg).unwrap();
        let p1 = dir.path().join("a.ck");
        let p2 = dir.path().join("b.ck");
        let ck1 = init_spiral(&exp, &p1).unwrap();
        let ck2 = init_spiral(&exp, &p2).unwrap();
        assert_eq!(ck1, ck2, "identical protocols must produce identical states");
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "checkpoint files must be byte-identical"
        );

        // The file loads back against this experiment and resumes.
        let loaded = load_checkpoint(&p1, exp.config.fingerprint()).unwrap();
        assert_eq!(loaded, ck1);
        let resumed = Coupled::resume(&exp, &loaded).unwrap();
        assert_eq!(resumed.t_ms(), ck1.t_ms);

        // The cut actually happened: the lower half was recently held at
        // rest while the upper half still carries the wave.
        let coords = exp.fine.coords();
        let sys_nodes = resumed.ep.node_map().sys_nodes();
        let upper_max = ck1
            .states
            .iter()
            .enumerate()
            .filter(|&(i, _)| coords[sys_nodes[i]][1] > 6.0)
            .map(|(_, s)| s.v)
            .fold(f64::MIN, f64::max);
        assert!(
            upper_max > 0.0,
            "upper half should still be excited, max {upper_max}"
        );
    }

    #[test]
    fn a_premature_cut_is_a_protocol_error_with_a_postmortem() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(
            dir.path(),
            "cut_time_ms = 2.0\nhold_duration_ms = 4.0\nsettle_time_ms = 24.0",
        );
        let exp = Experiment::build(cfg).unwrap();
        let err = init_spiral(&exp, &dir.path().join("x.ck")).unwrap_err();
        match err {
            SimError::Stage {
                stage,
                source,
                postmortem,
                ..
            } => {
                assert_eq!(stage, "init");
                assert!(matches!(*source, SimError::Protocol(_)), "{source}");
                let pm = postmortem.expect("postmortem checkpoint written");
                assert!(pm.exists());
            }
            other => panic!("expected a stage error, got {other}"),
        }
    }

    #[test]
    fn an_unreachable_front_position_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        // The wave cannot cross x = 9.5 within 6 ms.
        let cfg = quick_config(
            dir.path(),
            "cut_front_x_mm = 9.5\nhold_duration_ms = 2.0\nsettle_time_ms = 6.0",
        );
        let exp = Experiment::build(cfg).unwrap();
        let err = init_spiral(&exp, &dir.path().join("x.ck")).unwrap_err();
        match err {
            SimError::Stage { stage, source, .. } => {
                assert_eq!(stage, "init");
                assert!(matches!(*source, SimError::Protocol(_)), "{source}");
            }
            other => panic!("expected a stage error, got {other}"),
        }
    }
}
