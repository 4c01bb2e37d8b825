//! The coupled electromechanics engine: builds the embedded mesh pair,
//! advances membrane kinetics and diffusion on the fine mesh, and every few
//! steps restricts active tension to the coarse mesh, solves the
//! incompressible mechanics, and moves the fine mesh through the embedding.
//!
//! Static domains skip the mechanics entirely; the voltage field then
//! evolves on the reference geometry. Deforming domains run the full loop:
//! tension restriction, Newton solve (warm-started by linear extrapolation
//! from the last two solutions), and a geometry push that re-evaluates
//! every fine node through its coarse element's quadratic displacement.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cell::{
    advance_tension, CellState, IonParams, RateTable, TensionParams,
};
use crate::ep::EpSystem;
use crate::mech::{
    extrapolate, Material, MechSystem, NewtonSettings, NewtonSolver, SolveReport,
};
use crate::mesh::{
    carve_fibrosis, generate_square_mesh, refine_uniform, CarveReport, EmbeddingMap, TriMesh,
};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::classify::{OnlineClassifier, StabilityVerdict, ANALYSIS_INTERVAL_MS};
use super::restrict::restrict_tension;
use super::{DomainMode, ExperimentConfig, SimError};

/// Refactor the mechanics preconditioner from scratch at least this often
/// (in solves), even if every solve in between succeeded on the cached one.
const MECH_REFRESH_SOLVES: usize = 50;

/// Which parameterisation a system is built with: initiation always uses
/// the healthy baseline, the run phase uses the configured variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Phase {
    Init,
    Run,
}

/// The static description of one experiment: configuration plus the mesh
/// pair it plays out on.
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Coarse mechanics mesh.
    pub coarse: TriMesh,
    /// Fine electrophysiology mesh (reference configuration), with
    /// non-conducting patches carved if configured.
    pub fine: TriMesh,
    pub map: EmbeddingMap,
    pub carve: Option<CarveReport>,
}

impl Experiment {
    /// Generates the coarse mesh, refines it into the fine mesh, and
    /// carves fibrosis. Deterministic in the configured seeds.
    pub fn build(config: ExperimentConfig) -> Result<Self, SimError> {
        config.validate()?;
        let m = &config.mesh;
        let coarse = generate_square_mesh(m.side_mm, m.coarse_edge_mm(), m.seed)?;
        let (mut fine, map) = refine_uniform(&coarse, m.refine_levels)?;
        let carve = match &config.fibrosis {
            Some(f) => Some(carve_fibrosis(&mut fine, &f.spec())?),
            None => None,
        };
        log::info!(
            "meshes: coarse {} elements, fine {} elements / {} nodes{}",
            coarse.n_tris(),
            fine.n_tris(),
            fine.n_nodes(),
            match &carve {
                Some(c) => format!(
                    ", carved {:.2}% in {} patches",
                    100.0 * c.achieved_fraction,
                    c.n_patches
                ),
                None => String::new(),
            }
        );
        Ok(Experiment {
            config,
            coarse,
            fine,
            map,
            carve,
        })
    }
}

/// Counters accumulated over a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunStats {
    pub ep_steps: u64,
    /// Diffusion-solve Krylov iterations, summed.
    pub ep_gmres_iters: u64,
    pub mech_solves: u64,
    pub newton_iters: u64,
    pub preconditioner_rebuilds: u64,
    pub wall_s: f64,
}

/// Mechanics half of the coupled state.
pub(crate) struct MechBlock {
    pub sys: MechSystem,
    solver: NewtonSolver,
    pub x: Vec<f64>,
    pub x_prev: Vec<f64>,
    /// Scratch: deformed fine-node coordinates.
    coords: Vec<[f64; 2]>,
    solves_since_refactor: usize,
}

impl MechBlock {
    fn new(exp: &Experiment) -> Result<Self, SimError> {
        let fiber = exp.config.run_diffusion().fiber;
        let sys = MechSystem::new(&exp.coarse, Material::default(), fiber)?;
        let x = sys.rest_state();
        let x_prev = x.clone();
        Ok(MechBlock {
            sys,
            solver: NewtonSolver::new(NewtonSettings::default()),
            x,
            x_prev,
            coords: exp.fine.coords().to_vec(),
            solves_since_refactor: 0,
        })
    }

    /// Re-evaluates every fine node through the embedding and hands the
    /// deformed geometry to the electrophysiology system.
    fn push_geometry(&mut self, exp: &Experiment, ep: &mut EpSystem) -> Result<(), SimError> {
        let refc = exp.fine.coords();
        for (v, c) in self.coords.iter_mut().enumerate() {
            let (t, lambda) = exp.map.node_location(v);
            let u = self.sys.displacement_at(&self.x, t, lambda);
            *c = [refc[v][0] + u[0], refc[v][1] + u[1]];
        }
        ep.update_geometry(self.coords.clone())?;
        Ok(())
    }
}

/// Smallest fraction of the tension change a continuation stage may span
/// before the walk concedes that no nearby equilibrium exists.
const MIN_TENSION_STAGE: f64 = 1.0 / 64.0;
/// Solve budget for one incremental walk.
const MAX_TENSION_STAGE_SOLVES: usize = 96;

/// Load continuation between two tension fields: solve at intermediate
/// blends, each stage warm-started from the last converged one, growing the
/// stage after success and bisecting it after failure. `m.x` must hold the
/// equilibrium for `from` on entry; on success it holds the one for `to`.
fn walk_tension_change(
    m: &mut MechBlock,
    from: &[f64],
    to: &[f64],
) -> Result<SolveReport, crate::mech::MechError> {
    let n = to.len();
    let mut blend = vec![0.0; n];
    let mut x_good = m.x.clone();
    let mut done = 0.0f64;
    let mut stage = 0.5f64;
    let mut merged = SolveReport {
        newton_iters: 0,
        linear_iters: 0,
        residual_norm: f64::NAN,
        residual_history: Vec::new(),
        rebuilt_preconditioner: true,
    };
    let mut solves = 0usize;
    loop {
        let next = (done + stage).min(1.0);
        for i in 0..n {
            blend[i] = from[i] + (to[i] - from[i]) * next;
        }
        m.x.copy_from_slice(&x_good);
        solves += 1;
        match m.solver.solve(&m.sys, &mut m.x, &blend) {
            Ok(r) => {
                merged.newton_iters += r.newton_iters;
                merged.linear_iters += r.linear_iters;
                merged.residual_norm = r.residual_norm;
                x_good.copy_from_slice(&m.x);
                done = next;
                if done >= 1.0 {
                    log::debug!("tension walk converged in {solves} stage solves");
                    return Ok(merged);
                }
                stage *= 2.0;
            }
            Err(e) => {
                stage *= 0.5;
                m.solver.invalidate_preconditioner();
                m.solves_since_refactor = 0;
                if stage < MIN_TENSION_STAGE || solves >= MAX_TENSION_STAGE_SOLVES {
                    log::warn!(
                        "mechanics cannot follow the tension change: stuck {:.1}% of the \
                         way after {solves} stage solves ({e})",
                        100.0 * done
                    );
                    m.x.copy_from_slice(&x_good);
                    return Err(e);
                }
            }
        }
    }
}

/// The full advancing state of a coupled simulation.
pub(crate) struct Coupled {
    pub ep: EpSystem,
    pub states: Vec<CellState>,
    /// Active tension per system node, kPa.
    pub tension: Vec<f64>,
    pub mech: Option<MechBlock>,
    pub stats: RunStats,
    params: IonParams,
    lut: RateTable,
    tension_params: TensionParams,
    dt: f64,
    t0_ms: f64,
    step_idx: u64,
    /// Full-mesh index of each system node.
    sys_to_full: Vec<usize>,
    full_ta: Vec<f64>,
    coarse_ta: Vec<f64>,
    /// Tension field of the last mechanics solve that converged; the
    /// starting point when a hard solve has to be walked incrementally.
    coarse_ta_ok: Vec<f64>,
    rest_v: f64,
}

impl Coupled {
    pub fn new(exp: &Experiment, phase: Phase) -> Result<Self, SimError> {
        let (variant, diffusion) = match phase {
            Phase::Init => (exp.config.init_variant(), exp.config.init_diffusion()),
            Phase::Run => (exp.config.run_variant(), exp.config.run_diffusion()),
        };
        let params = variant.params();
        let dt = exp.config.numerics.dt_ms;
        let lut = RateTable::new(&params, dt);
        let ep = EpSystem::new(&exp.fine, diffusion, dt, exp.config.numerics.ep_tol)?;
        let states = ep.resting_states();
        let n = ep.n_sys();
        let mech = match exp.config.experiment.domain {
            DomainMode::Deforming => Some(MechBlock::new(exp)?),
            DomainMode::Static => None,
        };
        let sys_to_full = ep.node_map().sys_nodes().to_vec();
        Ok(Coupled {
            ep,
            states,
            tension: vec![0.0; n],
            mech,
            stats: RunStats::default(),
            params,
            lut,
            tension_params: exp.config.tension_params(),
            dt,
            t0_ms: 0.0,
            step_idx: 0,
            sys_to_full,
            full_ta: vec![0.0; exp.fine.n_nodes()],
            coarse_ta: vec![0.0; exp.map.n_coarse()],
            coarse_ta_ok: vec![0.0; exp.map.n_coarse()],
            rest_v: CellState::resting().v,
        })
    }

    /// Rebuilds the run-phase state from a saved checkpoint.
    pub fn resume(exp: &Experiment, ck: &Checkpoint) -> Result<Self, SimError> {
        if ck.fingerprint != exp.config.fingerprint() {
            return Err(SimError::Checkpoint(
                "checkpoint fingerprint does not match this experiment".into(),
            ));
        }
        let mut c = Coupled::new(exp, Phase::Run)?;
        if ck.states.len() != c.ep.n_sys() {
            return Err(SimError::Checkpoint(format!(
                "checkpoint holds {} node states, system has {}",
                ck.states.len(),
                c.ep.n_sys()
            )));
        }
        c.states.copy_from_slice(&ck.states);
        c.tension.copy_from_slice(&ck.tension);
        c.t0_ms = ck.t_ms;
        match (&mut c.mech, ck.mech_x.is_empty()) {
            (Some(m), false) => {
                if ck.mech_x.len() != m.sys.n_dofs() {
                    return Err(SimError::Checkpoint(format!(
                        "checkpoint holds {} mechanics unknowns, system has {}",
                        ck.mech_x.len(),
                        m.sys.n_dofs()
                    )));
                }
                m.x.copy_from_slice(&ck.mech_x);
                m.x_prev.copy_from_slice(&ck.mech_x_prev);
            }
            (None, true) => {}
            (Some(_), true) => {
                // A static-domain checkpoint resumed as deforming would
                // silently start from rest; refuse instead.
                return Err(SimError::Checkpoint(
                    "checkpoint has no mechanics state but the domain deforms".into(),
                ));
            }
            (None, false) => {
                return Err(SimError::Checkpoint(
                    "checkpoint carries mechanics state but the domain is static".into(),
                ));
            }
        }
        if let Some(mut m) = c.mech.take() {
            m.push_geometry(exp, &mut c.ep)?;
            c.mech = Some(m);
            // The checkpointed displacement equilibrates (up to one solve
            // interval of drift) the restriction of the checkpointed tension.
            for (i, &v) in c.sys_to_full.iter().enumerate() {
                c.full_ta[v] = c.tension[i];
            }
            restrict_tension(&exp.fine, &exp.map, &c.full_ta, &mut c.coarse_ta_ok);
        }
        Ok(c)
    }

    pub fn t_ms(&self) -> f64 {
        self.t0_ms + self.step_idx as f64 * self.dt
    }

    /// One reaction-diffusion step plus the pointwise tension update.
    pub fn ep_step(&mut self, stim: &[(usize, f64)]) -> Result<(), SimError> {
        let info = self
            .ep
            .step(&mut self.states, &self.params, Some(&self.lut), stim)?;
        for (s, ta) in self.states.iter().zip(self.tension.iter_mut()) {
            *ta = advance_tension(*ta, s.v, &self.tension_params, self.dt);
        }
        self.step_idx += 1;
        self.stats.ep_steps += 1;
        self.stats.ep_gmres_iters += info.iterations as u64;
        Ok(())
    }

    /// True when a mechanics solve is due after the step just taken.
    pub fn mech_due(&self, steps_per_solve: usize) -> bool {
        self.mech.is_some() && self.step_idx % steps_per_solve as u64 == 0
    }

    /// Restrict tension, solve the mechanics, and move the fine mesh.
    pub fn mech_update(&mut self, exp: &Experiment) -> Result<(), SimError> {
        let Some(m) = &mut self.mech else {
            return Ok(());
        };
        self.full_ta.iter_mut().for_each(|x| *x = 0.0);
        for (i, &v) in self.sys_to_full.iter().enumerate() {
            self.full_ta[v] = self.tension[i];
        }
        restrict_tension(&exp.fine, &exp.map, &self.full_ta, &mut self.coarse_ta);

        let guess = extrapolate(&m.x, &m.x_prev);
        m.x_prev.copy_from_slice(&m.x);
        m.x.copy_from_slice(&guess);
        m.solves_since_refactor += 1;
        if m.solves_since_refactor >= MECH_REFRESH_SOLVES {
            m.solver.invalidate_preconditioner();
            m.solves_since_refactor = 0;
        }
        let report = match m.solver.solve(&m.sys, &mut m.x, &self.coarse_ta) {
            Ok(r) => r,
            Err(first) => {
                // The extrapolated guess can overshoot after a sharp
                // tension change; retry once from the last solution with a
                // fresh factorisation.
                log::debug!(
                    "mechanics solve from extrapolated guess failed ({first}); retrying"
                );
                m.x.copy_from_slice(&m.x_prev);
                m.solver.invalidate_preconditioner();
                m.solves_since_refactor = 0;
                match m.solver.solve(&m.sys, &mut m.x, &self.coarse_ta) {
                    Ok(r) => r,
                    Err(second) => {
                        // Last resort: the load increment itself is too
                        // big for one solve, so walk from the last solved
                        // tension field to the new one in stages.
                        log::debug!(
                            "mechanics retry failed ({second}); walking the tension change \
                             incrementally"
                        );
                        m.x.copy_from_slice(&m.x_prev);
                        walk_tension_change(m, &self.coarse_ta_ok, &self.coarse_ta)?
                    }
                }
            }
        };
        self.coarse_ta_ok.copy_from_slice(&self.coarse_ta);
        self.stats.mech_solves += 1;
        self.stats.newton_iters += report.newton_iters as u64;
        if report.rebuilt_preconditioner {
            self.stats.preconditioner_rebuilds += 1;
        }
        m.push_geometry(exp, &mut self.ep)?;
        Ok(())
    }

    /// Scatters system-node voltages into a full-mesh field; nodes inside
    /// carved patches read as resting.
    pub fn scatter_v(&self, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = self.rest_v);
        for (i, &v) in self.sys_to_full.iter().enumerate() {
            out[v] = self.states[i].v;
        }
    }

    pub fn checkpoint(&self, fingerprint: u64) -> Checkpoint {
        let (mech_x, mech_x_prev) = match &self.mech {
            Some(m) => (m.x.clone(), m.x_prev.clone()),
            None => (Vec::new(), Vec::new()),
        };
        Checkpoint {
            fingerprint,
            t_ms: self.t_ms(),
            states: self.states.clone(),
            tension: self.tension.clone(),
            mech_x,
            mech_x_prev,
        }
    }
}

/// Best-effort emergency dump used when a stage fails mid-run.
pub(crate) fn write_postmortem(coupled: &Coupled, fingerprint: u64, dir: &Path) -> Option<PathBuf> {
    let path = dir.join("postmortem.ck");
    match save_checkpoint(&coupled.checkpoint(fingerprint), &path) {
        Ok(()) => Some(path),
        Err(e) => {
            log::warn!("could not write postmortem checkpoint: {e}");
            None
        }
    }
}

/// Result of a run phase.
pub struct RunOutcome {
    /// `None` when the simulated window was too short to classify.
    pub verdict: Option<StabilityVerdict>,
    pub stats: RunStats,
    pub end_t_ms: f64,
}

/// Runs the configured variant from a checkpoint to the configured end
/// time, classifying stability online and writing analysis products into
/// the experiment's output directory.
pub fn run_coupled(exp: &Experiment, ck: &Checkpoint) -> Result<RunOutcome, SimError> {
    let cfg = &exp.config;
    let out_dir = cfg.experiment.output_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    write_manifest(exp, &out_dir)?;

    let fingerprint = cfg.fingerprint();
    let mut coupled = Coupled::resume(exp, ck)?;
    let mut classifier = OnlineClassifier::new(&exp.fine);
    let mut v_full = vec![0.0; exp.fine.n_nodes()];

    let start = Instant::now();
    let result = run_loop(exp, &mut coupled, &mut classifier, &mut v_full, &out_dir);
    coupled.stats.wall_s = start.elapsed().as_secs_f64();

    if let Err(e) = result {
        let at_ms = coupled.t_ms();
        let postmortem = write_postmortem(&coupled, fingerprint, &out_dir);
        return Err(SimError::Stage {
            stage: "run",
            at_ms,
            source: Box::new(e),
            postmortem,
        });
    }

    let end_t_ms = coupled.t_ms();
    let verdict = match classifier.finish() {
        Ok(v) => Some(v),
        Err(SimError::EmptySeries) | Err(SimError::ShortSeries { .. }) => {
            log::warn!("run too short for a stability verdict");
            None
        }
        Err(e) => return Err(e),
    };
    if let Some(v) = &verdict {
        write_analysis_csv(&v.series, &out_dir.join("analysis.csv"))?;
        let mut text = format!(
            "classification = {}\nterminated = {}\n",
            v.classification.label(),
            v.terminated
        );
        if let Some(t) = v.first_breakup_ms {
            text.push_str(&format!("first_breakup_ms = {t}\n"));
        }
        text.push_str(&format!(
            "end_t_ms = {end_t_ms}\nep_steps = {}\nmech_solves = {}\n",
            coupled.stats.ep_steps, coupled.stats.mech_solves
        ));
        std::fs::write(out_dir.join("verdict.txt"), text)?;
        log::info!(
            "verdict: {} (terminated: {}), {} analysis rows",
            v.classification.label(),
            v.terminated,
            v.series.len()
        );
    }
    Ok(RunOutcome {
        verdict,
        stats: coupled.stats,
        end_t_ms,
    })
}

fn run_loop(
    exp: &Experiment,
    coupled: &mut Coupled,
    classifier: &mut OnlineClassifier,
    v_full: &mut [f64],
    out_dir: &Path,
) -> Result<(), SimError> {
    let cfg = &exp.config;
    let dt = cfg.numerics.dt_ms;
    let per = cfg.numerics.ep_steps_per_mech;
    let end = cfg.experiment.end_time_ms;
    let t0 = coupled.t_ms();
    let n_steps = ((end - t0) / dt).round() as u64;

    let fields_dir = out_dir.join("fields");
    if cfg.experiment.keep_fields {
        std::fs::create_dir_all(&fields_dir)?;
    }
    let frames_dir = out_dir.join("frames");
    let mut frames = if cfg.experiment.write_frames {
        std::fs::create_dir_all(&frames_dir)?;
        Some(FrameWriter::new(&exp.fine))
    } else {
        None
    };

    // Prime the classifier (and the field archive) with the checkpoint state.
    coupled.scatter_v(v_full);
    classifier.push(t0, v_full);
    let mut field_idx = 0usize;
    if cfg.experiment.keep_fields {
        write_field(&fields_dir.join(field_name(field_idx)), t0, v_full)?;
        field_idx += 1;
    }

    let mut next_analysis = t0 + ANALYSIS_INTERVAL_MS;
    let mut next_frame = t0 + cfg.experiment.snapshot_interval_ms;
    let mut next_log = t0 + 500.0;

    for _ in 0..n_steps {
        coupled.ep_step(&[])?;
        if coupled.mech_due(per) {
            coupled.mech_update(exp)?;
        }
        let t = coupled.t_ms();
        if t + 1e-9 >= next_analysis {
            coupled.scatter_v(v_full);
            if let Some(row) = classifier.push(t, v_full) {
                log::debug!(
                    "t = {:.0} ms: {} cores, {} fronts",
                    t,
                    row.singularities,
                    row.fragments
                );
            }
            if cfg.experiment.keep_fields {
                write_field(&fields_dir.join(field_name(field_idx)), t, v_full)?;
                field_idx += 1;
            }
            next_analysis += ANALYSIS_INTERVAL_MS;
        }
        if let Some(fw) = &mut frames {
            if t + 1e-9 >= next_frame {
                coupled.scatter_v(v_full);
                fw.write(&frames_dir.join(format!("v_{:07}.pgm", (t * 10.0) as u64)), v_full)?;
                next_frame += cfg.experiment.snapshot_interval_ms;
            }
        }
        if t + 1e-9 >= next_log {
            log::info!(
                "t = {:.0} / {:.0} ms ({} mech solves)",
                t,
                end,
                coupled.stats.mech_solves
            );
            next_log += 500.0;
        }
    }
    Ok(())
}

fn write_manifest(exp: &Experiment, out_dir: &Path) -> Result<(), SimError> {
    let mut text = exp.config.to_toml_string();
    if let Some(c) = &exp.carve {
        text.push_str(&format!(
            "\n# achieved carve fraction: {:.4} in {} patches\n",
            c.achieved_fraction, c.n_patches
        ));
    }
    std::fs::write(out_dir.join("manifest.toml"), text)?;
    Ok(())
}

/// One analysis row per line: `t_ms,singularities,fragments`.
pub fn write_analysis_csv(
    series: &[super::SnapshotAnalysis],
    path: &Path,
) -> Result<(), SimError> {
    let mut text = String::from("t_ms,singularities,fragments\n");
    for row in series {
        text.push_str(&format!(
            "{},{},{}\n",
            row.t_ms, row.singularities, row.fragments
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn field_name(idx: usize) -> String {
    format!("field_{idx:06}.bin")
}

const FIELD_MAGIC: &[u8; 8] = b"CEMFLD01";

/// Writes one voltage field (full-mesh nodal values at one instant).
pub fn write_field(path: &Path, t_ms: f64, v: &[f64]) -> Result<(), SimError> {
    let mut bytes = Vec::with_capacity(24 + v.len() * 8);
    bytes.extend_from_slice(FIELD_MAGIC);
    bytes.extend_from_slice(&t_ms.to_le_bytes());
    bytes.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a field written by [`write_field`].
pub fn read_field(path: &Path) -> Result<(f64, Vec<f64>), SimError> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: &str| {
        Err(SimError::Checkpoint(format!(
            "{}: {msg}",
            path.display()
        )))
    };
    if bytes.len() < 24 || &bytes[..8] != FIELD_MAGIC {
        return fail("not a voltage field file");
    }
    let t_ms = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if bytes.len() != 24 + n * 8 {
        return fail("truncated voltage field file");
    }
    let v = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((t_ms, v))
}

/// Rasterises nodal voltage onto a portable graymap for quick inspection.
/// Each pixel shows its nearest node; carved tissue renders black.
pub struct FrameWriter {
    w: usize,
    h: usize,
    /// Nearest node per pixel, `usize::MAX` where the node is carved away.
    nearest: Vec<usize>,
}

impl FrameWriter {
    pub fn new(mesh: &TriMesh) -> Self {
        let coords = mesh.coords();
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for c in coords {
            for d in 0..2 {
                lo[d] = lo[d].min(c[d]);
                hi[d] = hi[d].max(c[d]);
            }
        }
        let side = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
        let res = ((side / mesh.mean_edge_length()).ceil() as usize).clamp(32, 512);
        let (w, h) = (res, res);
        let cell = side / res as f64;

        // Bucket nodes on the pixel grid, then nearest-node by expanding
        // ring search from each pixel centre.
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); w * h];
        for (v, c) in coords.iter().enumerate() {
            let i = (((c[0] - lo[0]) / cell) as usize).min(w - 1);
            let j = (((c[1] - lo[1]) / cell) as usize).min(h - 1);
            buckets[j * w + i].push(v);
        }
        let alive = mesh.alive_nodes();
        let mut nearest = vec![usize::MAX; w * h];
        for pj in 0..h {
            for pi in 0..w {
                let px = lo[0] + (pi as f64 + 0.5) * cell;
                let py = lo[1] + (pj as f64 + 0.5) * cell;
                let mut best = (f64::MAX, usize::MAX);
                let mut r = 0usize;
                loop {
                    let i0 = pi.saturating_sub(r);
                    let i1 = (pi + r).min(w - 1);
                    let j0 = pj.saturating_sub(r);
                    let j1 = (pj + r).min(h - 1);
                    for j in j0..=j1 {
                        for i in i0..=i1 {
                            // Only the new ring, not the already-searched box.
                            if r > 0 && i != i0 && i != i1 && j != j0 && j != j1 {
                                continue;
                            }
                            for &v in &buckets[j * w + i] {
                                let d = (coords[v][0] - px).powi(2) + (coords[v][1] - py).powi(2);
                                if d < best.0 {
                                    best = (d, v);
                                }
                            }
                        }
                    }
                    // A hit within `r` rings is only provably nearest once
                    // we have searched one ring beyond it.
                    if best.1 != usize::MAX && best.0.sqrt() <= (r as f64) * cell {
                        break;
                    }
                    if i0 == 0 && j0 == 0 && i1 == w - 1 && j1 == h - 1 {
                        break;
                    }
                    r += 1;
                }
                nearest[pj * w + pi] = if alive[best.1] { best.1 } else { usize::MAX };
            }
        }
        FrameWriter { w, h, nearest }
    }

    pub fn write(&self, path: &Path, v: &[f64]) -> Result<(), SimError> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        // Image rows run top to bottom; mesh y runs bottom to top.
        for pj in (0..self.h).rev() {
            for pi in 0..self.w {
                let byte = match self.nearest[pj * self.w + pi] {
                    usize::MAX => 0u8,
                    node => {
                        let g = (v[node] + 90.0) / 130.0 * 255.0;
                        g.clamp(1.0, 255.0) as u8
                    }
                };
                bytes.push(byte);
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::classify::Classification;

    /// Small, fast experiment description for coupled tests.
    fn test_config(domain: &str, k_ta: f64, dir: &Path) -> ExperimentConfig {
        let text = format!(
            r#"
[experiment]
tissue = "control"
slope = "1.1"
domain = "{domain}"
end_time_ms = 40.0
snapshot_interval_ms = 10.0
output_dir = "{}"

[mesh]
side_mm = 10.0
edge_mm = 0.9
refine_levels = 2
seed = 3

[protocol]
cut_time_ms = 10.0
hold_duration_ms = 5.0
settle_time_ms = 20.0

[tension]
k_ta = {k_ta}
"#,
            dir.display()
        );
        ExperimentConfig::from_toml_str(&text).unwrap()
    }

    /// A synthetic "checkpoint": resting tissue with a depolarised disc,
    /// good enough to drive propagation without the full initiation.
    fn synthetic_checkpoint(exp: &Experiment) -> Checkpoint {
        let ep = EpSystem::new(
            &exp.fine,
            exp.config.init_diffusion(),
            exp.config.numerics.dt_ms,
            exp.config.numerics.ep_tol,
        )
        .unwrap();
        let mut states = ep.resting_states();
        for (i, &full) in ep.node_map().sys_nodes().iter().enumerate() {
            let c = exp.fine.coords()[full];
            let d2 = (c[0] - 5.0).powi(2) + (c[1] - 5.0).powi(2);
            if d2 < 4.0 {
                states[i].v = 20.0;
            }
        }
        let n = states.len();
        let (mech_x, mech_x_prev) = match exp.config.experiment.domain {
            DomainMode::Deforming => {
                let m = MechSystem::new(
                    &exp.coarse,
                    Material::default(),
                    exp.config.run_diffusion().fiber,
                )
                .unwrap();
                (m.rest_state(), m.rest_state())
            }
            DomainMode::Static => (Vec::new(), Vec::new()),
        };
        Checkpoint {
            fingerprint: exp.config.fingerprint(),
            t_ms: 20.0,
            states,
            tension: vec![0.0; n],
            mech_x,
            mech_x_prev,
        }
    }

    fn final_voltage(exp: &Experiment, ck: &Checkpoint) -> (Vec<f64>, RunStats) {
        let out = run_coupled(exp, ck).unwrap();
        // Too short for a verdict, by construction.
        assert!(out.verdict.is_none());
        // Re-derive the final field through a fresh resume of the
        // postmortem-free path: run_coupled does not expose states, so we
        // replay instead.
        let mut c = Coupled::resume(exp, ck).unwrap();
        let n_steps = ((exp.config.experiment.end_time_ms - ck.t_ms)
            / exp.config.numerics.dt_ms)
            .round() as u64;
        for _ in 0..n_steps {
            c.ep_step(&[]).unwrap();
            if c.mech_due(exp.config.numerics.ep_steps_per_mech) {
                c.mech_update(exp).unwrap();
            }
        }
        let mut v = vec![0.0; exp.fine.n_nodes()];
        c.scatter_v(&mut v);
        (v, out.stats)
    }

    #[test]
    fn zero_tension_deforming_matches_static_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_s = test_config("static", 0.0, &dir.path().join("s"));
        let cfg_d = test_config("deforming", 0.0, &dir.path().join("d"));
        let exp_s = Experiment::build(cfg_s).unwrap();
        let exp_d = Experiment::build(cfg_d).unwrap();

        let ck_s = synthetic_checkpoint(&exp_s);
        let ck_d = synthetic_checkpoint(&exp_d);
        let (v_s, stats_s) = final_voltage(&exp_s, &ck_s);
        let (v_d, stats_d) = final_voltage(&exp_d, &ck_d);

        assert_eq!(stats_s.mech_solves, 0, "static domains skip mechanics");
        assert!(stats_d.mech_solves > 0, "deforming domains solve mechanics");
        let max_diff = v_s
            .iter()
            .zip(&v_d)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(
            max_diff < 1e-9,
            "zero tension must not change the voltage field, diff {max_diff}"
        );
    }

    #[test]
    fn active_tension_moves_the_fine_mesh() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config("deforming", 9.58, dir.path());
        let exp = Experiment::build(cfg).unwrap();
        let ck = synthetic_checkpoint(&exp);

        let mut c = Coupled::resume(&exp, &ck).unwrap();
        for _ in 0..100 {
            c.ep_step(&[]).unwrap();
            if c.mech_due(exp.config.numerics.ep_steps_per_mech) {
                c.mech_update(&exp).unwrap();
            }
        }
        assert!(c.stats.mech_solves > 0);
        let moved = c
            .ep
            .mesh()
            .coords()
            .iter()
            .zip(exp.fine.coords())
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .fold(0.0f64, f64::max);
        assert!(
            moved > 1e-4,
            "contracting tissue must displace the fine mesh, got {moved}"
        );
        for s in &c.states {
            assert!(s.v.is_finite());
        }
    }

    #[test]
    fn runs_are_deterministic_from_a_shared_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = test_config("static", 9.58, dir.path());
        cfg.fibrosis = Some(super::super::FibrosisSection {
            fraction: 0.15,
            mean_patch_area_mm2: 0.8,
            seed: 9,
        });
        let exp = Experiment::build(cfg).unwrap();
        let ck = synthetic_checkpoint(&exp);
        let (v1, _) = final_voltage(&exp, &ck);
        let (v2, _) = final_voltage(&exp, &ck);
        assert_eq!(v1, v2, "identical inputs must reproduce bit-identical fields");
    }

    #[test]
    fn checkpoint_mismatches_are_refused_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config("static", 0.0, dir.path());
        let exp = Experiment::build(cfg).unwrap();
        let mut ck = synthetic_checkpoint(&exp);
        ck.fingerprint ^= 0xff;
        assert!(matches!(
            Coupled::resume(&exp, &ck),
            Err(SimError::Checkpoint(_))
        ));

        let mut ck = synthetic_checkpoint(&exp);
        ck.mech_x = vec![0.0; 10];
        ck.mech_x_prev = vec![0.0; 10];
        assert!(matches!(
            Coupled::resume(&exp, &ck),
            Err(SimError::Checkpoint(_))
        ));
    }

    #[test]
    fn field_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let v: Vec<f64> = (0..50).map(|i| -85.0 + i as f64).collect();
        write_field(&path, 123.5, &v).unwrap();
        let (t, back) = read_field(&path).unwrap();
        assert_eq!(t, 123.5);
        assert_eq!(back, v);
    }

    #[test]
    fn frames_are_valid_graymaps() {
        let mesh = generate_square_mesh(8.0, 1.0, 2).unwrap();
        let fw = FrameWriter::new(&mesh);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.pgm");
        let v = vec![-85.0; mesh.n_nodes()];
        fw.write(&path, &v).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n"));
        let header = format!("P5\n{} {}\n255\n", fw.w, fw.h);
        assert_eq!(bytes.len(), header.len() + fw.w * fw.h);
    }

    #[test]
    fn verdict_products_appear_for_long_enough_runs() {
        // Static run long enough to classify: quiescent tissue, so the
        // verdict is stable/terminated, and the analysis CSV exists.
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
[experiment]
tissue = "control"
slope = "1.1"
domain = "static"
end_time_ms = 2130.0
output_dir = "{}"

[mesh]
side_mm = 10.0
edge_mm = 1.8
refine_levels = 1
seed = 3

[protocol]
cut_time_ms = 10.0
hold_duration_ms = 5.0
settle_time_ms = 20.0

[numerics]
dt_ms = 0.5
ep_tol = 1e-7
"#,
            dir.path().display()
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let exp = Experiment::build(cfg).unwrap();
        let ep = EpSystem::new(&exp.fine, exp.config.init_diffusion(), 0.5, 1e-7).unwrap();
        let ck = Checkpoint {
            fingerprint: exp.config.fingerprint(),
            t_ms: 20.0,
            states: ep.resting_states(),
            tension: vec![0.0; ep.n_sys()],
            mech_x: Vec::new(),
            mech_x_prev: Vec::new(),
        };
        let out = run_coupled(&exp, &ck).unwrap();
        let verdict = out.verdict.expect("2.1 s of analysis is classifiable");
        assert_eq!(verdict.classification, Classification::Stable);
        assert!(verdict.terminated);
        assert!(dir.path().join("analysis.csv").exists());
        assert!(dir.path().join("verdict.txt").exists());
        assert!(dir.path().join("manifest.toml").exists());
    }
}
