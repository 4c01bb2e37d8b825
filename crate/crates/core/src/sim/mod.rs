//! Experiment orchestration: configuration, spiral initiation, coupled
//! runs, stability classification, and parameter sweeps.
//!
//! An experiment is described by a single TOML file. The same document
//! drives every stage: `[mesh]` and `[fibrosis]` fix the pair of embedded
//! meshes (a coarse mechanics mesh, uniformly refined into the fine
//! electrophysiology mesh, with non-conducting patches carved from the fine
//! one only), `[protocol]` shapes the cross-field stimulus that winds up a
//! spiral, and `[experiment]` says which tissue variant to study, on a
//! static or deforming domain, and for how long.
//!
//! Initiation always runs with the healthy slope-1.1 parameterisation to
//! produce a stable reference spiral; the variant under study is swapped in
//! at the checkpoint so every run asks the same question — does this change
//! destabilise an established spiral? — from a common starting state.

mod checkpoint;
mod classify;
mod init;
mod restrict;
mod run;
mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use classify::{
    classify_stability, Classification, OnlineClassifier, SnapshotAnalysis, StabilityVerdict,
    ANALYSIS_INTERVAL_MS,
};
pub use init::init_spiral;
pub use restrict::restrict_tension;
pub use run::{
    read_field, run_coupled, write_analysis_csv, write_field, Experiment, FrameWriter,
    RunOutcome, RunStats,
};
pub use sweep::{run_sweep, write_verdict_csv, RowOutcome, SweepRow, SweepTable};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{
    CellError, SlopeFamily, TensionParams, Tissue, Variant, STIM_AMPLITUDE, STIM_DURATION,
};
use crate::ep::{DiffusionSpec, EpError};
use crate::mech::MechError;
use crate::mesh::{FibrosisSpec, MeshError};

/// Errors from experiment configuration and orchestration.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("protocol failure: {0}")]
    Protocol(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("snapshot series is empty")]
    EmptySeries,
    #[error("snapshot series spans {span_ms} ms, need at least {need_ms} ms")]
    ShortSeries { span_ms: f64, need_ms: f64 },
    #[error("{stage} stage failed at t = {at_ms} ms: {source}")]
    Stage {
        stage: &'static str,
        at_ms: f64,
        #[source]
        source: Box<SimError>,
        /// Where the state at the moment of failure was written, if it was.
        postmortem: Option<PathBuf>,
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Ep(#[from] EpError),
    #[error(transparent)]
    Mech(#[from] MechError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which remodelling is applied after the checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TissueVariant {
    /// Healthy myocardium.
    Control,
    /// Remodelled cell electrophysiology only.
    HfElectrophysiology,
    /// Remodelled tissue only: reduced fibre-direction coupling (the mesh
    /// carving, if any, is configured separately and is present from t = 0).
    HfTissue,
    /// Both remodellings together.
    HfBoth,
}

impl TissueVariant {
    /// Cell parameterisation condition for the run phase.
    pub fn cell_tissue(self) -> Tissue {
        match self {
            TissueVariant::Control | TissueVariant::HfTissue => Tissue::Control,
            TissueVariant::HfElectrophysiology | TissueVariant::HfBoth => Tissue::Failing,
        }
    }

    /// Conduction condition for the run phase.
    pub fn has_gap_junction_remodelling(self) -> bool {
        matches!(self, TissueVariant::HfTissue | TissueVariant::HfBoth)
    }

    pub fn label(self) -> &'static str {
        match self {
            TissueVariant::Control => "control",
            TissueVariant::HfElectrophysiology => "hf-electrophysiology",
            TissueVariant::HfTissue => "hf-tissue",
            TissueVariant::HfBoth => "hf-both",
        }
    }
}

/// Restitution-slope family selector, spelled like the nominal slope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlopeChoice {
    #[serde(rename = "1.1")]
    S11,
    #[serde(rename = "1.4")]
    S14,
    #[serde(rename = "1.8")]
    S18,
}

impl SlopeChoice {
    pub fn family(self) -> SlopeFamily {
        match self {
            SlopeChoice::S11 => SlopeFamily::Slope11,
            SlopeChoice::S14 => SlopeFamily::Slope14,
            SlopeChoice::S18 => SlopeFamily::Slope18,
        }
    }

    pub fn label(self) -> &'static str {
        self.family().label()
    }
}

/// Whether the tissue is allowed to deform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainMode {
    Static,
    Deforming,
}

impl DomainMode {
    pub fn label(self) -> &'static str {
        match self {
            DomainMode::Static => "static",
            DomainMode::Deforming => "deforming",
        }
    }
}

/// `[experiment]` section: what to run and for how long.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub tissue: TissueVariant,
    pub slope: SlopeChoice,
    pub domain: DomainMode,
    /// Simulated horizon from the initial stimulus, ms.
    #[serde(default = "default_end_time")]
    pub end_time_ms: f64,
    /// Cadence of optional field/image dumps, ms. Stability analysis runs
    /// at its own fixed cadence regardless.
    #[serde(default = "default_snapshot_interval")]
    pub snapshot_interval_ms: f64,
    /// Write portable-graymap voltage frames at the snapshot cadence.
    #[serde(default)]
    pub write_frames: bool,
    /// Keep raw voltage fields at the analysis cadence (for re-running the
    /// classifier offline). Large: one field per 10 ms.
    #[serde(default)]
    pub keep_fields: bool,
    pub output_dir: PathBuf,
}

fn default_end_time() -> f64 {
    7000.0
}

fn default_snapshot_interval() -> f64 {
    100.0
}

/// `[mesh]` section: domain geometry and resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    /// Square side, mm.
    #[serde(default = "default_side")]
    pub side_mm: f64,
    /// Target mean edge of the fine (electrophysiology) mesh, mm.
    pub edge_mm: f64,
    /// Uniform refinements between the coarse mechanics mesh and the fine
    /// mesh; the coarse target edge is `edge_mm * 2^refine_levels`.
    #[serde(default = "default_levels")]
    pub refine_levels: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_side() -> f64 {
    120.0
}

fn default_levels() -> usize {
    4
}

impl MeshSection {
    pub fn coarse_edge_mm(&self) -> f64 {
        self.edge_mm * (1 << self.refine_levels) as f64
    }
}

/// `[fibrosis]` section: non-conducting patch carving on the fine mesh.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FibrosisSection {
    /// Fraction of tissue area to remove.
    pub fraction: f64,
    /// Mean individual patch area, mm^2.
    pub mean_patch_area_mm2: f64,
    #[serde(default)]
    pub seed: u64,
}

impl FibrosisSection {
    pub fn spec(&self) -> FibrosisSpec {
        FibrosisSpec {
            fraction: self.fraction,
            mean_patch_area: self.mean_patch_area_mm2,
            seed: self.seed,
        }
    }
}

/// `[protocol]` section: the stimulus-and-cut recipe that starts a spiral.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    /// Stimulus current on the left-face nodes, pA/pF (negative
    /// depolarises).
    #[serde(default = "default_stim_amplitude")]
    pub stim_amplitude: f64,
    #[serde(default = "default_stim_duration")]
    pub stim_duration_ms: f64,
    /// Erase the lower half-domain at this time...
    #[serde(default)]
    pub cut_time_ms: Option<f64>,
    /// ...or when the wavefront first crosses this x, mm (mutually
    /// exclusive with `cut_time_ms`; default is a 115 ms timed cut).
    #[serde(default)]
    pub cut_front_x_mm: Option<f64>,
    /// How long the lower half is held at rest, ms.
    #[serde(default = "default_hold")]
    pub hold_duration_ms: f64,
    /// Total initiation length, ms; the checkpoint is taken here.
    #[serde(default = "default_settle")]
    pub settle_time_ms: f64,
}

fn default_stim_amplitude() -> f64 {
    STIM_AMPLITUDE
}

fn default_stim_duration() -> f64 {
    STIM_DURATION
}

fn default_hold() -> f64 {
    35.0
}

fn default_settle() -> f64 {
    5000.0
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            stim_amplitude: default_stim_amplitude(),
            stim_duration_ms: default_stim_duration(),
            cut_time_ms: None,
            cut_front_x_mm: None,
            hold_duration_ms: default_hold(),
            settle_time_ms: default_settle(),
        }
    }
}

/// The default timed cut, applied when neither cut rule is configured.
pub const DEFAULT_CUT_TIME_MS: f64 = 115.0;

/// Resolved cut rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CutRule {
    AtTime(f64),
    FrontCrosses(f64),
}

impl ProtocolSection {
    pub fn cut_rule(&self) -> CutRule {
        match (self.cut_time_ms, self.cut_front_x_mm) {
            (_, Some(x)) => CutRule::FrontCrosses(x),
            (Some(t), None) => CutRule::AtTime(t),
            (None, None) => CutRule::AtTime(DEFAULT_CUT_TIME_MS),
        }
    }
}

/// `[numerics]` section: step sizes and solver knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsSection {
    #[serde(default = "default_dt")]
    pub dt_ms: f64,
    /// Electrophysiology steps between mechanics solves.
    #[serde(default = "default_steps_per_solve")]
    pub ep_steps_per_mech: usize,
    /// Relative tolerance of the diffusion linear solves.
    #[serde(default = "default_ep_tol")]
    pub ep_tol: f64,
}

fn default_dt() -> f64 {
    0.08
}

fn default_steps_per_solve() -> usize {
    10
}

fn default_ep_tol() -> f64 {
    1e-8
}

impl Default for NumericsSection {
    fn default() -> Self {
        NumericsSection {
            dt_ms: default_dt(),
            ep_steps_per_mech: default_steps_per_solve(),
            ep_tol: default_ep_tol(),
        }
    }
}

/// `[tension]` section: overrides for the voltage-to-tension law.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensionSection {
    #[serde(default = "default_k_ta")]
    pub k_ta: f64,
    #[serde(default = "default_eps0")]
    pub eps0: f64,
}

fn default_k_ta() -> f64 {
    TensionParams::default().k_ta
}

fn default_eps0() -> f64 {
    TensionParams::default().eps0
}

impl Default for TensionSection {
    fn default() -> Self {
        TensionSection {
            k_ta: default_k_ta(),
            eps0: default_eps0(),
        }
    }
}

/// A full experiment description, as parsed from one TOML document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub mesh: MeshSection,
    #[serde(default)]
    pub fibrosis: Option<FibrosisSection>,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub numerics: NumericsSection,
    #[serde(default)]
    pub tension: TensionSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Serialise back to TOML (used for run manifests).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        let m = &self.mesh;
        if !(m.side_mm > 0.0) || !m.side_mm.is_finite() {
            return bad(format!("mesh side must be positive, got {}", m.side_mm));
        }
        if !(m.edge_mm > 0.0) || !m.edge_mm.is_finite() {
            return bad(format!("mesh edge must be positive, got {}", m.edge_mm));
        }
        if m.refine_levels == 0 || m.refine_levels > 6 {
            return bad(format!(
                "refine levels must be in 1..=6, got {}",
                m.refine_levels
            ));
        }
        if m.coarse_edge_mm() > m.side_mm / 2.0 {
            return bad(format!(
                "coarse edge {} mm (edge {} x 2^{}) too coarse for a {} mm side",
                m.coarse_edge_mm(),
                m.edge_mm,
                m.refine_levels,
                m.side_mm
            ));
        }
        if let Some(f) = &self.fibrosis {
            if !(0.0..=0.35).contains(&f.fraction) {
                return bad(format!("fibrosis fraction {} outside [0, 0.35]", f.fraction));
            }
            if !(f.mean_patch_area_mm2 > 0.0) {
                return bad(format!(
                    "fibrosis patch area must be positive, got {}",
                    f.mean_patch_area_mm2
                ));
            }
        }
        let p = &self.protocol;
        if p.stim_amplitude == 0.0 || !p.stim_amplitude.is_finite() {
            return bad("stimulus amplitude must be nonzero".into());
        }
        if !(p.stim_duration_ms > 0.0) {
            return bad("stimulus duration must be positive".into());
        }
        if p.cut_time_ms.is_some() && p.cut_front_x_mm.is_some() {
            return bad("configure cut_time_ms or cut_front_x_mm, not both".into());
        }
        if !(p.hold_duration_ms >= 0.0) {
            return bad("hold duration must be nonnegative".into());
        }
        let cut_floor = match p.cut_rule() {
            CutRule::AtTime(t) => {
                if !(t > 0.0) {
                    return bad(format!("cut time must be positive, got {t}"));
                }
                t
            }
            CutRule::FrontCrosses(x) => {
                if !(x > 0.0 && x < m.side_mm) {
                    return bad(format!("cut front position {x} outside the domain"));
                }
                0.0
            }
        };
        if !(p.settle_time_ms > cut_floor + p.hold_duration_ms) {
            return bad(format!(
                "settle time {} does not cover the cut-and-hold window",
                p.settle_time_ms
            ));
        }
        let e = &self.experiment;
        if !(e.end_time_ms >= p.settle_time_ms) {
            return bad(format!(
                "end time {} ms shorter than the {} ms initiation protocol",
                e.end_time_ms, p.settle_time_ms
            ));
        }
        let n = &self.numerics;
        if !(n.dt_ms > 0.0) || !n.dt_ms.is_finite() {
            return bad(format!("dt must be positive, got {}", n.dt_ms));
        }
        if n.ep_steps_per_mech < 1 {
            return bad("ep_steps_per_mech must be at least 1".into());
        }
        if !(n.ep_tol > 0.0) {
            return bad("ep_tol must be positive".into());
        }
        if !(e.snapshot_interval_ms >= n.dt_ms) {
            return bad(format!(
                "snapshot interval {} ms below dt {}",
                e.snapshot_interval_ms, n.dt_ms
            ));
        }
        let t = &self.tension;
        if !(t.k_ta >= 0.0) || !(t.eps0 > 0.0) {
            return bad(format!(
                "tension law needs k_ta >= 0 and eps0 > 0, got {} / {}",
                t.k_ta, t.eps0
            ));
        }
        Ok(())
    }

    /// Cell parameterisation measured after the checkpoint.
    pub fn run_variant(&self) -> Variant {
        Variant {
            tissue: self.experiment.tissue.cell_tissue(),
            slope: self.experiment.slope.family(),
        }
    }

    /// Diffusion measured after the checkpoint.
    pub fn run_diffusion(&self) -> DiffusionSpec {
        if self.experiment.tissue.has_gap_junction_remodelling() {
            DiffusionSpec::failing()
        } else {
            DiffusionSpec::default()
        }
    }

    /// Cell parameterisation used during initiation: always the healthy
    /// slope-1.1 family, so every run starts from the same stable spiral.
    pub fn init_variant(&self) -> Variant {
        Variant {
            tissue: Tissue::Control,
            slope: SlopeFamily::Slope11,
        }
    }

    /// Diffusion used during initiation (healthy conduction).
    pub fn init_diffusion(&self) -> DiffusionSpec {
        DiffusionSpec::default()
    }

    pub fn tension_params(&self) -> TensionParams {
        TensionParams {
            k_ta: self.tension.k_ta,
            eps0: self.tension.eps0,
            ..TensionParams::default()
        }
    }

    /// Stable identity of everything a checkpoint depends on: meshes,
    /// carving, domain mode, the initiation protocol, and the numerical
    /// knobs that shape the initiation trajectory. Tissue variant and slope
    /// are excluded — they are swapped at the checkpoint by design, which
    /// is exactly what lets several variants share one checkpoint.
    pub fn fingerprint(&self) -> u64 {
        let m = &self.mesh;
        let fib = match &self.fibrosis {
            Some(f) => format!(
                "{:e};{:e};{}",
                f.fraction, f.mean_patch_area_mm2, f.seed
            ),
            None => "none".into(),
        };
        let p = &self.protocol;
        let cut = match p.cut_rule() {
            CutRule::AtTime(t) => format!("t{t:e}"),
            CutRule::FrontCrosses(x) => format!("x{x:e}"),
        };
        let n = &self.numerics;
        let text = format!(
            "{:e};{:e};{};{};{};{};{:e};{:e};{cut};{:e};{:e};{};{:e};{:e};{:e};{:e}",
            m.side_mm,
            m.edge_mm,
            m.refine_levels,
            m.seed,
            fib,
            self.experiment.domain.label(),
            p.stim_amplitude,
            p.stim_duration_ms,
            p.hold_duration_ms,
            p.settle_time_ms,
            n.ep_steps_per_mech,
            n.dt_ms,
            n.ep_tol,
            self.tension.k_ta,
            self.tension.eps0,
        );
        fnv1a(text.as_bytes())
    }
}

/// 64-bit FNV-1a, used for checkpoint/config fingerprints.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
[experiment]
tissue = "control"
slope = "1.1"
domain = "static"
output_dir = "out/demo"

[mesh]
edge_mm = 0.42
refine_levels = 3
seed = 7
"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(&minimal_toml()).unwrap();
        assert_eq!(cfg.experiment.end_time_ms, 7000.0);
        assert_eq!(cfg.numerics.dt_ms, 0.08);
        assert_eq!(cfg.numerics.ep_steps_per_mech, 10);
        assert_eq!(cfg.protocol.settle_time_ms, 5000.0);
        assert_eq!(cfg.protocol.cut_rule(), CutRule::AtTime(115.0));
        assert_eq!(cfg.mesh.side_mm, 120.0);
        assert!((cfg.mesh.coarse_edge_mm() - 3.36).abs() < 1e-12);
        assert!(cfg.fibrosis.is_none());
    }

    #[test]
    fn variant_resolution_swaps_only_at_the_checkpoint() {
        let mut cfg = ExperimentConfig::from_toml_str(&minimal_toml()).unwrap();
        cfg.experiment.tissue = TissueVariant::HfBoth;
        cfg.experiment.slope = SlopeChoice::S18;
        assert_eq!(cfg.run_variant().tissue, Tissue::Failing);
        assert_eq!(cfg.run_variant().slope, SlopeFamily::Slope18);
        assert!(cfg.run_diffusion().d_fiber < DiffusionSpec::default().d_fiber);
        // Initiation stays healthy 1.1 regardless.
        assert_eq!(cfg.init_variant().tissue, Tissue::Control);
        assert_eq!(cfg.init_variant().slope, SlopeFamily::Slope11);
        assert_eq!(
            cfg.init_diffusion().d_fiber,
            DiffusionSpec::default().d_fiber
        );
    }

    #[test]
    fn fingerprint_tracks_mesh_but_not_variant() {
        let base = ExperimentConfig::from_toml_str(&minimal_toml()).unwrap();
        let mut other = base.clone();
        other.experiment.tissue = TissueVariant::HfElectrophysiology;
        other.experiment.slope = SlopeChoice::S18;
        assert_eq!(base.fingerprint(), other.fingerprint());

        let mut moved = base.clone();
        moved.mesh.seed = 8;
        assert_ne!(base.fingerprint(), moved.fingerprint());

        let mut carved = base.clone();
        carved.fibrosis = Some(FibrosisSection {
            fraction: 0.2681,
            mean_patch_area_mm2: 1.93,
            seed: 3,
        });
        assert_ne!(base.fingerprint(), carved.fingerprint());

        let mut deforming = base;
        deforming.experiment.domain = DomainMode::Deforming;
        assert_ne!(deforming.fingerprint(), carved.fingerprint());
    }

    #[test]
    fn validation_rejects_contradictions() {
        let mut cfg = ExperimentConfig::from_toml_str(&minimal_toml()).unwrap();
        cfg.protocol.cut_time_ms = Some(115.0);
        cfg.protocol.cut_front_x_mm = Some(60.0);
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));

        let mut cfg = ExperimentConfig::from_toml_str(&minimal_toml()).unwrap();
        cfg.experiment.end_time_ms = 4000.0; // shorter than initiation
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));

        let mut cfg = ExperimentConfig::from_toml_str(&minimal_toml()).unwrap();
        cfg.mesh.refine_levels = 7;
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));

        let mut cfg = ExperimentConfig::from_toml_str(&minimal_toml()).unwrap();
        cfg.numerics.ep_steps_per_mech = 0;
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = minimal_toml() + "\n[experiment2]\nfoo = 1\n";
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text2 = minimal_toml().replace("edge_mm = 0.42", "edge_mm = 0.42\nedge_typo = 1.0");
        assert!(ExperimentConfig::from_toml_str(&text2).is_err());
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let mut cfg = ExperimentConfig::from_toml_str(&minimal_toml()).unwrap();
        cfg.fibrosis = Some(FibrosisSection {
            fraction: 0.2681,
            mean_patch_area_mm2: 8.72,
            seed: 42,
        });
        cfg.experiment.domain = DomainMode::Deforming;
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        assert_eq!(back.experiment.domain, DomainMode::Deforming);
        assert_eq!(back.fibrosis.unwrap().seed, 42);
    }
}
