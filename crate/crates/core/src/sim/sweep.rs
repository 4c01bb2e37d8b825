//! Predefined experiment grids: the patch-size sweep, the fibrosis-density
//! sweep, and the full remodelling-by-slope-by-domain summary, each row
//! carrying the published stability verdict it is expected to reproduce.
//!
//! Rows that share initiation inputs (mesh, carving, domain, protocol)
//! share one checkpoint: the sweep groups rows by configuration
//! fingerprint, initiates each group once, and then runs every variant of
//! the group from that common spiral. Failures are recorded per row and do
//! not stop the sweep.

use std::collections::BTreeMap;
use std::path::Path;

use super::checkpoint::{load_checkpoint, Checkpoint};
use super::classify::Classification;
use super::init::init_spiral;
use super::run::{run_coupled, Experiment};
use super::{
    DomainMode, ExperimentConfig, ExperimentSection, FibrosisSection, MeshSection,
    NumericsSection, ProtocolSection, SimError, SlopeChoice, TensionSection, TissueVariant,
};

/// Every sweep runs on the same generated domain.
const MESH_SEED: u64 = 7;
/// Tissue fraction carved in the patch-size sweep and the summary rows
/// with tissue remodelling.
const FULL_FRACTION: f64 = 0.2681;
/// Largest patch size; also the carving used by the summary rows.
const LARGE_PATCH_MM2: f64 = 8.72;
const LARGE_PATCH_SEED: u64 = 42;

/// One experiment of a sweep, with its published expected verdict.
pub struct SweepRow {
    pub id: String,
    pub expected: Classification,
    pub config: ExperimentConfig,
}

/// A named collection of sweep rows.
pub struct SweepTable {
    pub name: &'static str,
    pub rows: Vec<SweepRow>,
}

struct RowSpec {
    id: String,
    tissue: TissueVariant,
    slope: SlopeChoice,
    domain: DomainMode,
    fibrosis: Option<FibrosisSection>,
    end_ms: f64,
    expected: Classification,
}

fn make_row(root: &Path, edge_mm: f64, levels: usize, spec: RowSpec) -> SweepRow {
    let config = ExperimentConfig {
        experiment: ExperimentSection {
            tissue: spec.tissue,
            slope: spec.slope,
            domain: spec.domain,
            end_time_ms: spec.end_ms,
            snapshot_interval_ms: 100.0,
            write_frames: false,
            keep_fields: false,
            output_dir: root.join(&spec.id),
        },
        mesh: MeshSection {
            side_mm: 120.0,
            edge_mm,
            refine_levels: levels,
            seed: MESH_SEED,
        },
        fibrosis: spec.fibrosis,
        protocol: ProtocolSection::default(),
        numerics: NumericsSection::default(),
        tension: TensionSection::default(),
    };
    SweepRow {
        id: spec.id,
        expected: spec.expected,
        config,
    }
}

fn fib(fraction: f64, patch: f64, seed: u64) -> Option<FibrosisSection> {
    Some(FibrosisSection {
        fraction,
        mean_patch_area_mm2: patch,
        seed,
    })
}

impl SweepTable {
    /// Patch-size sweep: a fixed carved fraction split into ever smaller
    /// patches, on electrically remodelled tissue at the intermediate
    /// restitution slope. The largest patches break the spiral; the
    /// smallest do not.
    pub fn patch_size(root: &Path, edge_mm: f64, levels: usize) -> Self {
        use Classification::{Stable, Unstable};
        let rows = vec![
            (String::from("patch-N0"), None, 7000.0, Stable),
            (String::from("patch-F0"), fib(FULL_FRACTION, 8.72, 101), 7000.0, Unstable),
            (String::from("patch-F1"), fib(FULL_FRACTION, 1.93, 102), 13600.0, Unstable),
            (String::from("patch-F2"), fib(FULL_FRACTION, 0.53, 103), 12360.0, Unstable),
            (String::from("patch-F3"), fib(FULL_FRACTION, 0.27, 104), 17400.0, Stable),
        ]
        .into_iter()
        .map(|(id, fibrosis, end_ms, expected)| {
            make_row(
                root,
                edge_mm,
                levels,
                RowSpec {
                    id,
                    tissue: TissueVariant::HfTissue,
                    slope: SlopeChoice::S14,
                    domain: DomainMode::Static,
                    fibrosis,
                    end_ms,
                    expected,
                },
            )
        })
        .collect();
        SweepTable {
            name: "patch-size",
            rows,
        }
    }

    /// Density sweep: mid-size patches at decreasing carved fractions.
    /// Breakup persists all the way down to a few percent.
    pub fn density(root: &Path, edge_mm: f64, levels: usize) -> Self {
        let rows = vec![
            (String::from("density-F1"), 0.2681, 102u64, 13600.0),
            (String::from("density-F5"), 0.2481, 202, 10720.0),
            (String::from("density-F6"), 0.2017, 203, 8600.0),
            (String::from("density-F7"), 0.1539, 204, 8200.0),
            (String::from("density-F8"), 0.0509, 205, 10720.0),
        ]
        .into_iter()
        .map(|(id, fraction, seed, end_ms)| {
            make_row(
                root,
                edge_mm,
                levels,
                RowSpec {
                    id,
                    tissue: TissueVariant::HfTissue,
                    slope: SlopeChoice::S14,
                    domain: DomainMode::Static,
                    fibrosis: fib(fraction, 1.93, seed),
                    end_ms,
                    expected: Classification::Unstable,
                },
            )
        })
        .collect();
        SweepTable {
            name: "density",
            rows,
        }
    }

    /// Full summary: every remodelling combination at every restitution
    /// slope, on static and deforming domains. Tissue-remodelled rows
    /// carry the large-patch carving.
    pub fn summary(root: &Path, edge_mm: f64, levels: usize) -> Self {
        use Classification::{Stable, Unstable};
        let domains = [DomainMode::Static, DomainMode::Deforming];
        let tissues = [
            TissueVariant::Control,
            TissueVariant::HfElectrophysiology,
            TissueVariant::HfTissue,
            TissueVariant::HfBoth,
        ];
        let slopes = [SlopeChoice::S11, SlopeChoice::S14, SlopeChoice::S18];
        // Verdicts by (domain, tissue) in slope order 1.1 / 1.4 / 1.8.
        let expected = |domain: DomainMode, tissue: TissueVariant| -> [Classification; 3] {
            match (domain, tissue) {
                (DomainMode::Static, TissueVariant::Control) => [Stable, Stable, Unstable],
                (DomainMode::Deforming, TissueVariant::Control) => [Stable, Unstable, Unstable],
                (_, TissueVariant::HfElectrophysiology) => [Stable, Stable, Stable],
                (_, TissueVariant::HfTissue) => [Stable, Unstable, Unstable],
                (_, TissueVariant::HfBoth) => [Stable, Stable, Stable],
            }
        };
        let mut rows = Vec::new();
        for domain in domains {
            for tissue in tissues {
                let verdicts = expected(domain, tissue);
                for (k, slope) in slopes.into_iter().enumerate() {
                    let fibrosis = if tissue.has_gap_junction_remodelling() {
                        fib(FULL_FRACTION, LARGE_PATCH_MM2, LARGE_PATCH_SEED)
                    } else {
                        None
                    };
                    let id = format!(
                        "summary-{}-{}-{}",
                        domain.label(),
                        tissue.label(),
                        slope.label()
                    );
                    rows.push(make_row(
                        root,
                        edge_mm,
                        levels,
                        RowSpec {
                            id,
                            tissue,
                            slope,
                            domain,
                            fibrosis,
                            end_ms: 7000.0,
                            expected: verdicts[k],
                        },
                    ));
                }
            }
        }
        SweepTable {
            name: "summary",
            rows,
        }
    }

    pub fn by_name(name: &str, root: &Path, edge_mm: f64, levels: usize) -> Option<Self> {
        match name {
            "patch-size" | "patch" => Some(Self::patch_size(root, edge_mm, levels)),
            "density" => Some(Self::density(root, edge_mm, levels)),
            "summary" => Some(Self::summary(root, edge_mm, levels)),
            _ => None,
        }
    }
}

/// Per-row result of a sweep, flattened for reporting.
pub struct RowOutcome {
    pub id: String,
    pub domain: &'static str,
    pub tissue: &'static str,
    pub slope: &'static str,
    pub fraction: f64,
    pub patch_mm2: f64,
    pub end_ms: f64,
    pub expected: Classification,
    pub observed: Option<Classification>,
    pub first_breakup_ms: Option<f64>,
    pub terminated: Option<bool>,
    pub error: Option<String>,
}

impl RowOutcome {
    fn pending(row: &SweepRow) -> Self {
        let e = &row.config.experiment;
        let (fraction, patch) = row
            .config
            .fibrosis
            .as_ref()
            .map_or((0.0, 0.0), |f| (f.fraction, f.mean_patch_area_mm2));
        RowOutcome {
            id: row.id.clone(),
            domain: e.domain.label(),
            tissue: e.tissue.label(),
            slope: e.slope.label(),
            fraction,
            patch_mm2: patch,
            end_ms: e.end_time_ms,
            expected: row.expected,
            observed: None,
            first_breakup_ms: None,
            terminated: None,
            error: None,
        }
    }

    /// `Some(true)` when the observed verdict matches the published one.
    pub fn matches(&self) -> Option<bool> {
        self.observed.map(|o| o == self.expected)
    }
}

/// Runs every row of `table`, sharing initiation checkpoints between rows
/// with identical initiation inputs. Checkpoints are kept under `ck_dir`
/// and reused across invocations. Row failures are recorded, not fatal.
pub fn run_sweep(table: &SweepTable, ck_dir: &Path) -> Result<Vec<RowOutcome>, SimError> {
    std::fs::create_dir_all(ck_dir)?;
    let mut outcomes: Vec<RowOutcome> = table.rows.iter().map(RowOutcome::pending).collect();

    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        groups.entry(row.config.fingerprint()).or_default().push(i);
    }
    log::info!(
        "sweep {}: {} rows in {} initiation groups",
        table.name,
        table.rows.len(),
        groups.len()
    );

    for (fp, idxs) in groups {
        let ck_path = ck_dir.join(format!("init-{fp:016x}.ck"));
        let ck: Result<Checkpoint, SimError> = (|| {
            if ck_path.exists() {
                log::info!("reusing checkpoint {}", ck_path.display());
                load_checkpoint(&ck_path, fp)
            } else {
                let exp = Experiment::build(table.rows[idxs[0]].config.clone())?;
                init_spiral(&exp, &ck_path)
            }
        })();
        let ck = match ck {
            Ok(c) => c,
            Err(e) => {
                let msg = format!("initiation: {e}");
                log::error!("group {fp:#018x}: {msg}");
                for &i in &idxs {
                    outcomes[i].error = Some(msg.clone());
                }
                continue;
            }
        };
        for &i in &idxs {
            let row = &table.rows[i];
            log::info!("running {}", row.id);
            let res = Experiment::build(row.config.clone()).and_then(|exp| run_coupled(&exp, &ck));
            match res {
                Ok(out) => match out.verdict {
                    Some(v) => {
                        outcomes[i].observed = Some(v.classification);
                        outcomes[i].first_breakup_ms = v.first_breakup_ms;
                        outcomes[i].terminated = Some(v.terminated);
                    }
                    None => {
                        outcomes[i].error = Some("window too short to classify".into());
                    }
                },
                Err(e) => {
                    log::error!("{}: {e}", row.id);
                    outcomes[i].error = Some(e.to_string());
                }
            }
        }
    }
    Ok(outcomes)
}

/// Writes the sweep outcomes as CSV, one row per experiment.
pub fn write_verdict_csv(outcomes: &[RowOutcome], path: &Path) -> Result<(), SimError> {
    let mut text = String::from(
        "id,domain,tissue,slope,fraction,patch_mm2,end_ms,expected,observed,\
         first_breakup_ms,terminated,matches,error\n",
    );
    for o in outcomes {
        let observed = o.observed.map_or(String::new(), |c| c.label().into());
        let breakup = o.first_breakup_ms.map_or(String::new(), |t| t.to_string());
        let terminated = o.terminated.map_or(String::new(), |t| t.to_string());
        let matches = o
            .matches()
            .map_or(String::new(), |m| if m { "yes".into() } else { "no".into() });
        let error = o
            .error
            .as_deref()
            .unwrap_or("")
            .replace([',', '\n'], ";");
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{observed},{breakup},{terminated},{matches},{error}\n",
            o.id,
            o.domain,
            o.tissue,
            o.slope,
            o.fraction,
            o.patch_mm2,
            o.end_ms,
            o.expected.label(),
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn tables() -> Vec<SweepTable> {
        let root = Path::new("out/sweeps");
        vec![
            SweepTable::patch_size(root, 0.42, 3),
            SweepTable::density(root, 0.42, 3),
            SweepTable::summary(root, 0.42, 3),
        ]
    }

    #[test]
    fn tables_have_the_published_shape() {
        let t = tables();
        assert_eq!(t[0].rows.len(), 5);
        assert_eq!(t[1].rows.len(), 5);
        assert_eq!(t[2].rows.len(), 24);

        let unstable = |table: &SweepTable| {
            table
                .rows
                .iter()
                .filter(|r| r.expected == Classification::Unstable)
                .count()
        };
        assert_eq!(unstable(&t[0]), 3, "three patch sizes break the spiral");
        assert_eq!(unstable(&t[1]), 5, "every density breaks the spiral");
        assert_eq!(unstable(&t[2]), 7, "seven summary rows are unstable");

        // Patch areas decrease; densities decrease.
        let areas: Vec<f64> = t[0]
            .rows
            .iter()
            .filter_map(|r| r.config.fibrosis.as_ref().map(|f| f.mean_patch_area_mm2))
            .collect();
        assert!(areas.windows(2).all(|w| w[0] > w[1]), "{areas:?}");
        let fractions: Vec<f64> = t[1]
            .rows
            .iter()
            .filter_map(|r| r.config.fibrosis.as_ref().map(|f| f.fraction))
            .collect();
        assert!(fractions.windows(2).all(|w| w[0] > w[1]), "{fractions:?}");
    }

    #[test]
    fn every_row_validates_and_has_its_own_output_dir() {
        for table in tables() {
            let mut dirs = BTreeSet::new();
            for row in &table.rows {
                row.config.validate().unwrap();
                assert!(
                    dirs.insert(row.config.experiment.output_dir.clone()),
                    "duplicate output dir in {}",
                    table.name
                );
            }
        }
    }

    #[test]
    fn initiation_groups_share_checkpoints_as_intended() {
        let t = tables();
        let groups = |table: &SweepTable| -> BTreeSet<u64> {
            table.rows.iter().map(|r| r.config.fingerprint()).collect()
        };
        // Each patch size is its own carving; ditto each density.
        assert_eq!(groups(&t[0]).len(), 5);
        assert_eq!(groups(&t[1]).len(), 5);
        // Summary: {static, deforming} x {uncarved, carved}.
        assert_eq!(groups(&t[2]).len(), 4);
        // The mid-size patch row appears in both the patch and density
        // sweeps with the same carving, so the checkpoint is shared.
        let patch_f1 = &t[0].rows[2];
        let density_f1 = &t[1].rows[0];
        assert_eq!(
            patch_f1.config.fingerprint(),
            density_f1.config.fingerprint()
        );
    }

    #[test]
    fn verdict_csv_lists_every_row() {
        let dir = tempfile::tempdir().unwrap();
        let table = SweepTable::patch_size(dir.path(), 0.42, 3);
        let mut outcomes: Vec<RowOutcome> =
            table.rows.iter().map(RowOutcome::pending).collect();
        outcomes[0].observed = Some(Classification::Stable);
        outcomes[0].terminated = Some(false);
        outcomes[1].observed = Some(Classification::Stable); // mismatch
        outcomes[1].first_breakup_ms = None;
        outcomes[2].error = Some("died, horribly, at t = 3".into());

        let path = dir.path().join("verdicts.csv");
        write_verdict_csv(&outcomes, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + outcomes.len());
        assert!(lines[1].contains("patch-N0"));
        assert!(lines[1].contains("yes"));
        assert!(lines[2].contains("no"));
        assert!(
            lines[3].contains("died; horribly; at t = 3"),
            "commas must not break the CSV: {}",
            lines[3]
        );
        assert_eq!(outcomes[0].matches(), Some(true));
        assert_eq!(outcomes[1].matches(), Some(false));
        assert_eq!(outcomes[2].matches(), None);
    }
}
