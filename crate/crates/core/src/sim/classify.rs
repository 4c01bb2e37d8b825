//! Spiral-wave stability classification from voltage snapshots.
//!
//! The classifier works on a fixed 10 ms cadence. Each node gets a phase
//! from the current and previous snapshot, `atan2(V(t) - V*, V(t - tau) -
//! V*)` with `V* = -40` mV and `tau` equal to the cadence; a node whose
//! ordered one-ring accumulates a full `2*pi` of wrapped phase encloses a
//! phase singularity. Adjacent flagged nodes are merged into one
//! singularity (a rotor core sitting inside a triangle flags all of its
//! corners), so the reported count is the number of distinct cores.
//! Wavefront fragments are counted as connected components of alive
//! triangles whose vertices straddle 0 mV.
//!
//! A run is unstable when more than one core persists for at least 500 ms
//! after a 1000 ms grace period; a single meandering core is the stable
//! outcome. A run whose final snapshot has neither cores nor fronts has
//! terminated: the wave extinguished itself.

use serde::Serialize;

use crate::mesh::TriMesh;

use super::SimError;

/// Fixed cadence of the stability analysis, ms.
pub const ANALYSIS_INTERVAL_MS: f64 = 10.0;
/// Voltage offset that turns (V(t), V(t - tau)) into a rotation, mV.
pub const PHASE_REFERENCE_MV: f64 = -40.0;
/// A one-ring counts as enclosing a core when its wrapped phase sum is
/// within this tolerance of a full turn.
const WINDING_TOLERANCE: f64 = 0.1;
/// Multiple cores must persist this long to count as breakup, ms.
pub const BREAKUP_PERSIST_MS: f64 = 500.0;
/// Snapshots earlier than this after analysis start are ignored by the
/// breakup rule (transients from the parameter swap), ms.
pub const ANALYSIS_SETTLE_MS: f64 = 1000.0;
/// Minimum series span for a meaningful verdict, ms.
pub const MIN_SPAN_MS: f64 = 2000.0;

/// Per-snapshot counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SnapshotAnalysis {
    pub t_ms: f64,
    /// Distinct phase singularities (rotor cores).
    pub singularities: usize,
    /// Connected wavefront pieces crossing 0 mV.
    pub fragments: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Classification {
    Stable,
    Unstable,
}

impl Classification {
    pub fn label(self) -> &'static str {
        match self {
            Classification::Stable => "stable",
            Classification::Unstable => "unstable",
        }
    }
}

/// Outcome of a full run.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityVerdict {
    pub classification: Classification,
    /// Start of the first persistent multi-core episode, if any; present
    /// exactly when the classification is unstable.
    pub first_breakup_ms: Option<f64>,
    /// The wave extinguished before the end of the run.
    pub terminated: bool,
    pub series: Vec<SnapshotAnalysis>,
}

/// Disjoint-set forest used for core clustering and fragment counting.
struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

fn wrap_to_pi(d: f64) -> f64 {
    d - std::f64::consts::TAU * (d / std::f64::consts::TAU).round()
}

/// Streaming classifier: feed it voltage fields at the analysis cadence,
/// collect the verdict at the end.
pub struct OnlineClassifier {
    rings: Vec<Option<Vec<usize>>>,
    edges: Vec<[usize; 2]>,
    tris: Vec<[usize; 3]>,
    alive: Vec<bool>,
    /// Pairs of alive triangles sharing an edge.
    tri_pairs: Vec<[usize; 2]>,
    prev: Option<Vec<f64>>,
    series: Vec<SnapshotAnalysis>,
    phase: Vec<f64>,
    flagged: Vec<bool>,
}

impl OnlineClassifier {
    /// Precomputes ring and adjacency caches for `mesh`. Nodes whose ring
    /// is open (boundary, next to carved tissue, or non-manifold) are never
    /// flagged; cores are only detected in the interior of conducting
    /// tissue.
    pub fn new(mesh: &TriMesh) -> Self {
        let n = mesh.n_nodes();
        let rings = (0..n).map(|v| mesh.ordered_one_ring(v)).collect();
        let mut tri_pairs = Vec::new();
        for e in 0..mesh.n_edges() {
            if let [Some(a), Some(b)] = mesh.edge_tris(e) {
                if mesh.is_alive(a) && mesh.is_alive(b) {
                    tri_pairs.push([a, b]);
                }
            }
        }
        OnlineClassifier {
            rings,
            edges: mesh.edges().to_vec(),
            tris: mesh.tris().to_vec(),
            alive: mesh.alive().to_vec(),
            tri_pairs,
            prev: None,
            series: Vec::new(),
            phase: vec![0.0; n],
            flagged: vec![false; n],
        }
    }

    /// Feeds one voltage field. The first call only primes the phase
    /// delay; every later call appends (and returns) one analysis row.
    pub fn push(&mut self, t_ms: f64, v: &[f64]) -> Option<SnapshotAnalysis> {
        assert_eq!(v.len(), self.phase.len(), "voltage field size");
        let Some(prev) = &self.prev else {
            self.prev = Some(v.to_vec());
            return None;
        };

        for (k, p) in self.phase.iter_mut().enumerate() {
            *p = f64::atan2(v[k] - PHASE_REFERENCE_MV, prev[k] - PHASE_REFERENCE_MV);
        }
        for (k, f) in self.flagged.iter_mut().enumerate() {
            *f = match &self.rings[k] {
                Some(ring) if ring.len() >= 3 => {
                    let mut w = 0.0;
                    for i in 0..ring.len() {
                        let a = self.phase[ring[i]];
                        let b = self.phase[ring[(i + 1) % ring.len()]];
                        w += wrap_to_pi(b - a);
                    }
                    w.abs() >= std::f64::consts::TAU - WINDING_TOLERANCE
                }
                _ => false,
            };
        }
        let mut dsu = Dsu::new(self.flagged.len());
        for e in &self.edges {
            if self.flagged[e[0]] && self.flagged[e[1]] {
                dsu.union(e[0], e[1]);
            }
        }
        let mut roots: Vec<usize> = (0..self.flagged.len())
            .filter(|&k| self.flagged[k])
            .map(|k| dsu.find(k))
            .collect();
        roots.sort_unstable();
        roots.dedup();
        let singularities = roots.len();

        let crossing: Vec<bool> = self
            .tris
            .iter()
            .zip(&self.alive)
            .map(|(t, &alive)| {
                let (lo, hi) = t.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &k| {
                    (lo.min(v[k]), hi.max(v[k]))
                });
                alive && lo < 0.0 && hi > 0.0
            })
            .collect();
        let mut dsu = Dsu::new(self.tris.len());
        for p in &self.tri_pairs {
            if crossing[p[0]] && crossing[p[1]] {
                dsu.union(p[0], p[1]);
            }
        }
        let mut roots: Vec<usize> = (0..self.tris.len())
            .filter(|&t| crossing[t])
            .map(|t| dsu.find(t))
            .collect();
        roots.sort_unstable();
        roots.dedup();
        let fragments = roots.len();

        self.prev.as_mut().unwrap().copy_from_slice(v);
        let row = SnapshotAnalysis {
            t_ms,
            singularities,
            fragments,
        };
        self.series.push(row);
        Some(row)
    }

    /// Number of analysis rows produced so far.
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn series(&self) -> &[SnapshotAnalysis] {
        &self.series
    }

    pub fn finish(self) -> Result<StabilityVerdict, SimError> {
        classify_stability(self.series)
    }
}

/// Applies the persistence rule to a finished analysis series.
///
/// Fails on an empty series or one spanning less than [`MIN_SPAN_MS`]:
/// a verdict from a shorter window would be noise, not a result.
pub fn classify_stability(series: Vec<SnapshotAnalysis>) -> Result<StabilityVerdict, SimError> {
    let Some(first) = series.first() else {
        return Err(SimError::EmptySeries);
    };
    let span = series.last().unwrap().t_ms - first.t_ms;
    if span < MIN_SPAN_MS {
        return Err(SimError::ShortSeries {
            span_ms: span,
            need_ms: MIN_SPAN_MS,
        });
    }

    let analysis_from = first.t_ms + ANALYSIS_SETTLE_MS;
    let mut first_breakup = None;
    let mut run_start: Option<f64> = None;
    for row in &series {
        if row.t_ms < analysis_from {
            continue;
        }
        if row.singularities > 1 {
            let start = *run_start.get_or_insert(row.t_ms);
            if row.t_ms - start >= BREAKUP_PERSIST_MS {
                first_breakup = Some(start);
                break;
            }
        } else {
            run_start = None;
        }
    }

    let last = series.last().unwrap();
    let terminated = last.singularities == 0 && last.fragments == 0;
    Ok(StabilityVerdict {
        classification: if first_breakup.is_some() {
            Classification::Unstable
        } else {
            Classification::Stable
        },
        first_breakup_ms: first_breakup,
        terminated,
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate_square_mesh;

    /// Rotor phase field: the voltage pair (V(t), V(t - tau)) rotates a
    /// quarter turn per snapshot, so the node phase equals the spatial
    /// angle field (up to sign and offset) and its winding is exact.
    fn rotor_field(mesh: &TriMesh, cores: &[([f64; 2], f64)], step: usize) -> Vec<f64> {
        mesh.coords()
            .iter()
            .map(|c| {
                let chi: f64 = cores
                    .iter()
                    .map(|(p, s)| s * f64::atan2(c[1] - p[1], c[0] - p[0]))
                    .sum();
                PHASE_REFERENCE_MV + 30.0 * (chi + step as f64 * std::f64::consts::FRAC_PI_2).sin()
            })
            .collect()
    }

    fn drive(mesh: &TriMesh, cores: &[([f64; 2], f64)], n_pushes: usize) -> OnlineClassifier {
        let mut cls = OnlineClassifier::new(mesh);
        for step in 0..n_pushes {
            let t = step as f64 * ANALYSIS_INTERVAL_MS;
            cls.push(t, &rotor_field(mesh, cores, step));
        }
        cls
    }

    #[test]
    fn a_single_rotor_is_one_core_and_stable() {
        let mesh = generate_square_mesh(20.0, 1.0, 11).unwrap();
        let cores = [([10.3, 10.2], 1.0)];
        let cls = drive(&mesh, &cores, 211);
        for row in cls.series() {
            assert_eq!(
                row.singularities, 1,
                "t = {}: expected one core, got {}",
                row.t_ms, row.singularities
            );
        }
        let verdict = cls.finish().unwrap();
        assert_eq!(verdict.classification, Classification::Stable);
        assert!(verdict.first_breakup_ms.is_none());
        assert!(!verdict.terminated);
    }

    #[test]
    fn four_persistent_cores_are_unstable() {
        let mesh = generate_square_mesh(20.0, 1.0, 11).unwrap();
        let cores = [
            ([5.3, 5.2], 1.0),
            ([14.3, 5.2], -1.0),
            ([5.3, 14.2], -1.0),
            ([14.3, 14.2], 1.0),
        ];
        let cls = drive(&mesh, &cores, 211);
        for row in cls.series() {
            assert_eq!(
                row.singularities, 4,
                "t = {}: expected four cores, got {}",
                row.t_ms, row.singularities
            );
        }
        let verdict = cls.finish().unwrap();
        assert_eq!(verdict.classification, Classification::Unstable);
        // Analysis starts at the second push (10 ms); breakup is reported
        // at the first row past the 1000 ms grace period.
        let expect = 10.0 + ANALYSIS_SETTLE_MS;
        assert_eq!(verdict.first_breakup_ms, Some(expect));
    }

    #[test]
    fn quiescent_tissue_is_stable_and_terminated() {
        let mesh = generate_square_mesh(20.0, 1.0, 11).unwrap();
        let mut cls = OnlineClassifier::new(&mesh);
        let v = vec![-85.0; mesh.n_nodes()];
        for step in 0..211 {
            cls.push(step as f64 * ANALYSIS_INTERVAL_MS, &v);
        }
        let verdict = cls.finish().unwrap();
        assert_eq!(verdict.classification, Classification::Stable);
        assert!(verdict.terminated);
        for row in &verdict.series {
            assert_eq!(row.singularities, 0);
            assert_eq!(row.fragments, 0);
        }
    }

    #[test]
    fn fragment_count_tracks_separate_fronts() {
        let mesh = generate_square_mesh(20.0, 1.0, 11).unwrap();
        let mut cls = OnlineClassifier::new(&mesh);
        // One planar front.
        let one: Vec<f64> = mesh
            .coords()
            .iter()
            .map(|c| if c[0] < 8.0 { 20.0 } else { -80.0 })
            .collect();
        // Two excited bands, each touching its own domain edge, so each
        // contributes exactly one crossing line.
        let two: Vec<f64> = mesh
            .coords()
            .iter()
            .map(|c| if c[0] < 4.0 || c[0] > 12.0 { 20.0 } else { -80.0 })
            .collect();
        cls.push(0.0, &one);
        let row = cls.push(10.0, &one).unwrap();
        assert_eq!(row.fragments, 1, "one planar front");
        let row = cls.push(20.0, &two).unwrap();
        assert_eq!(row.fragments, 2, "two separated fronts");
    }

    #[test]
    fn a_brief_flicker_of_extra_cores_stays_stable() {
        // Hand-built series: one core except for a 300 ms excursion to
        // three cores, shorter than the persistence requirement.
        let mut series = Vec::new();
        let mut t = 0.0;
        while t <= 4000.0 {
            let s = if (2000.0..2300.0).contains(&t) { 3 } else { 1 };
            series.push(SnapshotAnalysis {
                t_ms: t,
                singularities: s,
                fragments: s,
            });
            t += ANALYSIS_INTERVAL_MS;
        }
        let verdict = classify_stability(series).unwrap();
        assert_eq!(verdict.classification, Classification::Stable);

        // The same excursion stretched past 500 ms flips the verdict.
        let mut series = Vec::new();
        let mut t = 0.0;
        while t <= 4000.0 {
            let s = if (2000.0..2600.0).contains(&t) { 3 } else { 1 };
            series.push(SnapshotAnalysis {
                t_ms: t,
                singularities: s,
                fragments: s,
            });
            t += ANALYSIS_INTERVAL_MS;
        }
        let verdict = classify_stability(series).unwrap();
        assert_eq!(verdict.classification, Classification::Unstable);
        assert_eq!(verdict.first_breakup_ms, Some(2000.0));
    }

    #[test]
    fn breakup_during_the_grace_period_is_ignored() {
        let mut series = Vec::new();
        let mut t = 0.0;
        while t <= 4000.0 {
            // Many cores only before the grace period ends.
            let s = if t < 900.0 { 5 } else { 1 };
            series.push(SnapshotAnalysis {
                t_ms: t,
                singularities: s,
                fragments: s,
            });
            t += ANALYSIS_INTERVAL_MS;
        }
        let verdict = classify_stability(series).unwrap();
        assert_eq!(verdict.classification, Classification::Stable);
    }

    #[test]
    fn short_or_empty_series_are_rejected() {
        assert!(matches!(
            classify_stability(Vec::new()),
            Err(SimError::EmptySeries)
        ));
        let series: Vec<SnapshotAnalysis> = (0..100)
            .map(|i| SnapshotAnalysis {
                t_ms: i as f64 * ANALYSIS_INTERVAL_MS,
                singularities: 1,
                fragments: 1,
            })
            .collect();
        assert!(matches!(
            classify_stability(series),
            Err(SimError::ShortSeries { .. })
        ));
    }
}
