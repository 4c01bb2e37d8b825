//! Seeded carving of non-conducting patches out of a triangle mesh.
//!
//! Patches model dense scar: clusters of triangles removed from the
//! conducting domain (their `alive` flags cleared). Growth is a randomized
//! flood fill — each patch starts from a random alive triangle and expands
//! across element edges until it reaches a size drawn around the requested
//! mean. A one-element halo around every finished patch is kept off-limits
//! to later patches so that no two patches touch, even diagonally through a
//! shared edge; conduction must thread *between* obstacles, not leak across
//! a zero-width isthmus.
//!
//! The whole construction is driven by one explicit seed and is bit-stable
//! across runs and machines.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MeshError, TriMesh};

/// Target description for one carving pass.
#[derive(Debug, Clone, Copy)]
pub struct FibrosisSpec {
    /// Fraction of the alive area to remove, in `[0, 0.35]`.
    pub fraction: f64,
    /// Mean patch area in the mesh's length units squared. Individual patch
    /// targets are drawn uniformly from `[0.5, 1.5]` times this value.
    pub mean_patch_area: f64,
    /// RNG seed; equal seeds give bit-identical carvings.
    pub seed: u64,
}

/// Summary of what a carving pass actually removed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarveReport {
    /// Removed area divided by the pre-carve alive area.
    pub achieved_fraction: f64,
    /// Number of disjoint patches carved.
    pub n_patches: usize,
}

/// Carve non-conducting patches until `spec.fraction` of the alive area is
/// removed. Fails with [`MeshError::CarveShortfall`] if halo exclusions run
/// the algorithm out of room more than two area percentage points short.
pub fn carve_fibrosis(mesh: &mut TriMesh, spec: &FibrosisSpec) -> Result<CarveReport, MeshError> {
    if !spec.fraction.is_finite() || !(0.0..=0.35).contains(&spec.fraction) {
        return Err(MeshError::BadParameter(format!(
            "fibrosis fraction {} outside [0, 0.35]",
            spec.fraction
        )));
    }
    if spec.fraction == 0.0 {
        return Ok(CarveReport {
            achieved_fraction: 0.0,
            n_patches: 0,
        });
    }
    if !spec.mean_patch_area.is_finite() || spec.mean_patch_area <= 0.0 {
        return Err(MeshError::BadParameter(format!(
            "mean patch area {} must be positive",
            spec.mean_patch_area
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = mesh.alive_area();
    let goal = spec.fraction * total;

    // Working state: `carved` marks removed triangles, `blocked` marks the
    // halo (still conducting, but unavailable as future patch material).
    let n = mesh.n_tris();
    let mut carved = vec![false; n];
    let mut blocked = vec![false; n];
    for t in 0..n {
        if !mesh.is_alive(t) {
            carved[t] = true; // pre-existing holes count as occupied space
            blocked[t] = true;
        }
    }

    let mut removed = 0.0f64;
    let mut n_patches = 0usize;
    // Candidate seeds in a deterministic order; retired as they get used up.
    let mut free: Vec<usize> = (0..n).filter(|&t| !blocked[t]).collect();

    while removed < goal && !free.is_empty() {
        let target = spec.mean_patch_area * rng.gen_range(0.5..1.5);
        // Don't overshoot the global goal by a whole patch at the very end.
        let target = target.min((goal - removed).max(spec.mean_patch_area * 0.5));

        // Pick a seed triangle still available.
        let start = loop {
            if free.is_empty() {
                break None;
            }
            let k = rng.gen_range(0..free.len());
            let t = free.swap_remove(k);
            if !blocked[t] {
                break Some(t);
            }
        };
        let Some(start) = start else { break };

        // Grow by random frontier picks across edges.
        let mut patch = vec![start];
        let mut member = std::collections::HashSet::new();
        member.insert(start);
        let mut area = mesh.signed_area(start);
        let mut frontier: Vec<usize> = mesh
            .tri_neighbors(start)
            .into_iter()
            .flatten()
            .filter(|&t| !blocked[t] && !member.contains(&t))
            .collect();

        while area < target && !frontier.is_empty() {
            let k = rng.gen_range(0..frontier.len());
            let t = frontier.swap_remove(k);
            if blocked[t] || member.contains(&t) {
                continue;
            }
            member.insert(t);
            patch.push(t);
            area += mesh.signed_area(t);
            for nb in mesh.tri_neighbors(t).into_iter().flatten() {
                if !blocked[nb] && !member.contains(&nb) {
                    frontier.push(nb);
                }
            }
        }

        // Commit the patch and block it plus its edge-adjacency halo.
        for &t in &patch {
            carved[t] = true;
            blocked[t] = true;
        }
        for &t in &patch {
            for nb in mesh.tri_neighbors(t).into_iter().flatten() {
                blocked[nb] = true;
            }
        }
        removed += area;
        n_patches += 1;
    }

    let achieved = removed / total;
    if achieved < spec.fraction - 0.02 {
        return Err(MeshError::CarveShortfall {
            requested: spec.fraction,
            achieved,
        });
    }

    let alive: Vec<bool> = carved.iter().map(|&c| !c).collect();
    mesh.set_alive(alive)?;
    Ok(CarveReport {
        achieved_fraction: achieved,
        n_patches,
    })
}
