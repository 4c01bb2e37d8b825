//! Restriction of the nodal active-tension field from the fine
//! electrophysiology mesh onto the coarse mechanics elements.
//!
//! Each coarse element receives the area-weighted mean of the tension over
//! its fine children, with the nodal field averaged per child triangle.
//! Carved (non-conducting) children contribute zero tension but their area
//! still counts in the denominator: scar occupies space and pulls the
//! element mean down rather than being renormalised away, which is exactly
//! the passive-inclusion behaviour the mechanics expects.

use crate::mesh::{EmbeddingMap, TriMesh};

/// Averages a fine nodal tension field into per-coarse-element values.
///
/// `fine` must be the reference-configuration fine mesh the map was built
/// from (restriction happens in material coordinates), `ta` one value per
/// fine node, and `out` one slot per coarse element.
pub fn restrict_tension(fine: &TriMesh, map: &EmbeddingMap, ta: &[f64], out: &mut [f64]) {
    assert_eq!(ta.len(), fine.n_nodes(), "tension field size");
    assert_eq!(out.len(), map.n_coarse(), "output size");
    for (ct, slot) in out.iter_mut().enumerate() {
        let mut weighted = 0.0;
        let mut total_area = 0.0;
        for &ft in map.children(ct) {
            let area = fine.signed_area(ft).abs();
            total_area += area;
            if fine.is_alive(ft) {
                let [i, j, k] = fine.tri(ft);
                weighted += area * (ta[i] + ta[j] + ta[k]) / 3.0;
            }
        }
        *slot = if total_area > 0.0 {
            weighted / total_area
        } else {
            0.0
        };
    }
}
