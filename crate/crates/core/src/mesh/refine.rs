//! Uniform midpoint refinement and the fine-to-coarse embedding map.
//!
//! Each refinement level splits every triangle into four by connecting edge
//! midpoints, so `levels` rounds turn one coarse element into `4^levels`
//! geometrically similar children that partition it exactly. The
//! [`EmbeddingMap`] remembers, for every fine triangle and every fine node,
//! which coarse element contains it and at which barycentric coordinates —
//! the bridge that carries active tension down to the mechanics mesh and
//! carries mechanical deformation back up to the fine mesh.

use super::{MeshError, TriMesh};

/// Fine-mesh-to-coarse-mesh correspondence produced by [`refine_uniform`].
#[derive(Debug, Clone)]
pub struct EmbeddingMap {
    levels: usize,
    /// Coarse parent element of each fine triangle.
    fine_parent: Vec<usize>,
    /// Barycentric coordinates (in the parent) of each fine triangle's corners.
    corner_bary: Vec<[[f64; 3]; 3]>,
    /// Fine children of each coarse triangle, in CSR layout.
    child_ptr: Vec<usize>,
    child_idx: Vec<usize>,
    /// One containing coarse element per fine node, with barycentric coords.
    node_parent: Vec<usize>,
    node_bary: Vec<[f64; 3]>,
}

impl EmbeddingMap {
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn fine_parent(&self, fine_tri: usize) -> usize {
        self.fine_parent[fine_tri]
    }

    /// Barycentric coordinates of fine triangle `t`'s three corners inside
    /// its coarse parent.
    pub fn corner_bary(&self, fine_tri: usize) -> [[f64; 3]; 3] {
        self.corner_bary[fine_tri]
    }

    /// Fine triangles descended from coarse triangle `c`.
    pub fn children(&self, coarse_tri: usize) -> &[usize] {
        &self.child_idx[self.child_ptr[coarse_tri]..self.child_ptr[coarse_tri + 1]]
    }

    pub fn n_coarse(&self) -> usize {
        self.child_ptr.len() - 1
    }

    pub fn n_fine_tris(&self) -> usize {
        self.fine_parent.len()
    }

    pub fn n_fine_nodes(&self) -> usize {
        self.node_parent.len()
    }

    /// Coarse element containing fine node `v` and its barycentric position.
    /// Nodes on shared coarse edges report one of the valid parents; any
    /// continuous coarse field evaluates identically from either side.
    pub fn node_location(&self, v: usize) -> (usize, [f64; 3]) {
        (self.node_parent[v], self.node_bary[v])
    }
}

/// Refine `levels >= 1` times, returning the fine mesh and its embedding in
/// the input mesh. Children inherit the parent's alive flag.
pub fn refine_uniform(mesh: &TriMesh, levels: usize) -> Result<(TriMesh, EmbeddingMap), MeshError> {
    if levels == 0 {
        return Err(MeshError::BadParameter(
            "refinement depth must be at least 1".into(),
        ));
    }
    let n_coarse = mesh.n_tris();

    let mut fine = mesh.clone();
    // Identity embedding, then compose one level at a time.
    let mut fine_parent: Vec<usize> = (0..n_coarse).collect();
    let mut corner_bary: Vec<[[f64; 3]; 3]> = (0..n_coarse)
        .map(|_| [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        .collect();

    for _ in 0..levels {
        let (next, split_parent, split_bary) = split_once(&fine)?;
        let mut new_parent = Vec::with_capacity(next.n_tris());
        let mut new_bary = Vec::with_capacity(next.n_tris());
        for t in 0..next.n_tris() {
            let mid = split_parent[t]; // parent within `fine`
            let ultimate = fine_parent[mid];
            let base = corner_bary[mid];
            let mut composed = [[0.0f64; 3]; 3];
            for corner in 0..3 {
                let local = split_bary[t][corner]; // bary within `fine` tri
                for j in 0..3 {
                    for k in 0..3 {
                        composed[corner][k] += local[j] * base[j][k];
                    }
                }
            }
            new_parent.push(ultimate);
            new_bary.push(composed);
        }
        fine = next;
        fine_parent = new_parent;
        corner_bary = new_bary;
    }

    // Invert parent lists into CSR children.
    let mut counts = vec![0usize; n_coarse];
    for &p in &fine_parent {
        counts[p] += 1;
    }
    let mut child_ptr = vec![0usize; n_coarse + 1];
    for i in 0..n_coarse {
        child_ptr[i + 1] = child_ptr[i] + counts[i];
    }
    let mut child_idx = vec![0usize; fine_parent.len()];
    let mut cursor = child_ptr.clone();
    for (t, &p) in fine_parent.iter().enumerate() {
        child_idx[cursor[p]] = t;
        cursor[p] += 1;
    }

    // Locate every fine node through any fine triangle that has it as a corner.
    let mut node_parent = vec![usize::MAX; fine.n_nodes()];
    let mut node_bary = vec![[0.0f64; 3]; fine.n_nodes()];
    for t in 0..fine.n_tris() {
        let tri = fine.tri(t);
        for corner in 0..3 {
            let v = tri[corner];
            if node_parent[v] == usize::MAX {
                node_parent[v] = fine_parent[t];
                node_bary[v] = corner_bary[t][corner];
            }
        }
    }

    let map = EmbeddingMap {
        levels,
        fine_parent,
        corner_bary,
        child_ptr,
        child_idx,
        node_parent,
        node_bary,
    };
    Ok((fine, map))
}

/// One midpoint split. Returns the finer mesh plus each child's parent index
/// and corner barycentrics within that parent.
#[allow(clippy::type_complexity)]
fn split_once(mesh: &TriMesh) -> Result<(TriMesh, Vec<usize>, Vec<[[f64; 3]; 3]>), MeshError> {
    let nv = mesh.n_nodes();
    let mut coords = mesh.coords().to_vec();
    // Midpoint node of edge e gets index nv + e.
    coords.extend((0..mesh.n_edges()).map(|e| mesh.edge_midpoint(e)));

    let mut tris = Vec::with_capacity(mesh.n_tris() * 4);
    let mut alive = Vec::with_capacity(mesh.n_tris() * 4);
    let mut parent = Vec::with_capacity(mesh.n_tris() * 4);
    let mut bary = Vec::with_capacity(mesh.n_tris() * 4);

    // Barycentric labels inside the parent: corners and edge midpoints.
    const C0: [f64; 3] = [1.0, 0.0, 0.0];
    const C1: [f64; 3] = [0.0, 1.0, 0.0];
    const C2: [f64; 3] = [0.0, 0.0, 1.0];
    const M01: [f64; 3] = [0.5, 0.5, 0.0];
    const M12: [f64; 3] = [0.0, 0.5, 0.5];
    const M20: [f64; 3] = [0.5, 0.0, 0.5];

    for t in 0..mesh.n_tris() {
        let [a, b, c] = mesh.tri(t);
        let e = mesh.tri_edges(t);
        let mab = nv + e[0];
        let mbc = nv + e[1];
        let mca = nv + e[2];
        let children: [([usize; 3], [[f64; 3]; 3]); 4] = [
            ([a, mab, mca], [C0, M01, M20]),
            ([mab, b, mbc], [M01, C1, M12]),
            ([mca, mbc, c], [M20, M12, C2]),
            ([mab, mbc, mca], [M01, M12, M20]),
        ];
        for (child, child_bary) in children {
            tris.push(child);
            alive.push(mesh.is_alive(t));
            parent.push(t);
            bary.push(child_bary);
        }
    }

    let next = TriMesh::from_raw_with_alive(coords, tris, alive)?;
    Ok((next, parent, bary))
}

#[cfg(test)]
mod tests {
    use super::super::generate_square_mesh;
    use super::*;

    #[test]
    fn each_level_quadruples_triangles() {
        let coarse = generate_square_mesh(10.0, 2.0, 1).unwrap();
        let (fine, map) = refine_uniform(&coarse, 2).unwrap();
        assert_eq!(fine.n_tris(), coarse.n_tris() * 16);
        assert_eq!(map.levels(), 2);
        for c in 0..coarse.n_tris() {
            assert_eq!(map.children(c).len(), 16);
        }
    }

    #[test]
    fn children_partition_the_parent_area() {
        let coarse = generate_square_mesh(10.0, 2.0, 3).unwrap();
        let (fine, map) = refine_uniform(&coarse, 3).unwrap();
        for c in 0..coarse.n_tris() {
            let parent_area = coarse.signed_area(c);
            let child_sum: f64 = map.children(c).iter().map(|&t| fine.signed_area(t)).sum();
            assert!(
                (child_sum - parent_area).abs() < 1e-12 * parent_area,
                "triangle {c}: children sum {child_sum}, parent {parent_area}"
            );
        }
        assert!((fine.total_area() - coarse.total_area()).abs() < 1e-9);
    }

    #[test]
    fn corner_barycentrics_reproduce_fine_coordinates() {
        let coarse = generate_square_mesh(8.0, 1.5, 5).unwrap();
        let (fine, map) = refine_uniform(&coarse, 2).unwrap();
        for t in 0..fine.n_tris() {
            let p = map.fine_parent(t);
            let [pa, pb, pc] = coarse.tri(p);
            let cp = [coarse.coords()[pa], coarse.coords()[pb], coarse.coords()[pc]];
            let bary = map.corner_bary(t);
            for corner in 0..3 {
                let v = fine.tri(t)[corner];
                let expect = [
                    bary[corner][0] * cp[0][0] + bary[corner][1] * cp[1][0] + bary[corner][2] * cp[2][0],
                    bary[corner][0] * cp[0][1] + bary[corner][1] * cp[1][1] + bary[corner][2] * cp[2][1],
                ];
                let got = fine.coords()[v];
                assert!((got[0] - expect[0]).abs() < 1e-12);
                assert!((got[1] - expect[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn node_locations_land_inside_their_parent() {
        let coarse = generate_square_mesh(8.0, 1.5, 2).unwrap();
        let (fine, map) = refine_uniform(&coarse, 1).unwrap();
        for v in 0..fine.n_nodes() {
            let (p, bary) = map.node_location(v);
            assert!(p < coarse.n_tris());
            let sum: f64 = bary.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(bary.iter().all(|&b| (-1e-12..=1.0 + 1e-12).contains(&b)));
        }
    }

    #[test]
    fn refinement_halves_mean_edge_length() {
        let coarse = generate_square_mesh(10.0, 1.0, 4).unwrap();
        let (fine, _) = refine_uniform(&coarse, 1).unwrap();
        let ratio = coarse.mean_edge_length() / fine.mean_edge_length();
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn zero_levels_is_rejected() {
        let coarse = generate_square_mesh(10.0, 2.0, 0).unwrap();
        assert!(matches!(
            refine_uniform(&coarse, 0),
            Err(MeshError::BadParameter(_))
        ));
    }

    #[test]
    fn dead_parents_produce_dead_children() {
        let coarse = generate_square_mesh(10.0, 2.0, 6).unwrap();
        let mut flags = vec![true; coarse.n_tris()];
        flags[3] = false;
        let mut carved = coarse.clone();
        carved.set_alive(flags).unwrap();
        let (fine, map) = refine_uniform(&carved, 2).unwrap();
        for &child in map.children(3) {
            assert!(!fine.is_alive(child));
        }
        assert_eq!(
            fine.alive().iter().filter(|&&a| !a).count(),
            16,
            "only the 16 descendants of triangle 3 are dead"
        );
    }
}
