//! Snapshot writers for voltage fields: CSV for scripting, legacy-text VTK
//! for mesh viewers, and PGM rasters for quick visual checks without any
//! viewer at all.

use super::{EpError, NodeMap};
use crate::mesh::TriMesh;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Grayscale window for rasters: voltages at or below the floor map to the
/// darkest tissue shade, at or above the ceiling to white.
const RASTER_V_LO: f64 = -90.0;
const RASTER_V_HI: f64 = 40.0;
/// Tissue pixels occupy [32, 255]; 0 marks pixels outside the conducting
/// domain so obstacles stay visible.
const RASTER_TISSUE_FLOOR: u8 = 32;

/// Write one row per conducting node: full-mesh index, position, voltage.
pub fn write_voltage_csv(
    path: &Path,
    mesh: &TriMesh,
    node_map: &NodeMap,
    v: &[f64],
) -> Result<(), EpError> {
    assert_eq!(v.len(), node_map.n_sys());
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "node,x,y,v_mv")?;
    for (sys, &full) in node_map.sys_nodes().iter().enumerate() {
        let [x, y] = mesh.coords()[full];
        writeln!(w, "{full},{x:.9},{y:.9},{:.9}", v[sys])?;
    }
    w.flush()?;
    Ok(())
}

/// Write the alive part of the mesh with its voltage field as a legacy-text
/// unstructured grid. Every mesh node is listed so cell indices stay valid;
/// non-conducting nodes carry `fill`.
pub fn write_voltage_vtk(
    path: &Path,
    mesh: &TriMesh,
    node_map: &NodeMap,
    v: &[f64],
    fill: f64,
) -> Result<(), EpError> {
    assert_eq!(v.len(), node_map.n_sys());
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# vtk DataFile Version 2.0")?;
    writeln!(w, "membrane voltage")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;

    writeln!(w, "POINTS {} float", mesh.n_nodes())?;
    for &[x, y] in mesh.coords() {
        writeln!(w, "{x:.6e} {y:.6e} 0.0")?;
    }

    let alive: Vec<usize> = (0..mesh.n_tris()).filter(|&t| mesh.is_alive(t)).collect();
    writeln!(w, "CELLS {} {}", alive.len(), 4 * alive.len())?;
    for &t in &alive {
        let [a, b, c] = mesh.tri(t);
        writeln!(w, "3 {a} {b} {c}")?;
    }
    writeln!(w, "CELL_TYPES {}", alive.len())?;
    for _ in &alive {
        writeln!(w, "5")?;
    }

    writeln!(w, "POINT_DATA {}", mesh.n_nodes())?;
    writeln!(w, "SCALARS voltage float 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for full in 0..mesh.n_nodes() {
        let value = match node_map.sys_of(full) {
            Some(sys) => v[sys],
            None => fill,
        };
        writeln!(w, "{value:.6e}")?;
    }
    w.flush()?;
    Ok(())
}

/// Rasterise the voltage field to an ASCII grayscale image `width` pixels
/// across (height follows the mesh aspect ratio). Pixels outside the
/// conducting domain are black.
pub fn write_voltage_pgm(
    path: &Path,
    mesh: &TriMesh,
    node_map: &NodeMap,
    v: &[f64],
    width: usize,
) -> Result<(), EpError> {
    assert_eq!(v.len(), node_map.n_sys());
    if width < 2 {
        return Err(EpError::BadParameter(format!("raster width {width}")));
    }
    let (mut x_lo, mut y_lo) = (f64::INFINITY, f64::INFINITY);
    let (mut x_hi, mut y_hi) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &[x, y] in mesh.coords() {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let span_x = x_hi - x_lo;
    let span_y = y_hi - y_lo;
    if !(span_x > 0.0) || !(span_y > 0.0) {
        return Err(EpError::BadParameter("mesh has a degenerate bounding box".into()));
    }
    let height = ((width as f64) * span_y / span_x).round().max(2.0) as usize;
    let pix = span_x / width as f64;

    // Bucket grid over alive triangles for point location.
    let cell = (2.0 * mesh.mean_edge_length()).max(pix);
    let nx = ((span_x / cell).ceil() as usize).max(1);
    let ny = ((span_y / cell).ceil() as usize).max(1);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); nx * ny];
    let clamp_idx = |q: f64, lo: f64, n: usize| -> usize {
        (((q - lo) / cell).floor() as isize).clamp(0, n as isize - 1) as usize
    };
    for t in 0..mesh.n_tris() {
        if !mesh.is_alive(t) {
            continue;
        }
        let [a, b, c] = mesh.tri(t);
        let ps = [mesh.coords()[a], mesh.coords()[b], mesh.coords()[c]];
        let tx_lo = clamp_idx(ps.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min), x_lo, nx);
        let tx_hi = clamp_idx(ps.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max), x_lo, nx);
        let ty_lo = clamp_idx(ps.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min), y_lo, ny);
        let ty_hi = clamp_idx(ps.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max), y_lo, ny);
        for gy in ty_lo..=ty_hi {
            for gx in tx_lo..=tx_hi {
                buckets[gy * nx + gx].push(t);
            }
        }
    }

    let sample = |qx: f64, qy: f64| -> Option<f64> {
        let bucket = &buckets[clamp_idx(qy, y_lo, ny) * nx + clamp_idx(qx, x_lo, nx)];
        for &t in bucket {
            let [a, b, c] = mesh.tri(t);
            let p0 = mesh.coords()[a];
            let p1 = mesh.coords()[b];
            let p2 = mesh.coords()[c];
            let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
            let l1 = ((qx - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (qy - p0[1])) / det;
            let l2 = ((p1[0] - p0[0]) * (qy - p0[1]) - (qx - p0[0]) * (p1[1] - p0[1])) / det;
            let l0 = 1.0 - l1 - l2;
            if l0 >= -1e-9 && l1 >= -1e-9 && l2 >= -1e-9 {
                let va = v[node_map.sys_of(a).expect("alive-element node")];
                let vb = v[node_map.sys_of(b).expect("alive-element node")];
                let vc = v[node_map.sys_of(c).expect("alive-element node")];
                return Some(l0 * va + l1 * vb + l2 * vc);
            }
        }
        None
    };

    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "P2")?;
    writeln!(w, "{width} {height}")?;
    writeln!(w, "255")?;
    for row in 0..height {
        // Row 0 is the top of the image: the largest y.
        let qy = y_hi - (row as f64 + 0.5) * span_y / height as f64;
        let mut line = String::with_capacity(4 * width);
        for col in 0..width {
            let qx = x_lo + (col as f64 + 0.5) * pix;
            let gray = match sample(qx, qy) {
                Some(value) => {
                    let unit = ((value - RASTER_V_LO) / (RASTER_V_HI - RASTER_V_LO))
                        .clamp(0.0, 1.0);
                    RASTER_TISSUE_FLOOR
                        + (unit * (255 - RASTER_TISSUE_FLOOR) as f64).round() as u8
                }
                None => 0,
            };
            if col > 0 {
                line.push(' ');
            }
            line.push_str(&gray.to_string());
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}
