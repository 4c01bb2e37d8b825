//! Plain-text mesh persistence.
//!
//! A mesh is stored as two companion files sharing a stem: `<stem>.node`
//! with coordinates and `<stem>.ele` with connectivity plus the alive flag.
//! Coordinates are written with 17 significant digits so a write/read
//! round trip is bit-exact.
//!
//! ```text
//! stem.node          stem.ele
//! ---------          --------
//! <n_nodes> 2        <n_tris> 3
//! 0 x y              0 a b c alive
//! 1 x y              1 a b c alive
//! ...                ...
//! ```

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{MeshError, TriMesh};

/// Write `<stem>.node` and `<stem>.ele` next to each other.
pub fn write_mesh(mesh: &TriMesh, stem: &Path) -> Result<(), MeshError> {
    let mut node = String::new();
    writeln!(node, "{} 2", mesh.n_nodes()).unwrap();
    for (i, [x, y]) in mesh.coords().iter().enumerate() {
        writeln!(node, "{i} {x:.17e} {y:.17e}").unwrap();
    }
    std::fs::write(stem.with_extension("node"), node)?;

    let mut ele = String::new();
    writeln!(ele, "{} 3", mesh.n_tris()).unwrap();
    for t in 0..mesh.n_tris() {
        let [a, b, c] = mesh.tri(t);
        let alive = u8::from(mesh.is_alive(t));
        writeln!(ele, "{t} {a} {b} {c} {alive}").unwrap();
    }
    std::fs::write(stem.with_extension("ele"), ele)?;
    Ok(())
}

/// Read a mesh written by [`write_mesh`].
pub fn read_mesh(stem: &Path) -> Result<TriMesh, MeshError> {
    let node_path = stem.with_extension("node");
    let ele_path = stem.with_extension("ele");

    let coords = read_nodes(&node_path)?;
    let (tris, alive) = read_elements(&ele_path)?;
    TriMesh::from_raw_with_alive(coords, tris, alive)
}

fn parse_err(path: &Path, line: usize, what: impl Into<String>) -> MeshError {
    MeshError::Parse {
        path: path.display().to_string(),
        line,
        what: what.into(),
    }
}

fn read_nodes(path: &Path) -> Result<Vec<[f64; 2]>, MeshError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header = header?;
    let mut it = header.split_whitespace();
    let n: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(path, 1, "node count expected"))?;
    if it.next() != Some("2") {
        return Err(parse_err(path, 1, "dimension marker '2' expected"));
    }

    let mut coords = Vec::with_capacity(n);
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut it = line.split_whitespace();
        let i: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, lineno, "node index expected"))?;
        if i != coords.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("node index {i} out of order (expected {})", coords.len()),
            ));
        }
        let x: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, lineno, "x coordinate expected"))?;
        let y: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, lineno, "y coordinate expected"))?;
        coords.push([x, y]);
    }
    if coords.len() != n {
        return Err(parse_err(
            path,
            coords.len() + 1,
            format!("{n} nodes declared, {} found", coords.len()),
        ));
    }
    Ok(coords)
}

#[allow(clippy::type_complexity)]
fn read_elements(path: &Path) -> Result<(Vec<[usize; 3]>, Vec<bool>), MeshError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header = header?;
    let mut it = header.split_whitespace();
    let n: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(path, 1, "element count expected"))?;
    if it.next() != Some("3") {
        return Err(parse_err(path, 1, "corner-count marker '3' expected"));
    }

    let mut tris = Vec::with_capacity(n);
    let mut alive = Vec::with_capacity(n);
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut it = line.split_whitespace();
        let i: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, lineno, "element index expected"))?;
        if i != tris.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("element index {i} out of order (expected {})", tris.len()),
            ));
        }
        let mut corner = [0usize; 3];
        for slot in &mut corner {
            *slot = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(path, lineno, "corner index expected"))?;
        }
        let flag = match it.next() {
            Some("0") => false,
            Some("1") => true,
            _ => return Err(parse_err(path, lineno, "alive flag 0|1 expected")),
        };
        tris.push(corner);
        alive.push(flag);
    }
    if tris.len() != n {
        return Err(parse_err(
            path,
            tris.len() + 1,
            format!("{n} elements declared, {} found", tris.len()),
        ));
    }
    Ok((tris, alive))
}
