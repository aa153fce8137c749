//! Simplicial meshes of intervals (1D) and polygonal domains (2D).
//!
//! Cells are stored flat with stride `dim + 1` and normalised to positive
//! orientation. Boundary vertices and edges are derived from the topology:
//! a facet belonging to exactly one cell lies on the boundary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{cross, Point, Region};

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    pub fn new(min: Point, max: Point) -> Self {
        BoundingBox { min, max }
    }

    pub fn unit_square() -> Self {
        BoundingBox::new([0.0, 0.0], [1.0, 1.0])
    }

    pub fn extent(&self) -> Point {
        [self.max[0] - self.min[0], self.max[1] - self.min[1]]
    }

    pub fn diameter(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1]).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    vertices: Vec<Point>,
    cells: Vec<usize>,
    boundary: Vec<bool>,
    /// 2D only: sorted vertex pairs, one per edge.
    edges: Vec<[usize; 2]>,
    /// 2D only: per cell, the edge opposite each local vertex.
    cell_edges: Vec<[usize; 3]>,
    /// 2D only: whether each edge lies on the boundary.
    boundary_edge: Vec<bool>,
    bbox: BoundingBox,
}

impl Mesh {
    /// Builds and validates a mesh. Cells are reoriented to positive measure;
    /// if `boundary` is given it must match the topological boundary.
    pub fn new(
        dim: usize,
        vertices: Vec<Point>,
        mut cells: Vec<usize>,
        boundary: Option<&[usize]>,
    ) -> Result<Mesh> {
        if dim != 1 && dim != 2 {
            return Err(Error::MeshValidation(format!("dimension {dim} not in {{1, 2}}")));
        }
        let stride = dim + 1;
        if cells.is_empty() || !cells.len().is_multiple_of(stride) {
            return Err(Error::MeshValidation(format!(
                "cell list length {} is not a positive multiple of {stride}",
                cells.len()
            )));
        }
        let nv = vertices.len();
        if let Some(&bad) = cells.iter().find(|&&v| v >= nv) {
            return Err(Error::MeshValidation(format!(
                "cell vertex index {bad} out of range (have {nv} vertices)"
            )));
        }
        if vertices.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::MeshValidation("non-finite vertex coordinate".into()));
        }
        if dim == 1 && vertices.iter().any(|v| v[1] != 0.0) {
            return Err(Error::MeshValidation("1D vertices must have zero y-coordinate".into()));
        }

        for c in cells.chunks_mut(stride) {
            let vol = signed_measure(dim, &vertices, c);
            if vol < 0.0 {
                c.swap(0, 1);
            }
            let vol = vol.abs();
            let scale = c
                .iter()
                .map(|&i| vertices[i][0].abs().max(vertices[i][1].abs()))
                .fold(1.0_f64, f64::max);
            if vol <= 1e-14 * scale.powi(dim as i32) {
                return Err(Error::MeshValidation(format!("degenerate cell {c:?}")));
            }
        }

        let mut bbox = BoundingBox::new([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for &v in cells.iter() {
            for k in 0..2 {
                bbox.min[k] = bbox.min[k].min(vertices[v][k]);
                bbox.max[k] = bbox.max[k].max(vertices[v][k]);
            }
        }

        let mut mesh = Mesh {
            dim,
            vertices,
            cells,
            boundary: Vec::new(),
            edges: Vec::new(),
            cell_edges: Vec::new(),
            boundary_edge: Vec::new(),
            bbox,
        };
        mesh.build_topology()?;

        if let Some(given) = boundary {
            let mut flags = vec![false; nv];
            for &b in given {
                if b >= nv {
                    return Err(Error::MeshValidation(format!(
                        "boundary vertex {b} out of range (have {nv} vertices)"
                    )));
                }
                flags[b] = true;
            }
            if let Some(i) = (0..nv).find(|&i| flags[i] != mesh.boundary[i]) {
                let what = if flags[i] { "is flagged but not on" } else { "lies on but is not flagged as" };
                return Err(Error::MeshValidation(format!("vertex {i} {what} the boundary")));
            }
        }
        Ok(mesh)
    }

    fn build_topology(&mut self) -> Result<()> {
        let nv = self.vertices.len();
        self.boundary = vec![false; nv];
        match self.dim {
            1 => {
                let mut count = vec![0usize; nv];
                for c in self.cells.chunks(2) {
                    count[c[0]] += 1;
                    count[c[1]] += 1;
                }
                if let Some(i) = count.iter().position(|&k| k > 2) {
                    return Err(Error::MeshValidation(format!(
                        "vertex {i} shared by more than two cells"
                    )));
                }
                for i in 0..nv {
                    self.boundary[i] = count[i] == 1;
                }
            }
            _ => {
                let mut index: HashMap<[usize; 2], usize> = HashMap::new();
                let mut edge_count: Vec<usize> = Vec::new();
                let mut cell_edges = Vec::with_capacity(self.n_cells());
                for c in self.cells.chunks(3) {
                    let mut local = [0usize; 3];
                    for i in 0..3 {
                        let a = c[(i + 1) % 3];
                        let b = c[(i + 2) % 3];
                        let key = if a < b { [a, b] } else { [b, a] };
                        let e = *index.entry(key).or_insert_with(|| {
                            self.edges.push(key);
                            edge_count.push(0);
                            self.edges.len() - 1
                        });
                        edge_count[e] += 1;
                        local[i] = e;
                    }
                    cell_edges.push(local);
                }
                if let Some(e) = edge_count.iter().position(|&k| k > 2) {
                    return Err(Error::MeshValidation(format!(
                        "edge {:?} shared by more than two cells",
                        self.edges[e]
                    )));
                }
                self.cell_edges = cell_edges;
                self.boundary_edge = edge_count.iter().map(|&k| k == 1).collect();
                for (e, &b) in self.boundary_edge.iter().enumerate() {
                    if b {
                        self.boundary[self.edges[e][0]] = true;
                        self.boundary[self.edges[e][1]] = true;
                    }
                }
            }
        }
        Ok(())
    }

    /// `n_cells` equal cells on `[a, b]`.
    pub fn uniform_interval(n_cells: usize, a: f64, b: f64) -> Result<Mesh> {
        if n_cells == 0 {
            return Err(invalid("n_cells must be positive"));
        }
        if !(a < b) {
            return Err(invalid(format!("interval endpoints must satisfy a < b (got {a}, {b})")));
        }
        let h = (b - a) / n_cells as f64;
        let mut vertices: Vec<Point> = (0..=n_cells).map(|i| [a + i as f64 * h, 0.0]).collect();
        vertices[n_cells] = [b, 0.0];
        let cells = (0..n_cells).flat_map(|i| [i, i + 1]).collect();
        Mesh::new(1, vertices, cells, None)
    }

    /// Structured triangulation of a rectangle: each of the `nx * ny` grid
    /// cells is split into two triangles along its lower-left to upper-right
    /// diagonal.
    pub fn uniform_rectangle(nx: usize, ny: usize, rect: BoundingBox) -> Result<Mesh> {
        if nx == 0 || ny == 0 {
            return Err(invalid("nx and ny must be positive"));
        }
        let [w, h] = rect.extent();
        if !(w > 0.0 && h > 0.0) {
            return Err(invalid(format!("degenerate rectangle {:?}..{:?}", rect.min, rect.max)));
        }
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            let y = if j == ny { rect.max[1] } else { rect.min[1] + h * j as f64 / ny as f64 };
            for i in 0..=nx {
                let x = if i == nx { rect.max[0] } else { rect.min[0] + w * i as f64 / nx as f64 };
                vertices.push([x, y]);
            }
        }
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut cells = Vec::with_capacity(6 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
                cells.extend_from_slice(&[a, b, c, a, c, d]);
            }
        }
        Mesh::new(2, vertices, cells, None)
    }

    /// Uniform refinement: intervals are bisected, triangles split into four
    /// congruent children through their edge midpoints.
    pub fn refine(&self) -> Mesh {
        let nv = self.vertices.len();
        let mut vertices = self.vertices.clone();
        let mut cells = Vec::with_capacity(self.cells.len() * 2usize.pow(self.dim as u32));
        match self.dim {
            1 => {
                for (k, c) in self.cells.chunks(2).enumerate() {
                    let (a, b) = (self.vertices[c[0]], self.vertices[c[1]]);
                    vertices.push([0.5 * (a[0] + b[0]), 0.0]);
                    let m = nv + k;
                    cells.extend_from_slice(&[c[0], m, m, c[1]]);
                }
            }
            _ => {
                for e in &self.edges {
                    let (a, b) = (self.vertices[e[0]], self.vertices[e[1]]);
                    vertices.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
                }
                for (c, ce) in self.cells.chunks(3).zip(&self.cell_edges) {
                    let [m0, m1, m2] = [nv + ce[0], nv + ce[1], nv + ce[2]];
                    cells.extend_from_slice(&[c[0], m2, m1, m2, c[1], m0, m1, m0, c[2], m0, m1, m2]);
                }
            }
        }
        Mesh::new(self.dim, vertices, cells, None).expect("refinement of a valid mesh is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len() / (self.dim + 1)
    }

    pub fn cell(&self, i: usize) -> &[usize] {
        let s = self.dim + 1;
        &self.cells[i * s..(i + 1) * s]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[usize]> {
        self.cells.chunks(self.dim + 1)
    }

    pub fn cell_points(&self, i: usize) -> Vec<Point> {
        self.cell(i).iter().map(|&v| self.vertices[v]).collect()
    }

    pub fn cell_region(&self, i: usize) -> Region {
        let pts = self.cell_points(i);
        match self.dim {
            1 => Region::Interval(pts[0][0], pts[1][0]),
            _ => Region::Polygon(pts),
        }
    }

    pub fn cell_measure(&self, i: usize) -> f64 {
        signed_measure(self.dim, &self.vertices, self.cell(i))
    }

    /// Longest edge of the cell.
    pub fn cell_diameter(&self, i: usize) -> f64 {
        let pts = self.cell_points(i);
        let mut d: f64 = 0.0;
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                d = d.max(dist(pts[a], pts[b]));
            }
        }
        d
    }

    pub fn max_diameter(&self) -> f64 {
        (0..self.n_cells()).map(|i| self.cell_diameter(i)).fold(0.0, f64::max)
    }

    pub fn total_measure(&self) -> f64 {
        (0..self.n_cells()).map(|i| self.cell_measure(i)).sum()
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn boundary_vertices(&self) -> Vec<usize> {
        (0..self.n_vertices()).filter(|&i| self.boundary[i]).collect()
    }

    /// Edges as sorted vertex pairs (empty in 1D).
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    /// Edge opposite each local vertex of cell `i` (2D only).
    pub fn cell_edges(&self, i: usize) -> [usize; 3] {
        self.cell_edges[i]
    }

    pub fn is_boundary_edge(&self, e: usize) -> bool {
        self.boundary_edge[e]
    }

    pub fn boundary_edges(&self) -> Vec<[usize; 2]> {
        self.edges
            .iter()
            .zip(&self.boundary_edge)
            .filter_map(|(e, &b)| b.then_some(*e))
            .collect()
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mesh> {
        Mesh::from_text(&std::fs::read_to_string(path)?)
    }

    /// Line-oriented text serialisation.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sgdm-mesh 1");
        let _ = writeln!(s, "dim {}", self.dim);
        let _ = writeln!(s, "vertices {}", self.n_vertices());
        for v in &self.vertices {
            match self.dim {
                1 => {
                    let _ = writeln!(s, "{:e}", v[0]);
                }
                _ => {
                    let _ = writeln!(s, "{:e} {:e}", v[0], v[1]);
                }
            }
        }
        let _ = writeln!(s, "cells {}", self.n_cells());
        for c in self.cells() {
            let line: Vec<String> = c.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        let b = self.boundary_vertices();
        let _ = writeln!(s, "boundary {}", b.len());
        for i in b {
            let _ = writeln!(s, "{i}");
        }
        let _ = writeln!(s, "end");
        s
    }

    pub fn from_text(text: &str) -> Result<Mesh> {
        let mut lines = LineReader::new(text);
        lines.keyword_line("sgdm-mesh", 1)?;
        let dim = lines.keyword_line("dim", 1)?[0];
        let nv = lines.keyword_line("vertices", 1)?[0];
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (line, toks) = lines.next_line("vertex coordinates")?;
            if toks.len() != dim {
                return Err(Error::Parse { line, expected: format!("{dim} vertex coordinate(s)") });
            }
            let mut p = [0.0; 2];
            for (k, t) in toks.iter().enumerate() {
                p[k] = t.parse().map_err(|_| Error::Parse {
                    line,
                    expected: format!("a real coordinate, found `{t}`"),
                })?;
            }
            vertices.push(p);
        }
        let nc = lines.keyword_line("cells", 1)?[0];
        let mut cells = Vec::with_capacity(nc * (dim + 1));
        for _ in 0..nc {
            let idx = lines.index_line("cell vertex indices", dim + 1)?;
            cells.extend(idx);
        }
        let nb = lines.keyword_line("boundary", 1)?[0];
        let mut boundary = Vec::with_capacity(nb);
        for _ in 0..nb {
            boundary.push(lines.index_line("boundary vertex index", 1)?[0]);
        }
        lines.keyword_line("end", 0)?;
        Mesh::new(dim, vertices, cells, Some(&boundary))
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn signed_measure(dim: usize, vertices: &[Point], c: &[usize]) -> f64 {
    match dim {
        1 => vertices[c[1]][0] - vertices[c[0]][0],
        _ => 0.5 * cross(vertices[c[0]], vertices[c[1]], vertices[c[2]]),
    }
}

struct LineReader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        LineReader { lines: text.lines().enumerate().peekable(), last: 0 }
    }

    fn next_line(&mut self, expected: &str) -> Result<(usize, Vec<&'a str>)> {
        loop {
            match self.lines.next() {
                Some((i, l)) => {
                    self.last = i + 1;
                    let l = l.trim();
                    if l.is_empty() || l.starts_with('#') {
                        continue;
                    }
                    return Ok((i + 1, l.split_whitespace().collect()));
                }
                None => {
                    return Err(Error::Parse {
                        line: self.last + 1,
                        expected: format!("{expected} (file ended early)"),
                    })
                }
            }
        }
    }

    fn keyword_line(&mut self, keyword: &str, n_args: usize) -> Result<Vec<usize>> {
        let (line, toks) = self.next_line(&format!("`{keyword}` section"))?;
        if toks.first() != Some(&keyword) || toks.len() != n_args + 1 {
            return Err(Error::Parse { line, expected: format!("`{keyword}` section header") });
        }
        toks[1..]
            .iter()
            .map(|t| {
                t.parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    expected: format!("non-negative integer after `{keyword}`, found `{t}`"),
                })
            })
            .collect()
    }

    fn index_line(&mut self, expected: &str, n: usize) -> Result<Vec<usize>> {
        let (line, toks) = self.next_line(expected)?;
        if toks.len() != n {
            return Err(Error::Parse { line, expected: format!("{n} {expected}") });
        }
        toks.iter()
            .map(|t| {
                t.parse::<usize>().map_err(|_| Error::Parse {
                    line,
                    expected: format!("{expected}, found `{t}`"),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_interval_mesh() {
        let m = Mesh::uniform_interval(1, 0.0, 1.0).unwrap();
        assert_eq!(m.n_vertices(), 2);
        assert_eq!(m.n_cells(), 1);
        assert_eq!(m.boundary_vertices(), vec![0, 1]);
    }

    #[test]
    fn four_cell_interval() {
        let m = Mesh::uniform_interval(4, 0.0, 1.0).unwrap();
        for (i, v) in m.vertices().iter().enumerate() {
            assert_eq!(v[0], i as f64 / 4.0);
        }
        for c in 0..4 {
            assert_eq!(m.cell_measure(c), 0.25);
        }
        assert!((Mesh::uniform_interval(8, 0.0, 2.0).unwrap().total_measure() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn interval_errors() {
        assert!(Mesh::uniform_interval(0, 0.0, 1.0).is_err());
        assert!(Mesh::uniform_interval(3, 1.0, 1.0).is_err());
        assert!(Mesh::uniform_rectangle(2, 2, BoundingBox::new([0.0, 0.0], [1.0, 0.0])).is_err());
    }

    #[test]
    fn rectangle_counts() {
        let m = Mesh::uniform_rectangle(1, 1, BoundingBox::unit_square()).unwrap();
        assert_eq!(m.n_cells(), 2);
        assert!((0..2).all(|c| (m.cell_measure(c) - 0.5).abs() < 1e-15));
        let m = Mesh::uniform_rectangle(2, 2, BoundingBox::unit_square()).unwrap();
        assert_eq!(m.n_cells(), 8);
        assert!((m.total_measure() - 1.0).abs() < 1e-12);
        let r = BoundingBox::new([0.0, 0.0], [2.0, 1.0]);
        let m = Mesh::uniform_rectangle(4, 2, r).unwrap();
        assert_eq!(m.n_cells(), 16);
        for i in 0..m.n_vertices() {
            let [x, y] = m.vertices()[i];
            let on_edge = x == 0.0 || x == 2.0 || y == 0.0 || y == 1.0;
            assert_eq!(on_edge, m.is_boundary_vertex(i));
        }
    }

    #[test]
    fn refinement_halves_sizes() {
        let m = Mesh::uniform_interval(4, 0.0, 1.0).unwrap();
        let r = m.refine();
        assert_eq!(r.n_cells(), 8);
        let max_measure = (0..8).map(|c| r.cell_measure(c)).fold(0.0, f64::max);
        assert!((max_measure - 0.125).abs() < 1e-15);

        let m = Mesh::uniform_rectangle(1, 1, BoundingBox::unit_square()).unwrap();
        let r = m.refine();
        assert_eq!(r.n_cells(), 8);
        let rr = r.refine();
        assert!((rr.max_diameter() - m.max_diameter() / 4.0).abs() < 1e-12);
        assert!((rr.total_measure() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_file_names_missing_section() {
        let m = Mesh::uniform_interval(2, 0.0, 1.0).unwrap();
        let text = m.to_text();
        let cut: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        let err = Mesh::from_text(&cut).unwrap_err().to_string();
        assert!(err.contains("cell"), "{err}");
        let cut: String = text.lines().take(9).map(|l| format!("{l}\n")).collect();
        let err = Mesh::from_text(&cut).unwrap_err().to_string();
        assert!(err.contains("boundary"), "{err}");
    }

    #[test]
    fn out_of_range_cell_index_rejected() {
        let text = "sgdm-mesh 1\ndim 1\nvertices 2\n0\n1\ncells 1\n0 5\nboundary 2\n0\n1\nend\n";
        match Mesh::from_text(text) {
            Err(Error::MeshValidation(msg)) => assert!(msg.contains("out of range")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_token_reports_line() {
        let text = "sgdm-mesh 1\ndim 1\nvertices 2\n0\nabc\ncells 1\n0 1\nboundary 2\n0\n1\nend\n";
        match Mesh::from_text(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_boundary_flags_rejected() {
        let text = "sgdm-mesh 1\ndim 1\nvertices 3\n0\n0.5\n1\ncells 2\n0 1\n1 2\nboundary 1\n0\nend\n";
        assert!(matches!(Mesh::from_text(text), Err(Error::MeshValidation(_))));
    }

    #[test]
    fn orientation_is_normalised() {
        let m = Mesh::new(2, vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]], vec![0, 1, 2], None).unwrap();
        assert!(m.cell_measure(0) > 0.0);
    }
}
