//! Adaptive surface fitting with the open-mesh basis: parametrize a triangulated open
//! surface over the unit square, interpolate at the domain-centres, refine where the
//! error is above tolerance, and repeat.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{basis_for_open_mesh, OpenBasis};
use crate::error::{Error, Result};
use crate::mesh::{new_tensor_mesh, CellId, HierarchicalTMesh, MeshJson};

/// Triangulated surface with its single boundary loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    /// Boundary vertices in order, with the interior on the left.
    pub boundary: Vec<usize>,
}

impl TriMesh {
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::InvalidInput("triangulation has no triangles".into()));
        }
        for t in &triangles {
            if t.iter().any(|&i| i >= vertices.len()) || t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::InvalidInput(format!("bad triangle {t:?}")));
            }
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite vertex coordinate".into()));
        }
        let boundary = boundary_loop(vertices.len(), &triangles)?;
        Ok(TriMesh { vertices, triangles, boundary })
    }

    /// Reads `v` and `f` records of an OBJ file; polygons are fanned into triangles.
    pub fn parse_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::InvalidInput(format!("line {}: {e}", ln + 1)))?;
                    if c.len() != 3 {
                        return Err(Error::InvalidInput(format!("line {}: vertex needs three coordinates", ln + 1)));
                    }
                    vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|s| {
                            let first = s.split('/').next().unwrap_or("");
                            let i: i64 =
                                first.parse().map_err(|e| Error::InvalidInput(format!("line {}: {e}", ln + 1)))?;
                            let n = vertices.len() as i64;
                            let r = if i < 0 { n + i } else { i - 1 };
                            if r < 0 || r >= n {
                                return Err(Error::InvalidInput(format!(
                                    "line {}: vertex index {i} out of range",
                                    ln + 1
                                )));
                            }
                            Ok(r as usize)
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(Error::InvalidInput(format!("line {}: face needs three vertices", ln + 1)));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        TriMesh::new(vertices, triangles)
    }

    pub fn load_obj(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        TriMesh::parse_obj(&text)
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }

    /// `(nx+1)×(ny+1)` samples of `f` over the unit square, two triangles per grid cell.
    pub fn sample_grid(nx: usize, ny: usize, f: impl Fn(f64, f64) -> [f64; 3]) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidInput("grid needs at least one cell per direction".into()));
        }
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(f(i as f64 / nx as f64, j as f64 / ny as f64));
            }
        }
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        TriMesh::new(vertices, triangles)
    }
}

fn boundary_loop(nv: usize, triangles: &[[usize; 3]]) -> Result<Vec<usize>> {
    let mut count: HashMap<(usize, usize), usize> = HashMap::new();
    for t in triangles {
        for e in 0..3 {
            let (a, b) = (t[e], t[(e + 1) % 3]);
            *count.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    if count.values().any(|&c| c > 2) {
        return Err(Error::Unsupported("triangulation is not a manifold: an edge has more than two triangles".into()));
    }
    let mut next: HashMap<usize, usize> = HashMap::new();
    for t in triangles {
        for e in 0..3 {
            let (a, b) = (t[e], t[(e + 1) % 3]);
            if count[&(a.min(b), a.max(b))] == 1 && next.insert(a, b).is_some() {
                return Err(Error::Unsupported(format!("boundary passes twice through vertex {a}")));
            }
        }
    }
    if next.is_empty() {
        return Err(Error::Unsupported("closed surface: no boundary loop".into()));
    }
    let start = *next.keys().min().expect("non-empty");
    let mut out = vec![start];
    let mut v = next[&start];
    while v != start {
        out.push(v);
        v = *next.get(&v).ok_or_else(|| Error::Unsupported(format!("boundary is not closed at vertex {v}")))?;
        if out.len() > nv {
            return Err(Error::Unsupported("boundary does not form a loop".into()));
        }
    }
    if out.len() != next.len() {
        return Err(Error::Unsupported("surface has more than one boundary loop".into()));
    }
    Ok(out)
}

/// Parameter of every vertex in the unit square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMap {
    pub uv: Vec<[f64; 2]>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (norm(a) * norm(b));
    d.clamp(-1.0, 1.0).acos()
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Point on the unit square's border at arc position `s ∈ [0, 4)`, counter-clockwise from the origin.
fn square_point(s: f64) -> [f64; 2] {
    let s = s.rem_euclid(4.0);
    match s as u32 {
        0 => [s, 0.0],
        1 => [1.0, s - 1.0],
        2 => [3.0 - s, 1.0],
        _ => [0.0, 4.0 - s],
    }
}

/// Turning angle above which a boundary vertex counts as a corner.
pub const CORNER_TURN: f64 = std::f64::consts::PI / 6.0;

/// Boundary onto the unit square by chord length between four corner vertices, interior
/// by mean-value convex combinations.
///
/// The corners are the four boundary vertices with the sharpest turns when all four turn by
/// more than [`CORNER_TURN`]; otherwise the sharpest one and the vertices nearest a quarter,
/// half and three quarters of the boundary length from it.
pub fn parametrize(tri: &TriMesh) -> Result<ParamMap> {
    let n = tri.vertices.len();
    let b = &tri.boundary;
    let m = b.len();
    if m < 3 {
        return Err(Error::Unsupported("boundary loop has fewer than three vertices".into()));
    }
    let p = |i: usize| tri.vertices[b[i % m]];
    let turn: Vec<f64> = (0..m).map(|i| angle(sub(p(i), p(i + m - 1)), sub(p(i + 1), p(i)))).collect();
    let mut by_turn: Vec<usize> = (0..m).collect();
    by_turn.sort_by(|&a, &c| turn[c].total_cmp(&turn[a]).then(a.cmp(&c)));
    let sharp = m >= 4 && turn[by_turn[3]] > CORNER_TURN;
    let start = by_turn[0];
    let mut arc = vec![0.0; m + 1];
    for i in 0..m {
        arc[i + 1] = arc[i] + norm(sub(p(start + i + 1), p(start + i)));
    }
    let total = arc[m];
    if total <= 0.0 {
        return Err(Error::InvalidInput("boundary has zero length".into()));
    }
    let mut corners = if sharp {
        let mut c: Vec<usize> = by_turn[..4].iter().map(|&i| (i + m - start) % m).collect();
        c.sort_unstable();
        c
    } else {
        let mut c = vec![0usize];
        for q in 1..4 {
            let target = total * q as f64 / 4.0;
            let lo = c[q - 1] + 1;
            let hi = m - (4 - q);
            let best =
                (lo..=hi).min_by(|&a, &b| (arc[a] - target).abs().total_cmp(&(arc[b] - target).abs())).unwrap_or(lo);
            c.push(best);
        }
        c
    };
    corners.push(m);
    let mut uv = vec![[f64::NAN; 2]; n];
    let mut is_boundary = vec![false; n];
    for side in 0..4 {
        let (a, c) = (corners[side], corners[side + 1]);
        for i in a..c {
            let f = (arc[i] - arc[a]) / (arc[c] - arc[a]);
            let v = b[(start + i) % m];
            uv[v] = square_point(side as f64 + f);
            is_boundary[v] = true;
        }
    }

    let mut weights: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for t in &tri.triangles {
        for e in 0..3 {
            let (i, j, k) = (t[e], t[(e + 1) % 3], t[(e + 2) % 3]);
            if is_boundary[i] {
                continue;
            }
            let (eij, eik) = (sub(tri.vertices[j], tri.vertices[i]), sub(tri.vertices[k], tri.vertices[i]));
            let half = (angle(eij, eik) / 2.0).tan();
            *weights[i].entry(j).or_default() += half / norm(eij);
            *weights[i].entry(k).or_default() += half / norm(eik);
        }
    }
    let interior: Vec<usize> = (0..n).filter(|&v| !is_boundary[v]).collect();
    let mut col = vec![usize::MAX; n];
    for (c, &v) in interior.iter().enumerate() {
        col[v] = c;
    }
    if !interior.is_empty() {
        let mut trip = Vec::new();
        let mut rhs = vec![vec![0.0; interior.len()]; 2];
        for (r, &v) in interior.iter().enumerate() {
            if weights[v].is_empty() {
                return Err(Error::InvalidInput(format!("vertex {v} belongs to no triangle")));
            }
            let total: f64 = weights[v].values().sum();
            trip.push((r, r, 1.0));
            for (&u, &w) in &weights[v] {
                let w = w / total;
                if is_boundary[u] {
                    rhs[0][r] += w * uv[u][0];
                    rhs[1][r] += w * uv[u][1];
                } else {
                    trip.push((r, col[u], -w));
                }
            }
        }
        let sol = solve_sparse(interior.len(), &trip, &rhs)?;
        for (r, &v) in interior.iter().enumerate() {
            uv[v] = [sol[0][r], sol[1][r]];
        }
    }
    let flipped = tri.triangles.iter().filter(|t| signed_area(uv[t[0]], uv[t[1]], uv[t[2]]) <= 0.0).count();
    if flipped > 0 {
        return Err(Error::Numeric(format!("{flipped} triangles are flipped in the parameter domain")));
    }
    Ok(ParamMap { uv })
}

/// Systems up to this size are solved densely with partial pivoting.
pub const DENSE_LIMIT: usize = 400;

/// Solves `A x = b` for each right-hand side; `A` is given as `(row, col, value)` triplets
/// with duplicates summed.
pub fn solve_sparse(n: usize, triplets: &[(usize, usize, f64)], rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let out: Vec<Vec<f64>> = if n <= DENSE_LIMIT {
        let mut a = DMatrix::<f64>::zeros(n, n);
        for &(r, c, v) in triplets {
            a[(r, c)] += v;
        }
        let lu = a.lu();
        rhs.iter()
            .map(|b| {
                lu.solve(&nalgebra::DVector::from_column_slice(b))
                    .map(|x| x.as_slice().to_vec())
                    .ok_or_else(|| Error::Numeric("singular linear system".into()))
            })
            .collect::<Result<_>>()?
    } else {
        let trip: Vec<Triplet<usize, usize, f64>> = triplets.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| Error::Numeric(format!("sparse matrix assembly failed: {e:?}")))?;
        let lu = a.sp_lu().map_err(|e| Error::Numeric(format!("sparse LU failed: {e:?}")))?;
        let b = Mat::<f64>::from_fn(n, rhs.len(), |i, j| rhs[j][i]);
        let x = lu.solve(&b);
        (0..rhs.len()).map(|j| (0..n).map(|i| x[(i, j)]).collect()).collect()
    };
    // Residual audit: a singular factorization shows up as non-finite or inaccurate output.
    let mut res = vec![vec![0.0; n]; rhs.len()];
    for &(r, c, v) in triplets {
        for (k, x) in out.iter().enumerate() {
            res[k][r] += v * x[c];
        }
    }
    for (k, b) in rhs.iter().enumerate() {
        let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let bad =
            out[k].iter().any(|v| !v.is_finite()) || res[k].iter().zip(b).any(|(r, bv)| (r - bv).abs() > 1e-8 * scale);
        if bad {
            return Err(Error::Numeric(format!("linear system of size {n} is singular or ill-conditioned")));
        }
    }
    Ok(out)
}

/// Surface data over the unit square.
pub trait SurfaceData: Sync {
    /// Data point at parameter `(x, y)`; must be defined slightly beyond the unit square.
    fn value(&self, x: f64, y: f64) -> [f64; 3];
    /// Parameter and position of every sample used to measure the fitting error.
    fn samples(&self) -> &[([f64; 2], [f64; 3])];
}

/// Data given by a parametrized triangulation: values are barycentric interpolants in the
/// parameter triangle containing the point, or at the closest point of the nearest triangle.
pub struct TriangleData {
    pub tri: TriMesh,
    pub param: ParamMap,
    samples: Vec<([f64; 2], [f64; 3])>,
    grid: Vec<Vec<usize>>,
    res: usize,
}

impl TriangleData {
    pub fn new(tri: TriMesh, param: ParamMap) -> Self {
        let res = ((tri.triangles.len() as f64).sqrt().ceil() as usize).clamp(1, 512);
        let mut grid = vec![Vec::new(); res * res];
        let cell = |v: f64| ((v * res as f64).floor().max(0.0) as usize).min(res - 1);
        for (ti, t) in tri.triangles.iter().enumerate() {
            let us = t.map(|i| param.uv[i]);
            let (x0, x1) = (
                us.iter().map(|u| u[0]).fold(f64::INFINITY, f64::min),
                us.iter().map(|u| u[0]).fold(f64::NEG_INFINITY, f64::max),
            );
            let (y0, y1) = (
                us.iter().map(|u| u[1]).fold(f64::INFINITY, f64::min),
                us.iter().map(|u| u[1]).fold(f64::NEG_INFINITY, f64::max),
            );
            for gx in cell(x0)..=cell(x1) {
                for gy in cell(y0)..=cell(y1) {
                    grid[gy * res + gx].push(ti);
                }
            }
        }
        let samples = tri.vertices.iter().zip(&param.uv).map(|(v, u)| (*u, *v)).collect();
        TriangleData { tri, param, samples, grid, res }
    }

    fn barycentric(&self, ti: usize, p: [f64; 2]) -> [f64; 3] {
        let t = self.tri.triangles[ti];
        let (a, b, c) = (self.param.uv[t[0]], self.param.uv[t[1]], self.param.uv[t[2]]);
        let area = signed_area(a, b, c);
        [signed_area(p, b, c) / area, signed_area(a, p, c) / area, signed_area(a, b, p) / area]
    }

    fn interpolate(&self, ti: usize, w: [f64; 3]) -> [f64; 3] {
        let t = self.tri.triangles[ti];
        let mut out = [0.0; 3];
        for k in 0..3 {
            for (d, o) in out.iter_mut().enumerate() {
                *o += w[k] * self.tri.vertices[t[k]][d];
            }
        }
        out
    }

    fn closest_in_triangle(&self, ti: usize, p: [f64; 2]) -> ([f64; 3], f64) {
        let w = self.barycentric(ti, p);
        if w.iter().all(|&v| v >= 0.0) {
            return (w, 0.0);
        }
        let t = self.tri.triangles[ti];
        let mut best = ([1.0, 0.0, 0.0], f64::INFINITY);
        for e in 0..3 {
            let (i, j) = (e, (e + 1) % 3);
            let (a, b) = (self.param.uv[t[i]], self.param.uv[t[j]]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let s = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
            let q = [a[0] + s * d[0], a[1] + s * d[1]];
            let dist = (p[0] - q[0]).hypot(p[1] - q[1]);
            if dist < best.1 {
                let mut w = [0.0; 3];
                w[i] = 1.0 - s;
                w[j] = s;
                best = (w, dist);
            }
        }
        best
    }
}

impl SurfaceData for TriangleData {
    fn value(&self, x: f64, y: f64) -> [f64; 3] {
        let gx = ((x * self.res as f64).floor().max(0.0) as usize).min(self.res - 1);
        let gy = ((y * self.res as f64).floor().max(0.0) as usize).min(self.res - 1);
        for &ti in &self.grid[gy * self.res + gx] {
            let w = self.barycentric(ti, [x, y]);
            if w.iter().all(|&v| v >= -1e-12) {
                return self.interpolate(ti, w);
            }
        }
        let (ti, w) = (0..self.tri.triangles.len())
            .map(|ti| {
                let (w, d) = self.closest_in_triangle(ti, [x, y]);
                (ti, w, d)
            })
            .min_by(|a, b| a.2.total_cmp(&b.2))
            .map(|(ti, w, _)| (ti, w))
            .expect("triangulation is non-empty");
        self.interpolate(ti, w)
    }

    fn samples(&self) -> &[([f64; 2], [f64; 3])] {
        &self.samples
    }
}

/// Data given by a function of the parameter, with samples on a regular grid.
pub struct FunctionData<F: Fn(f64, f64) -> [f64; 3] + Sync> {
    f: F,
    samples: Vec<([f64; 2], [f64; 3])>,
}

impl<F: Fn(f64, f64) -> [f64; 3] + Sync> FunctionData<F> {
    /// Samples at the `(n+1)²` points of a regular grid over the unit square.
    pub fn new(f: F, n: usize) -> Self {
        let n = n.max(1);
        let mut samples = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                let (x, y) = (i as f64 / n as f64, j as f64 / n as f64);
                samples.push(([x, y], f(x, y)));
            }
        }
        FunctionData { f, samples }
    }
}

impl<F: Fn(f64, f64) -> [f64; 3] + Sync> SurfaceData for FunctionData<F> {
    fn value(&self, x: f64, y: f64) -> [f64; 3] {
        (self.f)(x, y)
    }

    fn samples(&self) -> &[([f64; 2], [f64; 3])] {
        &self.samples
    }
}

/// Franke's test function on the unit square.
pub fn franke(x: f64, y: f64) -> f64 {
    let a = 0.75 * (-((9.0 * x - 2.0).powi(2) + (9.0 * y - 2.0).powi(2)) / 4.0).exp();
    let b = 0.75 * (-((9.0 * x + 1.0).powi(2) / 49.0 + (9.0 * y + 1.0) / 10.0)).exp();
    let c = 0.5 * (-((9.0 * x - 7.0).powi(2) + (9.0 * y - 3.0).powi(2)) / 4.0).exp();
    let d = 0.2 * (-((9.0 * x - 4.0).powi(2) + (9.0 * y - 7.0).powi(2))).exp();
    a + b + c - d
}

/// Interpolation conditions at the domain-centres of the basis, solved per coordinate.
pub fn collocate_and_solve(basis: &OpenBasis, data: &dyn SurfaceData) -> Result<Vec<[f64; 3]>> {
    let centres = basis.domain_centres();
    let n = centres.len();
    if n != basis.len() {
        return Err(Error::Consistency(format!("{n} domain-centres for {} basis functions", basis.len())));
    }
    let rows: Vec<Vec<(usize, f64)>> = centres.par_iter().map(|&(x, y)| basis.eval_all(x, y)).collect();
    let mut trip = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        let scale = row.iter().fold(0.0f64, |m, v| m.max(v.1.abs()));
        if scale == 0.0 {
            return Err(Error::Numeric(format!("every basis function vanishes at domain-centre {:?}", centres[r])));
        }
        trip.extend(row.iter().filter(|v| v.1 != 0.0).map(|&(c, v)| (r, c, v)));
    }
    let values: Vec<[f64; 3]> = centres.par_iter().map(|&(x, y)| data.value(x, y)).collect();
    let rhs: Vec<Vec<f64>> = (0..3).map(|d| values.iter().map(|v| v[d]).collect()).collect();
    let sol = solve_sparse(n, &trip, &rhs)?;
    Ok((0..n).map(|i| [sol[0][i], sol[1][i], sol[2][i]]).collect())
}

/// Spline surface `Σ P_j b_j`.
#[derive(Clone, Debug)]
pub struct SplineSurface {
    pub basis: OpenBasis,
    pub control: Vec<[f64; 3]>,
}

impl SplineSurface {
    pub fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (j, b) in self.basis.eval_all(x, y) {
            for (d, o) in out.iter_mut().enumerate() {
                *o += b * self.control[j][d];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Level-0 grid of the initial mesh over the unit square.
    pub level0: (usize, usize),
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { tol: 1e-3, max_iter: 8, level0: (4, 4) }
    }
}

/// One refine-solve round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    /// Iteration number, from 1.
    pub n: usize,
    pub dim: usize,
    pub max_error: f64,
    pub seconds: f64,
    pub leaves: usize,
    pub max_level: u32,
    /// Leaves subdivided after this iteration.
    pub refined: usize,
    /// Whether the refinement was widened to the neighbours of the offending leaves
    /// because the previous refinement left the spline space unchanged.
    pub expanded: bool,
    /// Basis functions whose support needed a wider region than two rings.
    pub widened: usize,
    pub mesh: MeshJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub options: FitOptions,
    pub iterations: Vec<IterationLog>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct FitModel {
    /// Final hierarchical mesh over the unit square.
    pub mesh: HierarchicalTMesh,
    pub surface: SplineSurface,
    /// Largest error over the samples inside each leaf of `mesh`.
    pub cell_errors: BTreeMap<CellId, f64>,
    pub report: FitReport,
}

fn uniform_knots(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Per-leaf maximum error over the samples located in that leaf.
pub fn cell_errors(mesh: &HierarchicalTMesh, surface: &SplineSurface, data: &dyn SurfaceData) -> BTreeMap<CellId, f64> {
    let errs: Vec<(Option<CellId>, f64)> = data
        .samples()
        .par_iter()
        .map(|(p, v)| {
            let s = surface.eval(p[0], p[1]);
            (mesh.locate(p[0], p[1]), norm(sub(s, *v)))
        })
        .collect();
    let mut out: BTreeMap<CellId, f64> = BTreeMap::new();
    for (c, e) in errs {
        if let Some(c) = c {
            let m = out.entry(c).or_default();
            *m = m.max(e);
        }
    }
    out
}

/// Refine-and-solve loop until every cell is within tolerance or the iteration budget ends.
pub fn fit_adaptive(data: &dyn SurfaceData, opts: FitOptions) -> Result<FitModel> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {}", opts.tol)));
    }
    if opts.max_iter == 0 || opts.level0.0 == 0 || opts.level0.1 == 0 {
        return Err(Error::InvalidInput("max_iter and the level-0 grid must be positive".into()));
    }
    let mut mesh = new_tensor_mesh(&uniform_knots(opts.level0.0), &uniform_knots(opts.level0.1))?;
    let mut report = FitReport { options: opts, iterations: Vec::new(), converged: false, warnings: Vec::new() };
    let mut n = 0;
    loop {
        n += 1;
        let t0 = Instant::now();
        let basis = basis_for_open_mesh(&mesh)?;
        let control = collocate_and_solve(&basis, data)?;
        let surface = SplineSurface { basis, control };
        let errors = cell_errors(&mesh, &surface, data);
        let max_error = errors.values().fold(0.0f64, |m, &e| m.max(e));
        let mut offenders: Vec<CellId> = errors.iter().filter(|(_, &e)| e > opts.tol).map(|(&c, _)| c).collect();
        let converged = offenders.is_empty();
        let last = converged || n >= opts.max_iter;
        let dim = surface.basis.len();
        let expanded = !last && report.iterations.last().is_some_and(|p| p.dim == dim);
        if expanded {
            offenders = with_touching_leaves(&mesh, &offenders, &errors);
        }
        report.iterations.push(IterationLog {
            n,
            dim,
            max_error,
            seconds: t0.elapsed().as_secs_f64(),
            leaves: mesh.leaves().len(),
            max_level: mesh.max_level(),
            refined: if last { 0 } else { offenders.len() },
            expanded,
            widened: surface.basis.extended.report.widened.len(),
            mesh: mesh.to_json()?,
        });
        if let [.., prev, cur] = report.iterations.as_slice() {
            if cur.max_error >= prev.max_error {
                let msg = format!(
                    "maximum error did not decrease at iteration {n}: {:e} after {:e}",
                    cur.max_error, prev.max_error
                );
                report.warnings.push(msg);
            }
        }
        if last {
            report.converged = converged;
            if !converged {
                report.warnings.push(format!("tolerance {} not reached after {n} iterations", opts.tol));
            }
            return Ok(FitModel { mesh, surface, cell_errors: errors, report });
        }
        mesh = mesh.subdivide_many(&offenders)?;
    }
}

/// `cells` together with every leaf holding samples that shares at least a corner with one of them.
fn with_touching_leaves(mesh: &HierarchicalTMesh, cells: &[CellId], sampled: &BTreeMap<CellId, f64>) -> Vec<CellId> {
    let rects: Vec<_> = cells.iter().map(|&c| mesh.cell_rect(c)).collect();
    mesh.leaves()
        .into_iter()
        .filter(|&l| {
            if !sampled.contains_key(&l) {
                return false;
            }
            let a = mesh.cell_rect(l);
            rects.iter().any(|b| a.x0 <= b.x1 && b.x0 <= a.x1 && a.y0 <= b.y1 && b.y0 <= a.y1)
        })
        .collect()
}

/// `res×res` samples of the fitted surface over the unit square as a triangulation.
pub fn sample_surface(model: &FitModel, res: usize) -> Result<TriMesh> {
    let res = res.max(2) - 1;
    TriMesh::sample_grid(res, res, |x, y| model.surface.eval(x, y))
}

/// Leaf rectangles of a mesh as OBJ polylines, at height `z`.
pub fn mesh_overlay_obj(mesh: &HierarchicalTMesh, z: f64) -> String {
    let mut out = String::new();
    for (i, c) in mesh.leaves().into_iter().enumerate() {
        let r = mesh.cell_rect(c);
        for (x, y) in [(r.x0, r.y0), (r.x1, r.y0), (r.x1, r.y1), (r.x0, r.y1)] {
            let _ = writeln!(out, "v {x} {y} {z}");
        }
        let b = 4 * i + 1;
        let _ = writeln!(out, "l {} {} {} {} {}", b, b + 1, b + 2, b + 3, b);
    }
    out
}
