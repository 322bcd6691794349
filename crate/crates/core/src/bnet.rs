//! Bernstein–Bézier arithmetic for biquadratic patches and piecewise splines.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{CellId, HierarchicalTMesh, RealRect, EAST, NORTH, SOUTH, WEST};

/// Quadratic Bernstein basis at `u`.
pub fn bernstein(u: f64) -> [f64; 3] {
    let w = 1.0 - u;
    [w * w, 2.0 * u * w, u * u]
}

/// Derivative of the quadratic Bernstein basis with respect to `u`.
pub fn bernstein_deriv(u: f64) -> [f64; 3] {
    [-2.0 * (1.0 - u), 2.0 - 4.0 * u, 2.0 * u]
}

/// Blossom of each quadratic Bernstein polynomial at `(s, t)`.
pub fn blossom(s: f64, t: f64) -> [f64; 3] {
    let (s1, t1) = (1.0 - s, 1.0 - t);
    [s1 * t1, s1 * t + s * t1, s * t]
}

/// Matrix re-expressing a quadratic over `[0, 1]` on the parameter interval `[a, b]`.
pub fn reparam_matrix(a: f64, b: f64) -> [[f64; 3]; 3] {
    [blossom(a, a), blossom(a, b), blossom(b, b)]
}

/// Side of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    East,
    North,
    West,
    South,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::East, Side::North, Side::West, Side::South];

    pub fn index(self) -> usize {
        match self {
            Side::East => EAST,
            Side::North => NORTH,
            Side::West => WEST,
            Side::South => SOUTH,
        }
    }

    pub fn from_index(i: usize) -> Side {
        Side::ALL[i]
    }

    pub fn opposite(self) -> Side {
        Side::from_index((self.index() + 2) % 4)
    }
}

/// B-ordinates `b[j][k]` of a biquadratic patch over `rect`; `j` runs along x, `k` along y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BOrdGrid {
    pub rect: RealRect,
    pub b: [[f64; 3]; 3],
}

fn check_rect(r: &RealRect) -> Result<()> {
    if !(r.x1 > r.x0 && r.y1 > r.y0) || !r.x0.is_finite() || !r.x1.is_finite() || !r.y0.is_finite() || !r.y1.is_finite()
    {
        return Err(Error::InvalidInput(format!("degenerate rectangle {r:?}")));
    }
    Ok(())
}

impl BOrdGrid {
    pub fn new(rect: RealRect, b: [[f64; 3]; 3]) -> Result<Self> {
        check_rect(&rect)?;
        Ok(BOrdGrid { rect, b })
    }

    pub fn zero(rect: RealRect) -> Self {
        BOrdGrid { rect, b: [[0.0; 3]; 3] }
    }

    pub fn constant(rect: RealRect, c: f64) -> Self {
        BOrdGrid { rect, b: [[c; 3]; 3] }
    }

    /// Ordinates of the biquadratic interpolant of `g` at the 3×3 parameter points
    /// `{0, 1/2, 1}²`; exact when `g` has bi-degree at most (2, 2).
    pub fn from_function(rect: RealRect, g: impl Fn(f64, f64) -> f64) -> Self {
        let xs = [rect.x0, 0.5 * (rect.x0 + rect.x1), rect.x1];
        let ys = [rect.y0, 0.5 * (rect.y0 + rect.y1), rect.y1];
        let mut f = [[0.0; 3]; 3];
        for j in 0..3 {
            for k in 0..3 {
                f[j][k] = g(xs[j], ys[k]);
            }
        }
        let solve = |v: [f64; 3]| [v[0], 2.0 * v[1] - 0.5 * (v[0] + v[2]), v[2]];
        let mut tmp = [[0.0; 3]; 3];
        for (j, row) in f.iter().enumerate() {
            tmp[j] = solve(*row);
        }
        let mut b = [[0.0; 3]; 3];
        for k in 0..3 {
            let c = solve([tmp[0][k], tmp[1][k], tmp[2][k]]);
            for j in 0..3 {
                b[j][k] = c[j];
            }
        }
        BOrdGrid { rect, b }
    }

    /// Domain point `P_{j,k}`.
    pub fn domain_point(&self, j: usize, k: usize) -> (f64, f64) {
        domain_point(&self.rect, j, k)
    }

    pub fn local(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.rect.x0) / self.rect.width(), (y - self.rect.y0) / self.rect.height())
    }

    pub fn eval_local(&self, u: f64, v: f64) -> f64 {
        let bu = bernstein(u);
        let bv = bernstein(v);
        let mut s = 0.0;
        for j in 0..3 {
            for k in 0..3 {
                s += self.b[j][k] * bu[j] * bv[k];
            }
        }
        s
    }

    /// Value of the polynomial at `(x, y)`, also outside the rectangle.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let (u, v) = self.local(x, y);
        self.eval_local(u, v)
    }

    /// Partial derivatives `(∂x, ∂y)` at `(x, y)`.
    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let (u, v) = self.local(x, y);
        let (bu, bv) = (bernstein(u), bernstein(v));
        let (du, dv) = (bernstein_deriv(u), bernstein_deriv(v));
        let (mut gx, mut gy) = (0.0, 0.0);
        for j in 0..3 {
            for k in 0..3 {
                gx += self.b[j][k] * du[j] * bv[k];
                gy += self.b[j][k] * bu[j] * dv[k];
            }
        }
        (gx / self.rect.width(), gy / self.rect.height())
    }

    pub fn max_abs(&self) -> f64 {
        self.b.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.b.iter().flatten().all(|&v| v == 0.0)
    }
}

pub fn domain_point(r: &RealRect, j: usize, k: usize) -> (f64, f64) {
    (((2 - j) as f64 * r.x0 + j as f64 * r.x1) / 2.0, ((2 - k) as f64 * r.y0 + k as f64 * r.y1) / 2.0)
}

/// The same polynomial written in Bernstein form over `target`.
pub fn reexpress(g: &BOrdGrid, target: RealRect) -> Result<BOrdGrid> {
    check_rect(&target)?;
    if g.rect == target {
        return Ok(*g);
    }
    let r = &g.rect;
    let mx = reparam_matrix((target.x0 - r.x0) / r.width(), (target.x1 - r.x0) / r.width());
    let my = reparam_matrix((target.y0 - r.y0) / r.height(), (target.y1 - r.y0) / r.height());
    let mut tmp = [[0.0; 3]; 3];
    for j in 0..3 {
        for k in 0..3 {
            tmp[j][k] = (0..3).map(|l| my[k][l] * g.b[j][l]).sum();
        }
    }
    let mut b = [[0.0; 3]; 3];
    for j in 0..3 {
        for k in 0..3 {
            b[j][k] = (0..3).map(|l| mx[j][l] * tmp[l][k]).sum();
        }
    }
    Ok(BOrdGrid { rect: target, b })
}

/// Ordinates of a neighbour nearest a shared edge, determined by C¹ contact.
///
/// `rows[0]` lies on the shared edge and `rows[1]` is the next row inward; entries are
/// indexed along the edge in increasing coordinate order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeRows {
    /// Side of the neighbour on which the rows lie.
    pub side: Side,
    pub rows: [[f64; 3]; 2],
}

impl EdgeRows {
    /// Grid positions `(j, k)` of `rows[r][i]` inside the neighbour.
    pub fn position(side: Side, r: usize, i: usize) -> (usize, usize) {
        match side {
            Side::West => (r, i),
            Side::East => (2 - r, i),
            Side::South => (i, r),
            Side::North => (i, 2 - r),
        }
    }
}

fn near(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 1e-12 * scale.max(1.0)
}

/// Rows of the neighbour over `dst_rect` across `side` of the source patch that make the pair C¹.
pub fn propagate_c1(src: &BOrdGrid, side: Side, dst_rect: RealRect) -> Result<EdgeRows> {
    check_rect(&dst_rect)?;
    let s = &src.rect;
    let scale = s.x0.abs().max(s.x1.abs()).max(s.y0.abs()).max(s.y1.abs());
    let (touch, overlap) = match side {
        Side::East => (near(dst_rect.x0, s.x1, scale), dst_rect.y0.max(s.y0) < dst_rect.y1.min(s.y1)),
        Side::West => (near(dst_rect.x1, s.x0, scale), dst_rect.y0.max(s.y0) < dst_rect.y1.min(s.y1)),
        Side::North => (near(dst_rect.y0, s.y1, scale), dst_rect.x0.max(s.x0) < dst_rect.x1.min(s.x1)),
        Side::South => (near(dst_rect.y1, s.y0, scale), dst_rect.x0.max(s.x0) < dst_rect.x1.min(s.x1)),
    };
    if !touch || !overlap {
        return Err(Error::InvalidInput(format!("{dst_rect:?} is not adjacent to {s:?} across {side:?}")));
    }
    let g = reexpress(src, dst_rect)?;
    let near_side = side.opposite();
    let mut rows = [[0.0; 3]; 2];
    for (r, row) in rows.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let (j, k) = EdgeRows::position(near_side, r, i);
            *v = g.b[j][k];
        }
    }
    Ok(EdgeRows { side: near_side, rows })
}

/// The mapping functional: the centre B-ordinate.
pub fn center_ordinate(g: &BOrdGrid) -> f64 {
    g.b[1][1]
}

/// Piecewise-constant function over CVR cells, keyed by g-cell index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PwcOnCvr {
    pub values: BTreeMap<usize, f64>,
}

impl PwcOnCvr {
    pub fn get(&self, g: usize) -> f64 {
        self.values.get(&g).copied().unwrap_or(0.0)
    }
}

/// Piecewise biquadratic function: B-ordinates on support leaves, zero elsewhere.
#[derive(Clone, Debug)]
pub struct SplineFunction {
    pub mesh: Arc<HierarchicalTMesh>,
    pub support: BTreeMap<CellId, BOrdGrid>,
    /// Whether the function is meant to vanish with C¹ contact on the domain boundary.
    pub hbc: bool,
}

/// One ordinate grid in export form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub cell: CellId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub rect: [f64; 4],
    /// Row-major `b[j][k]` with `j` along x.
    pub ordinates: [f64; 9],
}

impl SplineFunction {
    pub fn zero(mesh: Arc<HierarchicalTMesh>, hbc: bool) -> Self {
        SplineFunction { mesh, support: BTreeMap::new(), hbc }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        eval_spline(self, x, y)
    }

    pub fn grid(&self, cell: CellId) -> BOrdGrid {
        self.support.get(&cell).copied().unwrap_or_else(|| BOrdGrid::zero(self.mesh.cell_rect(cell)))
    }

    pub fn max_abs(&self) -> f64 {
        self.support.values().fold(0.0, |m, g| m.max(g.max_abs()))
    }

    pub fn export(&self) -> Vec<SupportEntry> {
        self.support
            .iter()
            .map(|(&c, g)| {
                let mut o = [0.0; 9];
                for j in 0..3 {
                    for k in 0..3 {
                        o[3 * j + k] = g.b[j][k];
                    }
                }
                SupportEntry {
                    cell: c,
                    path: self.mesh.path(c),
                    rect: [g.rect.x0, g.rect.x1, g.rect.y0, g.rect.y1],
                    ordinates: o,
                }
            })
            .collect()
    }

    /// Ordinates flattened in the column order of an oracle system over the same mesh.
    pub fn flatten(&self, cells: &[CellId]) -> Vec<f64> {
        let mut v = vec![0.0; 9 * cells.len()];
        for (i, c) in cells.iter().enumerate() {
            if let Some(g) = self.support.get(c) {
                for j in 0..3 {
                    for k in 0..3 {
                        v[9 * i + 3 * j + k] = g.b[j][k];
                    }
                }
            }
        }
        v
    }
}

/// Value of the spline at `(x, y)`; zero outside the domain and off the support.
pub fn eval_spline(f: &SplineFunction, x: f64, y: f64) -> f64 {
    match f.mesh.locate(x, y) {
        Some(c) => f.support.get(&c).map(|g| g.eval(x, y)).unwrap_or(0.0),
        None => 0.0,
    }
}

/// A shared edge piece on which the spline fails to be C¹.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeViolation {
    pub cell: CellId,
    /// Neighbour across the edge, `None` for the domain boundary.
    pub neighbour: Option<CellId>,
    pub side: Side,
    /// Largest normalized defect in value or scaled cross derivative.
    pub defect: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct C1Report {
    pub edges_checked: usize,
    pub max_defect: f64,
    pub violations: Vec<EdgeViolation>,
}

impl C1Report {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

const SAMPLES: usize = 7;

fn chebyshev(lo: f64, hi: f64) -> [f64; SAMPLES] {
    let mut out = [0.0; SAMPLES];
    for (i, o) in out.iter_mut().enumerate() {
        let t = ((2 * i + 1) as f64 * std::f64::consts::PI / (2 * SAMPLES) as f64).cos();
        *o = 0.5 * (lo + hi) + 0.5 * (hi - lo) * t;
    }
    out
}

/// Samples value and cross derivative on every edge piece touching the support.
///
/// Defects are normalized by the largest ordinate magnitude; derivative defects are
/// multiplied by half the smaller cross width so both are on the ordinate scale.
pub fn check_c1(f: &SplineFunction, tol: f64) -> C1Report {
    let mesh = &f.mesh;
    let t = mesh.topology();
    let scale = f.max_abs().max(f64::MIN_POSITIVE);
    let mut report = C1Report::default();
    for (&cell, g) in &f.support {
        let Some(slot) = t.slot(cell) else {
            report.violations.push(EdgeViolation { cell, neighbour: None, side: Side::East, defect: f64::INFINITY });
            continue;
        };
        let r = t.rects[slot];
        for side in Side::ALL {
            let vertical = matches!(side, Side::East | Side::West);
            let adj = &t.neighbours[slot][side.index()];
            let edge_line = match side {
                Side::East => r[1],
                Side::West => r[0],
                Side::North => r[3],
                Side::South => r[2],
            };
            let on_boundary = match side {
                Side::East => edge_line == t.domain[1],
                Side::West => edge_line == t.domain[0],
                Side::North => edge_line == t.domain[3],
                Side::South => edge_line == t.domain[2],
            };
            let mut pieces: Vec<(Option<CellId>, f64, f64)> = adj
                .iter()
                .map(|a| {
                    let (lo, hi) = if vertical {
                        (mesh.y_key_real(a.lo), mesh.y_key_real(a.hi))
                    } else {
                        (mesh.x_key_real(a.lo), mesh.x_key_real(a.hi))
                    };
                    (Some(t.leaves[a.leaf]), lo, hi)
                })
                .collect();
            if on_boundary {
                if !f.hbc {
                    continue;
                }
                let (lo, hi) = if vertical { (g.rect.y0, g.rect.y1) } else { (g.rect.x0, g.rect.x1) };
                pieces.push((None, lo, hi));
            }
            let line = if vertical { mesh.x_key_real(edge_line) } else { mesh.y_key_real(edge_line) };
            for (nb, lo, hi) in pieces {
                if let Some(n) = nb {
                    // Pairs inside the support are checked once, from the smaller id.
                    if f.support.contains_key(&n) && n < cell {
                        continue;
                    }
                }
                let other = nb.map(|n| f.grid(n));
                let width = if vertical { g.rect.width() } else { g.rect.height() };
                let other_width =
                    other.map(|o| if vertical { o.rect.width() } else { o.rect.height() }).unwrap_or(width);
                let h = 0.5 * width.min(other_width);
                let mut defect: f64 = 0.0;
                for s in chebyshev(lo, hi) {
                    let (x, y) = if vertical { (line, s) } else { (s, line) };
                    let v = g.eval(x, y);
                    let d = g.gradient(x, y);
                    let (ov, od) = match &other {
                        Some(o) => (o.eval(x, y), o.gradient(x, y)),
                        None => (0.0, (0.0, 0.0)),
                    };
                    let dd = if vertical { d.0 - od.0 } else { d.1 - od.1 };
                    defect = defect.max((v - ov).abs() / scale).max((dd * h).abs() / scale);
                }
                report.edges_checked += 1;
                report.max_defect = report.max_defect.max(defect);
                if defect > tol {
                    report.violations.push(EdgeViolation { cell, neighbour: nb, side, defect });
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::new_tensor_mesh;

    fn unit() -> RealRect {
        RealRect::new(0.0, 1.0, 0.0, 1.0)
    }

    #[test]
    fn constant_and_linear_precision() {
        let g = BOrdGrid::constant(unit(), 2.5);
        assert!((g.eval(0.3, 0.8) - 2.5).abs() < 1e-15);
        let mut b = [[0.0; 3]; 3];
        for (j, row) in b.iter_mut().enumerate() {
            *row = [j as f64 / 2.0; 3];
        }
        let g = BOrdGrid::new(unit(), b).unwrap();
        assert!((g.eval(0.37, 0.1) - 0.37).abs() < 1e-15);
        assert_eq!(center_ordinate(&g), 0.5);
    }

    #[test]
    fn centre_value_matches_expanded_bernstein_sum() {
        let b = [[1.0, -2.0, 0.5], [3.0, 4.0, -1.0], [0.25, 2.0, 7.0]];
        let g = BOrdGrid::new(unit(), b).unwrap();
        let corners = b[0][0] + b[0][2] + b[2][0] + b[2][2];
        let edges = b[0][1] + b[1][0] + b[1][2] + b[2][1];
        let expect = corners / 16.0 + edges / 8.0 + b[1][1] / 4.0;
        assert!((g.eval(0.5, 0.5) - expect).abs() < 1e-14);
    }

    #[test]
    fn reexpress_linear_function_on_wider_rect() {
        let g = BOrdGrid::from_function(unit(), |x, _| x);
        let h = reexpress(&g, RealRect::new(0.0, 2.0, 0.0, 1.0)).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                assert!((h.b[j][k] - j as f64).abs() < 1e-14);
            }
        }
        assert!(reexpress(&g, RealRect::new(0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn propagation_continues_linear_data() {
        let g = BOrdGrid::from_function(unit(), |x, _| x);
        let e = propagate_c1(&g, Side::East, RealRect::new(1.0, 2.0, 0.0, 1.0)).unwrap();
        assert_eq!(e.side, Side::West);
        assert!(e.rows[0].iter().all(|v| (v - 1.0).abs() < 1e-14));
        assert!(e.rows[1].iter().all(|v| (v - 1.5).abs() < 1e-14));
        assert!(propagate_c1(&g, Side::East, RealRect::new(1.5, 2.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn check_c1_flags_a_perturbed_ordinate() {
        let mesh = Arc::new(new_tensor_mesh(&[0.0, 1.0, 2.0], &[0.0, 1.0]).unwrap());
        let poly = |x: f64, y: f64| x * x - 0.5 * x * y + y;
        let mut f = SplineFunction::zero(mesh.clone(), false);
        for c in mesh.leaves() {
            f.support.insert(c, BOrdGrid::from_function(mesh.cell_rect(c), poly));
        }
        assert!(check_c1(&f, 1e-12).is_clean());
        f.support.get_mut(&0).unwrap().b[2][1] += 1e-3;
        let rep = check_c1(&f, 1e-9);
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.violations[0].neighbour, Some(1));
    }

    #[test]
    fn bump_with_zero_boundary_rows_is_hbc_clean() {
        let mesh = Arc::new(new_tensor_mesh(&[0.0, 1.0], &[0.0, 1.0]).unwrap());
        let mut b = [[0.0; 3]; 3];
        b[1][1] = 0.0;
        let mut f = SplineFunction::zero(mesh, true);
        f.support.insert(0, BOrdGrid::new(unit(), b).unwrap());
        assert!(check_c1(&f, 1e-12).is_clean());
        f.support.get_mut(&0).unwrap().b[1][1] = 1.0;
        assert!(!check_c1(&f, 1e-9).is_clean());
    }
}
