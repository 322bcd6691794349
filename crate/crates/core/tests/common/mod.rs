#![allow(dead_code)]

use tmesh_core::mesh::{new_tensor_mesh, subdivide_cell, AxisCoord, CellId, HierarchicalTMesh, Point2};

/// Subdivides the leaf containing the centre of each rectangle `[x0, x1, y0, y1]`, in order.
pub fn split_rects(mut mesh: HierarchicalTMesh, rects: &[[f64; 4]]) -> HierarchicalTMesh {
    for r in rects {
        let c = leaf_at(&mesh, 0.5 * (r[0] + r[1]), 0.5 * (r[2] + r[3]));
        let got = mesh.cell_rect(c);
        assert_eq!([got.x0, got.x1, got.y0, got.y1], *r, "no leaf with these bounds");
        mesh = subdivide_cell(&mesh, c).unwrap();
    }
    mesh
}

pub fn leaf_at(mesh: &HierarchicalTMesh, x: f64, y: f64) -> CellId {
    mesh.locate(x, y).expect("point inside the mesh")
}

/// Leaf with exactly the bounds `[x0, x1, y0, y1]`.
pub fn leaf_with(mesh: &HierarchicalTMesh, r: [f64; 4]) -> CellId {
    let c = leaf_at(mesh, 0.5 * (r[0] + r[1]), 0.5 * (r[2] + r[3]));
    let got = mesh.cell_rect(c);
    assert_eq!([got.x0, got.x1, got.y0, got.y1], r);
    c
}

fn axis(knots: &[f64], v: f64) -> AxisCoord {
    const DEPTH: u32 = 30;
    let seg = knots.windows(2).position(|w| v >= w[0] && v <= w[1]).expect("coordinate inside the knots");
    let f = (v - knots[seg]) / (knots[seg + 1] - knots[seg]);
    let num = (f * (1u64 << DEPTH) as f64).round() as u64;
    AxisCoord::new(seg as u32, num, DEPTH).unwrap()
}

/// Exact grid point at real coordinates (which must be dyadic within their knot interval).
pub fn pt(mesh: &HierarchicalTMesh, x: f64, y: f64) -> Point2 {
    let p = Point2::new(axis(mesh.x_knots(), x), axis(mesh.y_knots(), y));
    assert_eq!(mesh.real_point(&p), (x, y));
    p
}

pub fn real(mesh: &HierarchicalTMesh, p: &Point2) -> (f64, f64) {
    mesh.real_point(p)
}

pub fn tensor(nx: usize, ny: usize) -> HierarchicalTMesh {
    let k = |n: usize| (0..=n).map(|i| i as f64).collect::<Vec<_>>();
    new_tensor_mesh(&k(nx), &k(ny)).unwrap()
}

/// Level-0 grid of the three-level example mesh.
pub fn fig1_level0() -> HierarchicalTMesh {
    new_tensor_mesh(&[0.0, 1.0, 2.5, 4.0], &[0.0, 1.0, 3.0, 4.0, 5.0]).unwrap()
}

pub const FIG1_LEVEL1_SPLITS: [[f64; 4]; 6] = [
    [0.0, 1.0, 0.0, 1.0],
    [1.0, 2.5, 0.0, 1.0],
    [1.0, 2.5, 1.0, 3.0],
    [0.0, 1.0, 3.0, 4.0],
    [1.0, 2.5, 3.0, 4.0],
    [2.5, 4.0, 3.0, 4.0],
];

pub const FIG1_LEVEL2_SPLITS: [[f64; 4]; 7] = [
    [0.0, 0.5, 0.0, 0.5],
    [1.0, 1.75, 0.0, 0.5],
    [1.0, 1.75, 0.5, 1.0],
    [1.0, 1.75, 1.0, 2.0],
    [1.75, 2.5, 1.0, 2.0],
    [1.75, 2.5, 3.0, 3.5],
    [2.5, 3.25, 3.0, 3.5],
];

pub fn fig1_level1() -> HierarchicalTMesh {
    split_rects(fig1_level0(), &FIG1_LEVEL1_SPLITS)
}

pub fn fig1_level2() -> HierarchicalTMesh {
    split_rects(fig1_level1(), &FIG1_LEVEL2_SPLITS)
}

/// 4×4 unit grid with three level-1 splits around the centre; used for the vertex and
/// edge classification and for the CVR correspondence examples.
pub fn fig2() -> HierarchicalTMesh {
    split_rects(tensor(4, 4), &[[1.0, 2.0, 1.0, 2.0], [1.0, 2.0, 2.0, 3.0], [2.0, 3.0, 2.0, 3.0]])
}

pub fn fig5() -> HierarchicalTMesh {
    fig2()
}

/// Mesh with the three-structure branch.
pub fn fig9() -> HierarchicalTMesh {
    let m = new_tensor_mesh(&[0.0, 2.0, 4.0, 6.0], &[0.0, 2.0, 4.0]).unwrap();
    split_rects(
        m,
        &[
            [0.0, 2.0, 0.0, 2.0],
            [0.0, 2.0, 2.0, 4.0],
            [2.0, 4.0, 2.0, 4.0],
            [4.0, 6.0, 2.0, 4.0],
            [1.0, 2.0, 1.0, 2.0],
            [1.0, 2.0, 2.0, 3.0],
            [2.0, 3.0, 2.0, 3.0],
        ],
    )
}

/// Mesh of the simplification example before any edge is removed.
pub fn fig15() -> HierarchicalTMesh {
    let m = new_tensor_mesh(&[0.0, 2.0, 4.0], &[0.0, 2.0, 4.0]).unwrap();
    split_rects(
        m,
        &[[0.0, 2.0, 0.0, 2.0], [0.0, 2.0, 2.0, 4.0], [2.0, 4.0, 2.0, 4.0], [1.0, 2.0, 2.0, 3.0], [2.0, 3.0, 2.0, 3.0]],
    )
}

/// Endpoints of an axis-aligned segment as real coordinates, lower end first.
pub fn seg(mesh: &HierarchicalTMesh, a: &Point2, b: &Point2) -> [f64; 4] {
    let (p, q) = (real(mesh, a), real(mesh, b));
    let (p, q) = if p <= q { (p, q) } else { (q, p) };
    [p.0, p.1, q.0, q.1]
}

/// Quadratic B-spline on knots `t[0..4]` by the Cox–de Boor recursion.
pub fn bspline2(t: &[f64], x: f64) -> f64 {
    let n0 = |i: usize| if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 };
    let frac = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let n1 = |i: usize| frac(x - t[i], t[i + 1] - t[i]) * n0(i) + frac(t[i + 2] - x, t[i + 2] - t[i + 1]) * n0(i + 1);
    frac(x - t[0], t[2] - t[0]) * n1(0) + frac(t[3] - x, t[3] - t[1]) * n1(1)
}

/// Tensor B-spline whose middle knot interval in each direction is the given rectangle.
pub fn classical(xk: &[f64], yk: &[f64], r: [f64; 4]) -> impl Fn(f64, f64) -> f64 {
    let i = xk.iter().position(|&k| k == r[0]).expect("x knot");
    let j = yk.iter().position(|&k| k == r[2]).expect("y knot");
    let (tx, ty) = (xk[i - 1..i + 3].to_vec(), yk[j - 1..j + 3].to_vec());
    move |x, y| bspline2(&tx, x) * bspline2(&ty, y)
}

/// 5×5 sample points strictly inside each cell.
pub fn samples(rect: [f64; 4]) -> impl Iterator<Item = (f64, f64)> {
    (0..25).map(move |k| {
        let (a, b) = ((k % 5) as f64 + 0.5, (k / 5) as f64 + 0.5);
        (rect[0] + a / 5.0 * (rect[1] - rect[0]), rect[2] + b / 5.0 * (rect[3] - rect[2]))
    })
}

pub fn rects_of(m: &HierarchicalTMesh) -> Vec<[f64; 4]> {
    m.leaves().into_iter().map(|c| m.cell_rect(c)).map(|r| [r.x0, r.x1, r.y0, r.y1]).collect()
}

/// Tensor mesh with knots `i + 0.15 i²`.
pub fn new_nonuniform(cx: usize, cy: usize) -> HierarchicalTMesh {
    let knots = |n: usize| (0..=n).map(|i| i as f64 + 0.15 * (i * i) as f64).collect::<Vec<_>>();
    new_tensor_mesh(&knots(cx), &knots(cy)).unwrap()
}
