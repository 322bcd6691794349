//! T-connections and the crossing-vertex-relationship (CVR) graph.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{
    extend_mesh, simplify, CellId, HierarchicalTMesh, Key, Point2, RealRect, Rect, Topology, VertexClass, EAST, NORTH,
};

/// Role of a leaf cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellClass {
    /// Has a side on the domain boundary.
    BoundaryCell,
    /// Interior cell whose four corners are crossing-vertices.
    PCell,
    /// Interior cell with at least one T-junction corner.
    TCell,
}

/// Class of every leaf, indexed like [`Topology::leaves`].
pub fn classify_cells(t: &Topology) -> Vec<CellClass> {
    (0..t.leaves.len())
        .map(|s| {
            if !t.is_interior(s) {
                CellClass::BoundaryCell
            } else if t
                .corners(s)
                .iter()
                .all(|&(x, y)| t.vertex(x, y).map(|v| v.class) == Some(VertexClass::CrossingVertex))
            {
                CellClass::PCell
            } else {
                CellClass::TCell
            }
        })
        .collect()
}

/// Maximal union of T-cells linked through shared T-junction corners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TConnection {
    pub t_cells: Vec<CellId>,
    /// Smallest rectangle covering the connection.
    pub trd: Rect,
    pub trd_real: RealRect,
    pub domain_centre: (f64, f64),
    /// Lowest-level cells outside the connection sharing an edge piece with it.
    pub one_neighbour_cells: Vec<CellId>,
    pub level: u32,
    /// Index of the corresponding g-cell; `None` when the connection merges with the
    /// unbounded face of the CVR graph (it then touches boundary cells).
    pub g_cell: Option<usize>,
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu((0..n).collect())
    }
    fn find(&mut self, a: usize) -> usize {
        let mut r = a;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = a;
        while self.0[c] != r {
            let n = self.0[c];
            self.0[c] = r;
            c = n;
        }
        r
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

fn bounding(t: &Topology, slots: &[usize]) -> [Key; 4] {
    let mut k = [Key::MAX, Key::MIN, Key::MAX, Key::MIN];
    for &s in slots {
        let r = t.rects[s];
        k[0] = k[0].min(r[0]);
        k[1] = k[1].max(r[1]);
        k[2] = k[2].min(r[2]);
        k[3] = k[3].max(r[3]);
    }
    k
}

/// All T-connections, ordered by the centre of their rectangle domain (y first).
pub fn t_connections(mesh: &HierarchicalTMesh) -> Vec<TConnection> {
    let t = mesh.topology();
    let classes = classify_cells(&t);
    t_connection_slots(&t, &classes).into_iter().map(|slots| make_connection(mesh, &t, &slots)).collect()
}

/// Leaf slots of each T-connection, sorted, in the same order as [`t_connections`].
pub(crate) fn t_connection_slots(t: &Topology, classes: &[CellClass]) -> Vec<Vec<usize>> {
    let n = t.leaves.len();
    let mut dsu = Dsu::new(n);
    for (&(x, y), v) in &t.vertices {
        if v.class != VertexClass::TJunction {
            continue;
        }
        let cells: Vec<usize> =
            t.corner_leaves[&(x, y)].iter().copied().filter(|&s| classes[s] == CellClass::TCell).collect();
        for w in cells.windows(2) {
            dsu.union(w[0], w[1]);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in 0..n {
        if classes[s] == CellClass::TCell {
            groups.entry(dsu.find(s)).or_default().push(s);
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| {
        let b = bounding(t, g);
        (b[2] + b[3], b[0] + b[1])
    });
    out
}

fn make_connection(mesh: &HierarchicalTMesh, t: &Topology, slots: &[usize]) -> TConnection {
    let b = bounding(t, slots);
    let trd = Rect::from_keys(b);
    let trd_real = mesh.real_rect(&trd);
    let members: std::collections::HashSet<usize> = slots.iter().copied().collect();
    let mut adj: Vec<usize> = Vec::new();
    for &s in slots {
        for side in 0..4 {
            for a in &t.neighbours[s][side] {
                if !members.contains(&a.leaf) {
                    adj.push(a.leaf);
                }
            }
        }
    }
    adj.sort_unstable();
    adj.dedup();
    let level = adj.iter().map(|&s| mesh.cell(t.leaves[s]).level).min().unwrap_or(0);
    let mut t_cells: Vec<CellId> = slots.iter().map(|&s| t.leaves[s]).collect();
    t_cells.sort_unstable();
    let mut one: Vec<CellId> = adj.iter().map(|&s| t.leaves[s]).filter(|&c| mesh.cell(c).level == level).collect();
    one.sort_unstable();
    TConnection {
        t_cells,
        trd,
        trd_real,
        domain_centre: trd_real.centre(),
        one_neighbour_cells: one,
        level,
        g_cell: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GCellKind {
    PGCell,
    TGCell,
}

/// The domain a g-cell corresponds to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackLink {
    PCell(CellId),
    /// Index into [`CvrGraph::t_connections`].
    TConnection(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GCell {
    pub rect: Rect,
    pub real: RealRect,
    pub kind: GCellKind,
    pub link: BackLink,
}

impl GCell {
    /// Centre of the corresponding P-cell or T-rectangle domain.
    pub fn domain_centre(&self) -> (f64, f64) {
        self.real.centre()
    }
}

/// CVR graph of a mesh with its correspondence to P-cells and T-connections.
#[derive(Clone, Debug)]
pub struct CvrGraph {
    /// Mesh the graph was built on (the simplified mesh unless disabled).
    pub mesh: Arc<HierarchicalTMesh>,
    pub g_cells: Vec<GCell>,
    pub t_connections: Vec<TConnection>,
    /// Retained segments: runs between consecutive crossing-vertices on mesh lines.
    pub segments: Vec<(Point2, Point2)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CvrOptions {
    pub simplify: bool,
}

impl Default for CvrOptions {
    fn default() -> Self {
        CvrOptions { simplify: true }
    }
}

/// CVR graph of the simplified mesh.
pub fn build_cvr(mesh: &HierarchicalTMesh) -> Result<CvrGraph> {
    build_cvr_with(mesh, CvrOptions::default())
}

fn retained_runs(line_vertices: impl Iterator<Item = Key>) -> Vec<(Key, Key)> {
    let v: Vec<Key> = line_vertices.collect();
    v.windows(2).map(|w| (w[0], w[1])).collect()
}

fn covered(runs: &[(Key, Key)], lo: Key, hi: Key) -> bool {
    let i = runs.partition_point(|r| r.0 <= lo);
    i > 0 && runs[i - 1].1 >= hi
}

pub fn build_cvr_with(mesh: &HierarchicalTMesh, opts: CvrOptions) -> Result<CvrGraph> {
    let mesh = Arc::new(if opts.simplify { simplify(mesh) } else { mesh.clone() });
    let t = mesh.try_topology()?;
    let classes = classify_cells(&t);
    let is_cross = |x: Key, y: Key| t.vertex(x, y).map(|v| v.class) == Some(VertexClass::CrossingVertex);

    let mut hruns: HashMap<Key, Vec<(Key, Key)>> = HashMap::new();
    let mut vruns: HashMap<Key, Vec<(Key, Key)>> = HashMap::new();
    let mut segments = Vec::new();
    for (&y, segs) in &t.hlines {
        let mut runs = Vec::new();
        for &(a, b) in segs {
            runs.extend(retained_runs(t.row_vertices(y, a, b).into_iter().filter(|&x| is_cross(x, y))));
        }
        segments.extend(runs.iter().map(|&(a, b)| (Point2::from_keys(a, y), Point2::from_keys(b, y))));
        hruns.insert(y, runs);
    }
    for (&x, segs) in &t.vlines {
        let mut runs = Vec::new();
        for &(a, b) in segs {
            runs.extend(retained_runs(t.col_vertices(x, a, b).into_iter().filter(|&y| is_cross(x, y))));
        }
        segments.extend(runs.iter().map(|&(a, b)| (Point2::from_keys(x, a), Point2::from_keys(x, b))));
        vruns.insert(x, runs);
    }

    let n = t.leaves.len();
    let outside = n;
    let mut dsu = Dsu::new(n + 1);
    for s in 0..n {
        if classes[s] == CellClass::BoundaryCell {
            dsu.union(s, outside);
        }
        let r = t.rects[s];
        for a in &t.neighbours[s][EAST] {
            if !covered(vruns.get(&r[1]).map(|v| v.as_slice()).unwrap_or(&[]), a.lo, a.hi) {
                dsu.union(s, a.leaf);
            }
        }
        for a in &t.neighbours[s][NORTH] {
            if !covered(hruns.get(&r[3]).map(|v| v.as_slice()).unwrap_or(&[]), a.lo, a.hi) {
                dsu.union(s, a.leaf);
            }
        }
    }
    let root_out = dsu.find(outside);
    let mut faces: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in 0..n {
        let r = dsu.find(s);
        if r != root_out {
            faces.entry(r).or_default().push(s);
        }
    }

    let tc_slots = t_connection_slots(&t, &classes);
    let tc_index: HashMap<Vec<usize>, usize> = tc_slots.iter().enumerate().map(|(i, g)| (g.clone(), i)).collect();
    let mut t_connections: Vec<TConnection> = tc_slots.iter().map(|g| make_connection(&mesh, &t, g)).collect();

    let mut g_cells = Vec::with_capacity(faces.len());
    for (_, mut face) in faces {
        face.sort_unstable();
        let g = if face.len() == 1 && classes[face[0]] == CellClass::PCell {
            let c = t.leaves[face[0]];
            let rect = mesh.cell(c).rect;
            GCell { rect, real: mesh.real_rect(&rect), kind: GCellKind::PGCell, link: BackLink::PCell(c) }
        } else if let Some(&i) = tc_index.get(&face) {
            let tc = &t_connections[i];
            GCell { rect: tc.trd, real: tc.trd_real, kind: GCellKind::TGCell, link: BackLink::TConnection(i) }
        } else {
            let ids: Vec<CellId> = face.iter().map(|&s| t.leaves[s]).collect();
            return Err(Error::Consistency(format!(
                "CVR face made of cells {ids:?} matches neither a P-cell nor a T-connection"
            )));
        };
        g_cells.push(g);
    }
    g_cells.sort_by(|a, b| {
        let ka = a.rect.keys();
        let kb = b.rect.keys();
        (ka[2] + ka[3], ka[0] + ka[1]).cmp(&(kb[2] + kb[3], kb[0] + kb[1]))
    });
    for (i, g) in g_cells.iter().enumerate() {
        if let BackLink::TConnection(c) = g.link {
            t_connections[c].g_cell = Some(i);
        }
    }
    Ok(CvrGraph { mesh, g_cells, t_connections, segments })
}

/// Dimension of the spline space: CVR cell count of the mesh with homogeneous boundary
/// conditions, or of its extension without them.
pub fn dim_space(mesh: &HierarchicalTMesh, hbc: bool) -> Result<usize> {
    if hbc {
        Ok(build_cvr(mesh)?.g_cells.len())
    } else {
        Ok(build_cvr(&extend_mesh(mesh, 2, 2)?)?.g_cells.len())
    }
}

/// Export form of a CVR graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvrJson {
    pub g_cells: Vec<GCellJson>,
    pub segments: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GCellJson {
    pub id: usize,
    pub rect: [f64; 4],
    pub kind: GCellKind,
    pub link: BackLink,
    pub cells: Vec<CellId>,
}

impl CvrGraph {
    pub fn to_json(&self) -> CvrJson {
        let g_cells = self
            .g_cells
            .iter()
            .enumerate()
            .map(|(id, g)| GCellJson {
                id,
                rect: [g.real.x0, g.real.x1, g.real.y0, g.real.y1],
                kind: g.kind,
                link: g.link,
                cells: match g.link {
                    BackLink::PCell(c) => vec![c],
                    BackLink::TConnection(i) => self.t_connections[i].t_cells.clone(),
                },
            })
            .collect();
        let segments = self
            .segments
            .iter()
            .map(|(a, b)| {
                let (x0, y0) = self.mesh.real_point(a);
                let (x1, y1) = self.mesh.real_point(b);
                [x0, y0, x1, y1]
            })
            .collect();
        CvrJson { g_cells, segments }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{new_tensor_mesh, subdivide_cell};

    #[test]
    fn tensor_mesh_counts() {
        let m = new_tensor_mesh(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let g = build_cvr(&m).unwrap();
        assert_eq!(g.g_cells.len(), 1);
        assert!(t_connections(&m).is_empty());
        assert_eq!(dim_space(&m, false).unwrap(), 25);
        let m = new_tensor_mesh(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], &[0.0, 2.0, 3.0, 5.0]).unwrap();
        assert_eq!(dim_space(&m, true).unwrap(), 3);
        assert_eq!(dim_space(&m, false).unwrap(), 35);
    }

    #[test]
    fn mesh_without_crossings_has_empty_graph() {
        let m = new_tensor_mesh(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!(build_cvr(&m).unwrap().g_cells.is_empty());
        assert_eq!(dim_space(&m, true).unwrap(), 0);
    }

    #[test]
    fn one_refined_interior_cell() {
        let m = new_tensor_mesh(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let m = subdivide_cell(&m, 4).unwrap();
        let tcs = t_connections(&m);
        assert_eq!(tcs.len(), 1);
        assert_eq!(tcs[0].t_cells.len(), 4);
        assert_eq!(tcs[0].level, 0);
        assert_eq!(tcs[0].domain_centre, (1.5, 1.5));
        let g = build_cvr_with(&m, CvrOptions { simplify: false }).unwrap();
        assert_eq!(g.g_cells.len(), 1);
        assert_eq!(g.g_cells[0].kind, GCellKind::TGCell);
    }
}
