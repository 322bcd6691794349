//! T-structures, bilinear functions around crossing vertices, and B-ordinate propagation.
//!
//! A basis function is built by filling a [`PropagationState`] with ordinates that follow
//! from local identities every spline of the space satisfies: centre ordinates of P-cells
//! are weights, the sixteen ordinates around a crossing vertex lie on one bilinear
//! function, two ordinate rows along an edge determine the neighbour's rows, and the
//! centre ordinate of a one-neighbour cell re-expressed over a T-rectangle-domain is the
//! weight of that domain.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::basis::WeightField;
use crate::bnet::{domain_point, reexpress, reparam_matrix, BOrdGrid, EdgeRows, Side, SplineFunction};
use crate::cvr::{classify_cells, BackLink, CellClass, CvrGraph};
use crate::error::{Error, Result};
use crate::mesh::{c_edges, fmt_point, Axis, CEdge, CellId, HierarchicalTMesh, Key, Point2, Topology, VertexClass};

/// Tolerance for agreement between two derivations of the same ordinate.
pub const CONFLICT_TOL: f64 = 1e-9;

/// A c-edge together with every cell sharing at least one vertex with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TStructure {
    pub mid_edge: CEdge,
    pub orientation: Axis,
    /// Lowest-level cell with an edge piece on the mid-edge.
    pub mother_cell: CellId,
    /// All member cells other than the mother cell.
    pub sub_cells: Vec<CellId>,
    pub end_points: [Point2; 2],
    /// Every vertex on the mid-edge, end points included, in increasing order.
    pub interior_vertices: Vec<Point2>,
    pub level: u32,
}

impl TStructure {
    /// Mother cell followed by the sub-cells.
    pub fn cells(&self) -> Vec<CellId> {
        let mut v = vec![self.mother_cell];
        v.extend_from_slice(&self.sub_cells);
        v
    }

    /// True when the two structures are perpendicular and share a vertex of their mid-edges.
    pub fn connects(&self, other: &TStructure) -> bool {
        if self.orientation == other.orientation {
            return false;
        }
        self.interior_vertices.iter().any(|v| other.interior_vertices.contains(v))
    }
}

/// Ordered set of connected T-structures covering one T-connection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TStructureBranch {
    pub structures: Vec<TStructure>,
    pub level: u32,
}

fn line_span(e: &CEdge) -> (Key, Key, Key) {
    match e.axis {
        Axis::Horizontal => (e.start.y.key(), e.start.x.key(), e.end.x.key()),
        Axis::Vertical => (e.start.x.key(), e.start.y.key(), e.end.y.key()),
    }
}

/// One T-structure per c-edge.
pub fn find_t_structures(mesh: &HierarchicalTMesh) -> Vec<TStructure> {
    let t = mesh.topology();
    c_edges(mesh).into_iter().map(|e| make_structure(mesh, &t, e)).collect()
}

fn make_structure(mesh: &HierarchicalTMesh, t: &Topology, e: CEdge) -> TStructure {
    let (line, lo, hi) = line_span(&e);
    let mut verts = vec![e.start];
    verts.extend_from_slice(&e.interior_vertices);
    verts.push(e.end);
    let mut slots: BTreeSet<usize> = BTreeSet::new();
    for v in &verts {
        if let Some(c) = t.corner_leaves.get(&v.keys()) {
            slots.extend(c.iter().copied());
        }
    }
    // Cells with a side piece on the mid-edge; the flag records whether the side spans all of it.
    let mut adjacent: Vec<(u32, bool, CellId)> = Vec::new();
    for &s in &slots {
        let r = t.rects[s];
        let (on_line, a, b) = match e.axis {
            Axis::Horizontal => (r[2] == line || r[3] == line, r[0], r[1]),
            Axis::Vertical => (r[0] == line || r[1] == line, r[2], r[3]),
        };
        if on_line && a.max(lo) < b.min(hi) {
            let c = t.leaves[s];
            adjacent.push((mesh.cell(c).level, !(a <= lo && b >= hi), c));
        }
    }
    adjacent.sort_unstable();
    let mother =
        adjacent.first().map(|a| a.2).unwrap_or_else(|| t.leaves[*slots.iter().next().expect("c-edge has cells")]);
    let sub_cells: Vec<CellId> = (0..t.rects.len())
        .filter(|&s| {
            let r = t.rects[s];
            match e.axis {
                Axis::Horizontal => r[2] <= line && r[3] >= line && r[0] <= hi && r[1] >= lo,
                Axis::Vertical => r[0] <= line && r[1] >= line && r[2] <= hi && r[3] >= lo,
            }
        })
        .map(|s| t.leaves[s])
        .filter(|&c| c != mother)
        .collect();
    TStructure {
        orientation: e.axis,
        mother_cell: mother,
        sub_cells,
        end_points: [e.start, e.end],
        interior_vertices: verts,
        level: mesh.cell(mother).level,
        mid_edge: e,
    }
}

/// T-structures carrying the T-junctions of a T-connection.
///
/// Every T-junction corner of a connection cell lies inside exactly one c-edge; the branch
/// is the set of structures owning those junctions.
pub fn branch_for(mesh: &HierarchicalTMesh, structures: &[TStructure], t_cells: &[CellId]) -> Result<TStructureBranch> {
    let t = mesh.topology();
    let members: HashSet<CellId> = t_cells.iter().copied().collect();
    let mut junctions: HashSet<Point2> = HashSet::new();
    for &c in t_cells {
        let slot = t.slot(c).ok_or_else(|| Error::InvalidInput(format!("cell {c} is not a leaf")))?;
        for (x, y) in t.corners(slot) {
            if t.vertex(x, y).map(|v| v.class) == Some(VertexClass::TJunction) {
                junctions.insert(Point2::from_keys(x, y));
            }
        }
    }
    let chosen: Vec<TStructure> = structures
        .iter()
        .filter(|s| s.mid_edge.interior_vertices.iter().any(|v| junctions.contains(v)))
        .cloned()
        .collect();
    let mut covered: HashSet<CellId> = HashSet::new();
    for s in &chosen {
        covered.extend(s.sub_cells.iter().copied());
    }
    if let Some(c) = members.iter().find(|c| !covered.contains(c)) {
        return Err(Error::Consistency(format!("T-cell {c} is not a sub-cell of any T-structure of its connection")));
    }
    let level = chosen.iter().map(|s| s.level).min().unwrap_or(0);
    Ok(TStructureBranch { structures: chosen, level })
}

fn order_key(s: &TStructure) -> (u32, Point2, Point2) {
    (s.level, s.end_points[0], s.end_points[1])
}

/// Orders a branch: the lowest-level structure first, then repeatedly every unplaced
/// structure connected to a placed one, each batch sorted by level and start vertex.
pub fn order_branch(branch: &TStructureBranch) -> Result<TStructureBranch> {
    let n = branch.structures.len();
    if n == 0 {
        return Err(Error::Precondition("empty T-structure branch".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by_key(|&i| order_key(&branch.structures[i]));
    let mut placed = vec![false; n];
    let mut order = vec![idx[0]];
    placed[idx[0]] = true;
    while order.len() < n {
        let mut batch: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| !placed[i] && order.iter().any(|&p| branch.structures[p].connects(&branch.structures[i])))
            .collect();
        if batch.is_empty() {
            return Err(Error::Precondition("T-structure branch is not connected".into()));
        }
        batch.sort_by_key(|&i| order_key(&branch.structures[i]));
        for &i in &batch {
            placed[i] = true;
        }
        order.extend(batch);
    }
    Ok(TStructureBranch {
        structures: order.into_iter().map(|i| branch.structures[i].clone()).collect(),
        level: branch.level,
    })
}

/// `f(s, t) = a·s·t + b·s + c·t + d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilinearFunc {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    /// Local frame used for evaluation, which avoids cancellation far from the origin.
    #[serde(skip)]
    frame: Frame,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
struct Frame {
    s0: f64,
    t0: f64,
    hs: f64,
    ht: f64,
    coef: [f64; 4],
}

impl BilinearFunc {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        BilinearFunc { a, b, c, d, frame: Frame { s0: 0.0, t0: 0.0, hs: 1.0, ht: 1.0, coef: [a, b, c, d] } }
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let f = &self.frame;
        if f.hs == 0.0 {
            return self.a * s * t + self.b * s + self.c * t + self.d;
        }
        let (u, v) = ((s - f.s0) / f.hs, (t - f.t0) / f.ht);
        f.coef[0] * u * v + f.coef[1] * u + f.coef[2] * v + f.coef[3]
    }
}

/// Where the value of an adaptive node comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeSource {
    /// Weight at the domain-centre of a T-rectangle-domain.
    DomainCentreWeight { t_connection: usize },
    /// Centre ordinate of a P-cell, equal to its weight.
    CentreOrdinate { cell: CellId },
    /// Ordinate already known in the propagation state.
    ComputedOrdinate { cell: CellId, j: usize, k: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveNode {
    pub point: (f64, f64),
    pub value: f64,
    pub source: NodeSource,
}

/// Four nodes determining a bilinear function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveNodes(pub [AdaptiveNode; 4]);

impl AdaptiveNodes {
    /// Short description of where the node values came from.
    pub fn case_label(&self) -> String {
        let (mut w, mut c, mut k) = (0, 0, 0);
        for n in &self.0 {
            match n.source {
                NodeSource::DomainCentreWeight { .. } => w += 1,
                NodeSource::CentreOrdinate { .. } => c += 1,
                NodeSource::ComputedOrdinate { .. } => k += 1,
            }
        }
        format!("domain-centre:{w} centre:{c} computed:{k}")
    }
}

/// Unique bilinear interpolant of four nodes.
pub fn bilinear_from_nodes(nodes: &AdaptiveNodes) -> Result<BilinearFunc> {
    let pts: Vec<(f64, f64)> = nodes.0.iter().map(|n| n.point).collect();
    let s0 = pts.iter().map(|p| p.0).sum::<f64>() / 4.0;
    let t0 = pts.iter().map(|p| p.1).sum::<f64>() / 4.0;
    let hs = pts.iter().map(|p| (p.0 - s0).abs()).fold(0.0, f64::max);
    let ht = pts.iter().map(|p| (p.1 - t0).abs()).fold(0.0, f64::max);
    if !(hs > 0.0 && ht > 0.0) {
        return Err(Error::DegenerateNodes(format!("nodes {pts:?} lie on one line")));
    }
    let m = Matrix4::from_fn(|r, c| {
        let (u, v) = ((pts[r].0 - s0) / hs, (pts[r].1 - t0) / ht);
        [u * v, u, v, 1.0][c]
    });
    let sv = m.singular_values();
    if sv.min() <= 1e-10 * sv.max() {
        return Err(Error::DegenerateNodes(format!("nodes {pts:?} do not determine a bilinear function")));
    }
    let rhs = Vector4::from_fn(|r, _| nodes.0[r].value);
    let x = m.lu().solve(&rhs).ok_or_else(|| Error::DegenerateNodes(format!("singular node system at {pts:?}")))?;
    let coef = [x[0], x[1], x[2], x[3]];
    let a = coef[0] / (hs * ht);
    let b = coef[1] / hs - a * t0;
    let c = coef[2] / ht - a * s0;
    let d = coef[3] - coef[1] * s0 / hs - coef[2] * t0 / ht + coef[0] * s0 * t0 / (hs * ht);
    Ok(BilinearFunc { a, b, c, d, frame: Frame { s0, t0, hs, ht, coef } })
}

/// One of the sixteen ordinates around a crossing vertex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexOrdinate {
    pub cell: CellId,
    pub j: usize,
    pub k: usize,
    pub point: (f64, f64),
    pub value: f64,
}

#[derive(Clone, Copy, Debug)]
struct StencilEntry {
    slot: usize,
    j: usize,
    k: usize,
    point: (f64, f64),
}

fn stencil(mesh: &HierarchicalTMesh, t: &Topology, v: (Key, Key)) -> Option<Vec<StencilEntry>> {
    if t.vertex(v.0, v.1).map(|i| i.class) != Some(VertexClass::CrossingVertex) {
        return None;
    }
    let mut out = Vec::with_capacity(16);
    for &slot in &t.corner_leaves[&v] {
        let r = t.rects[slot];
        let rr = mesh.real_rect_keys(&r);
        let js = if r[1] == v.0 { [1, 2] } else { [0, 1] };
        let ks = if r[3] == v.1 { [1, 2] } else { [0, 1] };
        for j in js {
            for k in ks {
                out.push(StencilEntry { slot, j, k, point: domain_point(&rr, j, k) });
            }
        }
    }
    Some(out)
}

/// The sixteen ordinates of the four cells around `v` nearest to it, sampled from `f`.
pub fn vertex_corresponding_ords(f: &BilinearFunc, v: Point2, mesh: &HierarchicalTMesh) -> Result<Vec<VertexOrdinate>> {
    let t = mesh.topology();
    let st = stencil(mesh, &t, v.keys())
        .ok_or_else(|| Error::Precondition(format!("{} is not a crossing vertex", fmt_point(&v))))?;
    Ok(st
        .into_iter()
        .map(|e| VertexOrdinate {
            cell: t.leaves[e.slot],
            j: e.j,
            k: e.k,
            point: e.point,
            value: f.eval(e.point.0, e.point.1),
        })
        .collect())
}

#[derive(Clone, Copy, Debug)]
struct VirtualNode {
    tc: usize,
    point: (f64, f64),
}

/// Immutable data shared by every basis build over one mesh.
pub struct PropagationContext {
    pub cvr: Arc<CvrGraph>,
    pub topo: Arc<Topology>,
    pub classes: Vec<CellClass>,
    pub structures: Vec<TStructure>,
    /// Ordered branch of every T-connection.
    pub branches: Vec<TStructureBranch>,
    pub(crate) tc_of_slot: Vec<Option<usize>>,
    pub(crate) crossing_index: HashMap<(Key, Key), usize>,
    pub(crate) pcell_g: HashMap<CellId, usize>,
    stencils: Vec<Vec<StencilEntry>>,
    virtuals: Vec<Vec<VirtualNode>>,
    /// Coefficients of each one-neighbour cell's ordinates in the centre ordinate over the TRD.
    phi_rows: Vec<Vec<(usize, [[f64; 3]; 3])>>,
}

fn facing_side(c: &[Key; 4], d: &[Key; 4]) -> Option<Side> {
    if c[1] == d[0] && c[2] == d[2] && c[3] == d[3] {
        Some(Side::East)
    } else if c[0] == d[1] && c[2] == d[2] && c[3] == d[3] {
        Some(Side::West)
    } else if c[3] == d[2] && c[0] == d[0] && c[1] == d[1] {
        Some(Side::North)
    } else if c[2] == d[3] && c[0] == d[0] && c[1] == d[1] {
        Some(Side::South)
    } else {
        None
    }
}

fn side_has_corner(c: &[Key; 4], side: Side, v: (Key, Key)) -> bool {
    match side {
        Side::East => v.0 == c[1],
        Side::West => v.0 == c[0],
        Side::North => v.1 == c[3],
        Side::South => v.1 == c[2],
    }
}

impl PropagationContext {
    pub fn new(cvr: Arc<CvrGraph>) -> Result<Self> {
        let mesh = cvr.mesh.clone();
        let topo = mesh.try_topology()?;
        let classes = classify_cells(&topo);
        let structures = find_t_structures(&mesh);
        let mut branches = Vec::with_capacity(cvr.t_connections.len());
        let mut tc_of_slot = vec![None; topo.leaves.len()];
        for (i, tc) in cvr.t_connections.iter().enumerate() {
            for &c in &tc.t_cells {
                tc_of_slot[topo.slot(c).expect("T-cell is a leaf")] = Some(i);
            }
            branches.push(order_branch(&branch_for(&mesh, &structures, &tc.t_cells)?)?);
        }
        let mut crossing_index = HashMap::new();
        let mut stencils = Vec::new();
        for (&v, info) in &topo.vertices {
            if info.class == VertexClass::CrossingVertex {
                crossing_index.insert(v, stencils.len());
                stencils.push(stencil(&mesh, &topo, v).expect("crossing vertex"));
            }
        }
        let mut virtuals = vec![Vec::new(); stencils.len()];
        let mut phi_rows = Vec::with_capacity(cvr.t_connections.len());
        for (i, tc) in cvr.t_connections.iter().enumerate() {
            let d = tc.trd.keys();
            let mut rows = Vec::new();
            for &c in &tc.one_neighbour_cells {
                let slot = topo.slot(c).expect("one-neighbour cell is a leaf");
                let r = mesh.cell_rect(c);
                let mx = reparam_matrix((tc.trd_real.x0 - r.x0) / r.width(), (tc.trd_real.x1 - r.x0) / r.width());
                let my = reparam_matrix((tc.trd_real.y0 - r.y0) / r.height(), (tc.trd_real.y1 - r.y0) / r.height());
                let mut coef = [[0.0; 3]; 3];
                for (j, row) in coef.iter_mut().enumerate() {
                    for (k, v) in row.iter_mut().enumerate() {
                        *v = mx[1][j] * my[1][k];
                    }
                }
                rows.push((slot, coef));
                if tc.g_cell.is_none() {
                    continue;
                }
                let ck = topo.rects[slot];
                if let Some(side) = facing_side(&ck, &d) {
                    for v in topo.corners(slot) {
                        if side_has_corner(&ck, side, v) {
                            if let Some(&vi) = crossing_index.get(&v) {
                                virtuals[vi].push(VirtualNode { tc: i, point: tc.domain_centre });
                            }
                        }
                    }
                }
            }
            phi_rows.push(rows);
        }
        let pcell_g = cvr
            .g_cells
            .iter()
            .enumerate()
            .filter_map(|(i, g)| match g.link {
                BackLink::PCell(c) => Some((c, i)),
                BackLink::TConnection(_) => None,
            })
            .collect();
        Ok(PropagationContext {
            cvr,
            topo,
            classes,
            structures,
            branches,
            tc_of_slot,
            crossing_index,
            pcell_g,
            stencils,
            virtuals,
            phi_rows,
        })
    }

    pub fn mesh(&self) -> &Arc<HierarchicalTMesh> {
        &self.cvr.mesh
    }

    /// Crossing vertices at the corners of a leaf slot.
    fn slot_crossings(&self, slot: usize) -> impl Iterator<Item = usize> + '_ {
        self.topo.corners(slot).into_iter().filter_map(|v| self.crossing_index.get(&v).copied())
    }
}

/// Record of one propagation step taken while processing a branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TraceEvent {
    EndPoint { structure: usize, vertex: (f64, f64), case: String, nodes: AdaptiveNodes, bilinear: BilinearFunc },
    EndPointDeferred { structure: usize, vertex: (f64, f64), reason: String },
    MotherRows { structure: usize, mother: CellId, filled: bool },
}

type Ords = [[Option<f64>; 3]; 3];

/// Partially known ordinates of one basis function under construction.
pub struct PropagationState<'a> {
    ctx: &'a PropagationContext,
    pub weights: &'a WeightField,
    ords: Vec<Ords>,
    in_region: Vec<bool>,
    region: Vec<usize>,
    vertices: Vec<usize>,
    tcs: Vec<usize>,
    vertex_done: Vec<bool>,
    sent: Vec<[bool; 4]>,
    pub completed: BTreeSet<usize>,
    pub trace: Vec<TraceEvent>,
}

fn agree(a: f64, b: f64) -> bool {
    (a - b).abs() <= CONFLICT_TOL * a.abs().max(b.abs()).max(1.0)
}

impl<'a> PropagationState<'a> {
    /// State with the given leaf slots unknown and every other cell fixed at zero.
    ///
    /// Seeds P-cell centre ordinates with their weights and the two rows along the
    /// domain boundary with zeros.
    pub fn new(ctx: &'a PropagationContext, weights: &'a WeightField, region: &[usize]) -> Result<Self> {
        let n = ctx.topo.leaves.len();
        let mut in_region = vec![false; n];
        let mut ords = vec![[[Some(0.0); 3]; 3]; n];
        let mut region: Vec<usize> = region.to_vec();
        region.sort_unstable();
        region.dedup();
        let mut vset = BTreeSet::new();
        let mut tset = BTreeSet::new();
        for &s in &region {
            in_region[s] = true;
            ords[s] = [[None; 3]; 3];
            vset.extend(ctx.slot_crossings(s));
            if let Some(tc) = ctx.tc_of_slot[s] {
                tset.insert(tc);
            }
        }
        for (i, rows) in ctx.phi_rows.iter().enumerate() {
            if rows.iter().any(|(s, _)| in_region[*s]) {
                tset.insert(i);
            }
        }
        let nv = ctx.stencils.len();
        let mut st = PropagationState {
            ctx,
            weights,
            ords,
            in_region,
            region,
            vertices: vset.into_iter().collect(),
            tcs: tset.into_iter().collect(),
            vertex_done: vec![false; nv],
            sent: vec![[false; 4]; n],
            completed: BTreeSet::new(),
            trace: Vec::new(),
        };
        let d = ctx.topo.domain;
        for i in 0..st.region.len() {
            let s = st.region[i];
            if ctx.classes[s] == CellClass::PCell {
                let g = st.pcell_weight(s)?;
                st.set(s, 1, 1, g)?;
            }
            let r = ctx.topo.rects[s];
            for (side, on) in [
                (Side::West, r[0] == d[0]),
                (Side::East, r[1] == d[1]),
                (Side::South, r[2] == d[2]),
                (Side::North, r[3] == d[3]),
            ] {
                if on {
                    for rr in 0..2 {
                        for i in 0..3 {
                            let (j, k) = EdgeRows::position(side, rr, i);
                            st.set(s, j, k, 0.0)?;
                        }
                    }
                }
            }
        }
        Ok(st)
    }

    fn pcell_weight(&self, slot: usize) -> Result<f64> {
        let c = self.ctx.topo.leaves[slot];
        let g = *self.ctx.pcell_g.get(&c).ok_or_else(|| Error::Consistency(format!("P-cell {c} has no g-cell")))?;
        Ok(self.weights.values[g])
    }

    fn tc_weight(&self, tc: usize) -> Option<f64> {
        self.ctx.cvr.t_connections[tc].g_cell.map(|g| self.weights.values[g])
    }

    pub fn get(&self, cell: CellId, j: usize, k: usize) -> Option<f64> {
        self.ctx.topo.slot(cell).and_then(|s| self.ords[s][j][k])
    }

    pub fn unknown_count(&self) -> usize {
        self.region.iter().map(|&s| self.ords[s].iter().flatten().filter(|o| o.is_none()).count()).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.unknown_count() == 0
    }

    fn set(&mut self, slot: usize, j: usize, k: usize, v: f64) -> Result<bool> {
        match self.ords[slot][j][k] {
            Some(old) => {
                if agree(old, v) {
                    Ok(false)
                } else {
                    let c = self.ctx.topo.leaves[slot];
                    Err(Error::Consistency(format!("ordinate ({j},{k}) of cell {c} derived as both {old} and {v}")))
                }
            }
            None => {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("non-finite ordinate for cell {}", self.ctx.topo.leaves[slot])));
                }
                self.ords[slot][j][k] = Some(v);
                Ok(true)
            }
        }
    }

    fn is_pcell_centre(&self, slot: usize, j: usize, k: usize) -> bool {
        j == 1 && k == 1 && self.ctx.classes[slot] == CellClass::PCell
    }

    fn candidates(&self, vi: usize) -> Vec<AdaptiveNode> {
        let mut out = Vec::new();
        for vn in &self.ctx.virtuals[vi] {
            if let Some(w) = self.tc_weight(vn.tc) {
                out.push(AdaptiveNode {
                    point: vn.point,
                    value: w,
                    source: NodeSource::DomainCentreWeight { t_connection: vn.tc },
                });
            }
        }
        let st = &self.ctx.stencils[vi];
        for e in st.iter().filter(|e| self.is_pcell_centre(e.slot, e.j, e.k)) {
            if let Some(v) = self.ords[e.slot][e.j][e.k] {
                out.push(AdaptiveNode {
                    point: e.point,
                    value: v,
                    source: NodeSource::CentreOrdinate { cell: self.ctx.topo.leaves[e.slot] },
                });
            }
        }
        for e in st.iter().filter(|e| !self.is_pcell_centre(e.slot, e.j, e.k)) {
            if let Some(v) = self.ords[e.slot][e.j][e.k] {
                out.push(AdaptiveNode {
                    point: e.point,
                    value: v,
                    source: NodeSource::ComputedOrdinate { cell: self.ctx.topo.leaves[e.slot], j: e.j, k: e.k },
                });
            }
        }
        out
    }

    /// First admissible quadruple among the available nodes, preferring domain-centre
    /// weights, then P-cell centres, then computed ordinates.
    fn choose(&self, vi: usize, cands: &[AdaptiveNode]) -> Option<AdaptiveNodes> {
        let st = &self.ctx.stencils[vi];
        let s0 = st.iter().map(|e| e.point.0).sum::<f64>() / st.len() as f64;
        let t0 = st.iter().map(|e| e.point.1).sum::<f64>() / st.len() as f64;
        let hs = st.iter().map(|e| (e.point.0 - s0).abs()).fold(0.0, f64::max);
        let ht = st.iter().map(|e| (e.point.1 - t0).abs()).fold(0.0, f64::max);
        let mut basis: Vec<[f64; 4]> = Vec::with_capacity(4);
        let mut chosen = Vec::with_capacity(4);
        for n in cands {
            let (u, v) = ((n.point.0 - s0) / hs, (n.point.1 - t0) / ht);
            let row = [u * v, u, v, 1.0];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut r = row;
            for q in &basis {
                let dot: f64 = (0..4).map(|i| r[i] * q[i]).sum();
                for i in 0..4 {
                    r[i] -= dot * q[i];
                }
            }
            let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if rn > 1e-8 * norm {
                basis.push(r.map(|x| x / rn));
                chosen.push(*n);
                if chosen.len() == 4 {
                    return Some(AdaptiveNodes([chosen[0], chosen[1], chosen[2], chosen[3]]));
                }
            }
        }
        None
    }

    /// Adaptive nodes for the crossing vertex `v` from the values currently available.
    pub fn select_adaptive_nodes(&self, v: Point2) -> Result<AdaptiveNodes> {
        let vi = *self
            .ctx
            .crossing_index
            .get(&v.keys())
            .ok_or_else(|| Error::Precondition(format!("{} is not a crossing vertex", fmt_point(&v))))?;
        let cands = self.candidates(vi);
        self.choose(vi, &cands).ok_or_else(|| {
            Error::DegenerateNodes(format!(
                "only {} known values around {} do not determine a bilinear function",
                cands.len(),
                fmt_point(&v)
            ))
        })
    }

    fn vertex_rule(&mut self, vi: usize) -> Result<Option<(AdaptiveNodes, BilinearFunc)>> {
        if self.vertex_done[vi] {
            return Ok(None);
        }
        let cands = self.candidates(vi);
        let Some(nodes) = self.choose(vi, &cands) else { return Ok(None) };
        let f = bilinear_from_nodes(&nodes)?;
        for n in &cands {
            let fv = f.eval(n.point.0, n.point.1);
            if !agree(fv, n.value) {
                return Err(Error::Consistency(format!(
                    "values around a crossing vertex are not bilinear: node {:?} has {} but the bilinear gives {fv}",
                    n.point, n.value
                )));
            }
        }
        let entries = self.ctx.stencils[vi].clone();
        for e in entries {
            self.set(e.slot, e.j, e.k, f.eval(e.point.0, e.point.1))?;
        }
        self.vertex_done[vi] = true;
        Ok(Some((nodes, f)))
    }

    fn rows_known(&self, slot: usize, side: Side) -> bool {
        (0..2).all(|r| {
            (0..3).all(|i| {
                let (j, k) = EdgeRows::position(side, r, i);
                self.ords[slot][j][k].is_some()
            })
        })
    }

    /// Sends the two rows of `slot` along `side` to every neighbour across it.
    fn edge_rule(&mut self, slot: usize, side: Side) -> Result<bool> {
        if self.sent[slot][side.index()] || !self.rows_known(slot, side) {
            return Ok(false);
        }
        self.sent[slot][side.index()] = true;
        let mesh = self.ctx.mesh();
        let mut b = [[0.0; 3]; 3];
        for r in 0..2 {
            for i in 0..3 {
                let (j, k) = EdgeRows::position(side, r, i);
                b[j][k] = self.ords[slot][j][k].expect("rows known");
            }
        }
        let src = BOrdGrid { rect: mesh.real_rect_keys(&self.ctx.topo.rects[slot]), b };
        let mut changed = false;
        let far = side.opposite();
        for a in self.ctx.topo.neighbours[slot][side.index()].clone() {
            let g = reexpress(&src, mesh.real_rect_keys(&self.ctx.topo.rects[a.leaf]))?;
            for r in 0..2 {
                for i in 0..3 {
                    let (j, k) = EdgeRows::position(far, r, i);
                    changed |= self.set(a.leaf, j, k, g.b[j][k])?;
                }
            }
        }
        Ok(changed)
    }

    fn phi_rule(&mut self, tc: usize) -> Result<bool> {
        if self.completed.contains(&tc) {
            return Ok(false);
        }
        let Some(w) = self.tc_weight(tc) else { return Ok(false) };
        let mut changed = false;
        let mut all_known = true;
        for (slot, coef) in self.ctx.phi_rows[tc].iter() {
            let scale = coef.iter().flatten().fold(0.0f64, |m, c| m.max(c.abs()));
            let mut sum = 0.0;
            let mut unknown = Vec::new();
            for j in 0..3 {
                for k in 0..3 {
                    if coef[j][k].abs() <= 1e-14 * scale {
                        continue;
                    }
                    match self.ords[*slot][j][k] {
                        Some(v) => sum += coef[j][k] * v,
                        None => unknown.push((j, k)),
                    }
                }
            }
            match unknown.as_slice() {
                [] => {
                    if !agree(sum, w) {
                        return Err(Error::Consistency(format!(
                            "one-neighbour cell {} gives {sum} at the domain-centre of T-connection {tc} instead of {w}",
                            self.ctx.topo.leaves[*slot]
                        )));
                    }
                }
                [(j, k)] => {
                    changed |= self.set(*slot, *j, *k, (w - sum) / coef[*j][*k])?;
                    all_known = false;
                }
                _ => all_known = false,
            }
        }
        if all_known {
            self.completed.insert(tc);
        }
        Ok(changed)
    }

    /// Applies every local rule until nothing changes.
    pub fn closure(&mut self) -> Result<()> {
        loop {
            let mut changed = false;
            for i in 0..self.vertices.len() {
                changed |= self.vertex_rule(self.vertices[i])?.is_some();
            }
            for i in 0..self.region.len() {
                let s = self.region[i];
                for side in Side::ALL {
                    changed |= self.edge_rule(s, side)?;
                    for a in self.ctx.topo.neighbours[s][side.index()].clone() {
                        if !self.in_region[a.leaf] {
                            changed |= self.edge_rule(a.leaf, side.opposite())?;
                        }
                    }
                }
            }
            for i in 0..self.tcs.len() {
                changed |= self.phi_rule(self.tcs[i])?;
            }
            if !changed {
                return Ok(());
            }
        }
    }

    /// Converts a complete state into a spline, dropping cells whose ordinates are all zero.
    pub fn into_spline(self) -> Result<SplineFunction> {
        let mesh = self.ctx.mesh().clone();
        let mut f = SplineFunction::zero(mesh.clone(), true);
        for &s in &self.region {
            let mut b = [[0.0; 3]; 3];
            for j in 0..3 {
                for k in 0..3 {
                    b[j][k] = self.ords[s][j][k].ok_or_else(|| {
                        Error::Consistency(format!(
                            "ordinate ({j},{k}) of cell {} was never determined",
                            self.ctx.topo.leaves[s]
                        ))
                    })?;
                }
            }
            if b.iter().flatten().any(|&v| v != 0.0) {
                let c = self.ctx.topo.leaves[s];
                f.support.insert(c, BOrdGrid { rect: mesh.cell_rect(c), b });
            }
        }
        Ok(f)
    }
}

/// Ordinates of one branch: end-point bilinears of each structure in order, then the
/// mother cell's rows along the mid-edge, then C¹ conditions over the connection.
pub fn branch_bordinates(state: &mut PropagationState<'_>, branch: &TStructureBranch, tc: Option<usize>) -> Result<()> {
    let ctx = state.ctx;
    let mesh = ctx.mesh().clone();
    for (n, s) in branch.structures.iter().enumerate() {
        for p in s.end_points {
            let Some(&vi) = ctx.crossing_index.get(&p.keys()) else { continue };
            let (x, y) = mesh.real_point(&p);
            match state.vertex_rule(vi)? {
                Some((nodes, bilinear)) => state.trace.push(TraceEvent::EndPoint {
                    structure: n,
                    vertex: (x, y),
                    case: nodes.case_label(),
                    nodes,
                    bilinear,
                }),
                None if state.vertex_done[vi] => {}
                None => state.trace.push(TraceEvent::EndPointDeferred {
                    structure: n,
                    vertex: (x, y),
                    reason: "fewer than four admissible known values".into(),
                }),
            }
        }
        let slot = ctx.topo.slot(s.mother_cell).expect("mother cell is a leaf");
        let r = ctx.topo.rects[slot];
        let (line, _, _) = line_span(&s.mid_edge);
        let side = match s.orientation {
            Axis::Horizontal if r[3] == line => Side::North,
            Axis::Horizontal => Side::South,
            Axis::Vertical if r[1] == line => Side::East,
            Axis::Vertical => Side::West,
        };
        let filled = state.rows_known(slot, side);
        state.edge_rule(slot, side)?;
        state.trace.push(TraceEvent::MotherRows { structure: n, mother: s.mother_cell, filled });
    }
    state.closure()?;
    if let Some(tc) = tc {
        state.phi_rule(tc)?;
    }
    Ok(())
}
