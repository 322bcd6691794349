//! Hierarchical T-meshes of 2×2 division with exact dyadic topology.
//!
//! Coordinates are stored as [`AxisCoord`] values: an index into the level-0
//! knot vector plus a dyadic fraction inside that interval. All topological
//! decisions (vertex coincidence, edge overlap, classification) are made on
//! integer keys derived from these coordinates, never on floating point.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a cell inside [`HierarchicalTMesh::cells`]. Stable across snapshots.
pub type CellId = usize;

/// Exact ordering key of an [`AxisCoord`]: `seg << 64 | frac`.
pub type Key = i128;

const FRAC_BITS: u32 = 64;
const FRAC_MASK: i128 = (1i128 << FRAC_BITS) - 1;

/// Deepest dyadic subdivision supported by [`AxisCoord`].
pub const MAX_DEPTH: u32 = 60;

/// Exact position along one axis: `knots[seg] + num / 2^depth * (knots[seg+1] - knots[seg])`.
///
/// Values are kept canonical: `num` is odd unless it is zero, and a position on a
/// level-0 knot is always stored as `(seg, 0, 0)`, so equal positions compare equal field-wise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AxisCoord {
    pub seg: u32,
    pub num: u64,
    pub depth: u32,
}

impl AxisCoord {
    /// The coordinate of level-0 knot `seg`.
    pub const fn knot(seg: u32) -> Self {
        AxisCoord { seg, num: 0, depth: 0 }
    }

    /// Builds a canonical coordinate from a possibly unreduced fraction `num / 2^depth` in `[0, 1]`.
    pub fn new(seg: u32, num: u64, depth: u32) -> Result<Self> {
        if depth > MAX_DEPTH {
            return Err(Error::InvalidInput(format!("depth {depth} exceeds {MAX_DEPTH}")));
        }
        if num > (1u64 << depth) {
            return Err(Error::InvalidInput(format!("fraction {num}/2^{depth} exceeds 1")));
        }
        let key = ((seg as i128) << FRAC_BITS) + ((num as i128) << (FRAC_BITS - depth));
        Ok(Self::from_key(key))
    }

    pub fn key(self) -> Key {
        ((self.seg as i128) << FRAC_BITS) | ((self.num as i128) << (FRAC_BITS - self.depth))
    }

    pub fn from_key(key: Key) -> Self {
        let seg = (key >> FRAC_BITS) as u32;
        let frac = (key & FRAC_MASK) as u64;
        if frac == 0 {
            return Self::knot(seg);
        }
        let tz = frac.trailing_zeros();
        AxisCoord { seg, num: frac >> tz, depth: FRAC_BITS - tz }
    }

    /// Exact midpoint of two coordinates lying in the same level-0 interval.
    pub fn midpoint(a: Self, b: Self) -> Self {
        Self::from_key((a.key() + b.key()) >> 1)
    }

    /// Position inside the level-0 interval, in `[0, 1)`.
    pub fn fraction(self) -> f64 {
        self.num as f64 * 2f64.powi(-(self.depth as i32))
    }

    /// Real coordinate for the given level-0 knot vector.
    pub fn real(self, knots: &[f64]) -> f64 {
        let s = self.seg as usize;
        if self.num == 0 {
            knots[s]
        } else {
            knots[s] + self.fraction() * (knots[s + 1] - knots[s])
        }
    }

    /// Same position after prepending `by` knots to the knot vector.
    pub fn shifted(self, by: i64) -> Self {
        AxisCoord { seg: (self.seg as i64 + by) as u32, ..self }
    }
}

impl PartialOrd for AxisCoord {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AxisCoord {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Display for AxisCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.num == 0 {
            write!(f, "{}", self.seg)
        } else {
            write!(f, "{}+{}/2^{}", self.seg, self.num, self.depth)
        }
    }
}

/// A grid point in exact coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point2 {
    pub x: AxisCoord,
    pub y: AxisCoord,
}

impl Point2 {
    pub fn new(x: AxisCoord, y: AxisCoord) -> Self {
        Point2 { x, y }
    }

    pub fn from_keys(x: Key, y: Key) -> Self {
        Point2 { x: AxisCoord::from_key(x), y: AxisCoord::from_key(y) }
    }

    pub fn keys(self) -> (Key, Key) {
        (self.x.key(), self.y.key())
    }
}

/// Axis-aligned rectangle with exact bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: AxisCoord,
    pub x1: AxisCoord,
    pub y0: AxisCoord,
    pub y1: AxisCoord,
}

impl Rect {
    pub fn keys(&self) -> [Key; 4] {
        [self.x0.key(), self.x1.key(), self.y0.key(), self.y1.key()]
    }

    pub fn from_keys(k: [Key; 4]) -> Self {
        Rect {
            x0: AxisCoord::from_key(k[0]),
            x1: AxisCoord::from_key(k[1]),
            y0: AxisCoord::from_key(k[2]),
            y1: AxisCoord::from_key(k[3]),
        }
    }

    pub fn shifted(&self, dx: i64, dy: i64) -> Self {
        Rect { x0: self.x0.shifted(dx), x1: self.x1.shifted(dx), y0: self.y0.shifted(dy), y1: self.y1.shifted(dy) }
    }

    /// True when `other` lies inside `self` (closed).
    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.x0 <= other.x0 && other.x1 <= self.x1 && self.y0 <= other.y0 && other.y1 <= self.y1
    }

    /// True when the closed rectangles share at least one point.
    pub fn touches(&self, other: &Rect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    /// True when the open rectangles overlap.
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn corners(&self) -> [Point2; 4] {
        [
            Point2::new(self.x0, self.y0),
            Point2::new(self.x1, self.y0),
            Point2::new(self.x0, self.y1),
            Point2::new(self.x1, self.y1),
        ]
    }
}

/// Rectangle in real coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealRect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl RealRect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        RealRect { x0, x1, y0, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn centre(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x <= self.x1 && self.y0 <= y && y <= self.y1
    }
}

/// One node of the subdivision forest.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub rect: Rect,
    pub level: u32,
    pub parent: Option<CellId>,
    /// Quadrant children in the order SW, SE, NW, NE.
    pub children: Option<[CellId; 4]>,
    /// False for cells absorbed by mesh simplification.
    pub active: bool,
}

impl Cell {
    pub fn is_leaf(&self) -> bool {
        self.active && self.children.is_none()
    }
}

/// Bookkeeping for a mesh produced by [`extend_mesh`].
#[derive(Clone, Debug, PartialEq)]
pub struct Extension {
    /// The original domain Ω inside the extended knot grid.
    pub inner: Rect,
    /// Knots prepended on the left (x) and bottom (y).
    pub shift_x: u32,
    pub shift_y: u32,
    /// Cells with ids below this value are the cells of the original mesh.
    pub inner_cell_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VertexClass {
    BoundaryVertex,
    CrossingVertex,
    TJunction,
}

/// Arm directions around a vertex.
pub const EAST: usize = 0;
pub const NORTH: usize = 1;
pub const WEST: usize = 2;
pub const SOUTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VertexInfo {
    pub class: VertexClass,
    /// Presence of a mesh edge leaving the vertex towards E, N, W, S.
    pub arms: [bool; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LEdgeKind {
    BoundaryLEdge,
    InteriorLEdge,
    TLEdge,
}

/// Maximal straight segment of the mesh.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LEdge {
    pub axis: Axis,
    pub start: Point2,
    pub end: Point2,
    pub kind: LEdgeKind,
    pub interior_vertices: Vec<Point2>,
    pub interior_crossing_count: usize,
}

/// Maximal segment whose inner vertices are all T-junctions passed straight through.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CEdge {
    pub axis: Axis,
    pub start: Point2,
    pub end: Point2,
    pub interior_vertices: Vec<Point2>,
}

/// A neighbouring leaf across one side, with the shared interval along that side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Adjacent {
    /// Index into [`Topology::leaves`].
    pub leaf: usize,
    pub lo: Key,
    pub hi: Key,
}

/// Derived combinatorial structure of a mesh: leaves, lines, vertices and adjacency.
#[derive(Debug)]
pub struct Topology {
    pub leaves: Vec<CellId>,
    leaf_slot: Vec<usize>,
    /// Exact bounds `[x0, x1, y0, y1]` of each leaf.
    pub rects: Vec<[Key; 4]>,
    /// Maximal horizontal segments keyed by y: sorted disjoint `(x_start, x_end)`.
    pub hlines: BTreeMap<Key, Vec<(Key, Key)>>,
    /// Maximal vertical segments keyed by x: sorted disjoint `(y_start, y_end)`.
    pub vlines: BTreeMap<Key, Vec<(Key, Key)>>,
    /// Vertices keyed by `(x, y)`.
    pub vertices: BTreeMap<(Key, Key), VertexInfo>,
    rows: BTreeSet<(Key, Key)>,
    /// Neighbours of each leaf across its E, N, W, S sides.
    pub neighbours: Vec<[Vec<Adjacent>; 4]>,
    /// Leaves having the vertex as a corner.
    pub corner_leaves: HashMap<(Key, Key), Vec<usize>>,
    pub domain: [Key; 4],
    buckets: Vec<Vec<usize>>,
    bucket_nx: usize,
}

const NONE: usize = usize::MAX;

impl Topology {
    fn build(mesh: &HierarchicalTMesh) -> Result<Topology> {
        let leaves: Vec<CellId> = (0..mesh.cells.len()).filter(|&i| mesh.cells[i].is_leaf()).collect();
        let mut leaf_slot = vec![NONE; mesh.cells.len()];
        for (i, &c) in leaves.iter().enumerate() {
            leaf_slot[c] = i;
        }
        let rects: Vec<[Key; 4]> = leaves.iter().map(|&c| mesh.cells[c].rect.keys()).collect();
        let domain = mesh.domain.keys();

        let mut hraw: BTreeMap<Key, Vec<(Key, Key)>> = BTreeMap::new();
        let mut vraw: BTreeMap<Key, Vec<(Key, Key)>> = BTreeMap::new();
        for r in &rects {
            hraw.entry(r[2]).or_default().push((r[0], r[1]));
            hraw.entry(r[3]).or_default().push((r[0], r[1]));
            vraw.entry(r[0]).or_default().push((r[2], r[3]));
            vraw.entry(r[1]).or_default().push((r[2], r[3]));
        }
        let hlines: BTreeMap<Key, Vec<(Key, Key)>> = hraw.into_iter().map(|(k, v)| (k, merge_intervals(v))).collect();
        let vlines: BTreeMap<Key, Vec<(Key, Key)>> = vraw.into_iter().map(|(k, v)| (k, merge_intervals(v))).collect();

        let mut corner_leaves: HashMap<(Key, Key), Vec<usize>> = HashMap::new();
        for (i, r) in rects.iter().enumerate() {
            for p in [(r[0], r[2]), (r[1], r[2]), (r[0], r[3]), (r[1], r[3])] {
                corner_leaves.entry(p).or_default().push(i);
            }
        }

        let mut vertices = BTreeMap::new();
        let mut rows = BTreeSet::new();
        for &(x, y) in corner_leaves.keys() {
            let h = hlines.get(&y).map(|v| v.as_slice()).unwrap_or(&[]);
            let v = vlines.get(&x).map(|v| v.as_slice()).unwrap_or(&[]);
            let arms = [covers_after(h, x), covers_after(v, y), covers_before(h, x), covers_before(v, y)];
            let on_boundary = x == domain[0] || x == domain[1] || y == domain[2] || y == domain[3];
            let valence = arms.iter().filter(|&&a| a).count();
            let class = if on_boundary {
                VertexClass::BoundaryVertex
            } else if valence == 4 {
                VertexClass::CrossingVertex
            } else if valence == 3 {
                VertexClass::TJunction
            } else {
                return Err(Error::Consistency(format!(
                    "interior vertex {} has valence {valence}",
                    fmt_point(&Point2::from_keys(x, y))
                )));
            };
            vertices.insert((x, y), VertexInfo { class, arms });
            rows.insert((y, x));
        }

        let mut neighbours: Vec<[Vec<Adjacent>; 4]> = (0..leaves.len()).map(|_| Default::default()).collect();
        // Vertical lines: cells whose east side is on the line face cells whose west side is on it.
        let mut west_of: BTreeMap<Key, Vec<(Key, Key, usize)>> = BTreeMap::new();
        let mut east_of: BTreeMap<Key, Vec<(Key, Key, usize)>> = BTreeMap::new();
        let mut south_of: BTreeMap<Key, Vec<(Key, Key, usize)>> = BTreeMap::new();
        let mut north_of: BTreeMap<Key, Vec<(Key, Key, usize)>> = BTreeMap::new();
        for (i, r) in rects.iter().enumerate() {
            west_of.entry(r[1]).or_default().push((r[2], r[3], i));
            east_of.entry(r[0]).or_default().push((r[2], r[3], i));
            south_of.entry(r[3]).or_default().push((r[0], r[1], i));
            north_of.entry(r[2]).or_default().push((r[0], r[1], i));
        }
        pair_sides(&west_of, &east_of, &mut neighbours, EAST, WEST);
        pair_sides(&south_of, &north_of, &mut neighbours, NORTH, SOUTH);

        let nxk = mesh.x_knots.len() - 1;
        let nyk = mesh.y_knots.len() - 1;
        let mut buckets = vec![Vec::new(); nxk * nyk];
        for (i, r) in rects.iter().enumerate() {
            let sx = (r[0] >> FRAC_BITS) as usize;
            let sy = (r[2] >> FRAC_BITS) as usize;
            let ex = (((r[1] - 1) >> FRAC_BITS) as usize).min(nxk - 1);
            let ey = (((r[3] - 1) >> FRAC_BITS) as usize).min(nyk - 1);
            for bx in sx..=ex {
                for by in sy..=ey {
                    buckets[by * nxk + bx].push(i);
                }
            }
        }

        Ok(Topology {
            leaves,
            leaf_slot,
            rects,
            hlines,
            vlines,
            vertices,
            rows,
            neighbours,
            corner_leaves,
            domain,
            buckets,
            bucket_nx: nxk,
        })
    }

    /// Position of a cell id in [`Topology::leaves`], if it is a leaf.
    pub fn slot(&self, cell: CellId) -> Option<usize> {
        match self.leaf_slot.get(cell) {
            Some(&s) if s != NONE => Some(s),
            _ => None,
        }
    }

    pub fn vertex(&self, x: Key, y: Key) -> Option<&VertexInfo> {
        self.vertices.get(&(x, y))
    }

    /// Vertices strictly inside the horizontal span `(xa, xb)` on line `y`, ordered by x.
    pub fn row_vertices(&self, y: Key, xa: Key, xb: Key) -> Vec<Key> {
        if xb <= xa + 1 {
            return Vec::new();
        }
        self.rows.range((y, xa + 1)..(y, xb)).map(|&(_, x)| x).collect()
    }

    /// Vertices strictly inside the vertical span `(ya, yb)` on line `x`, ordered by y.
    pub fn col_vertices(&self, x: Key, ya: Key, yb: Key) -> Vec<Key> {
        if yb <= ya + 1 {
            return Vec::new();
        }
        self.vertices.range((x, ya + 1)..(x, yb)).map(|(&(_, y), _)| y).collect()
    }

    /// True when the leaf has no side on the domain boundary.
    pub fn is_interior(&self, slot: usize) -> bool {
        let r = &self.rects[slot];
        r[0] != self.domain[0] && r[1] != self.domain[1] && r[2] != self.domain[2] && r[3] != self.domain[3]
    }

    /// Corners of a leaf in the order SW, SE, NW, NE.
    pub fn corners(&self, slot: usize) -> [(Key, Key); 4] {
        let r = &self.rects[slot];
        [(r[0], r[2]), (r[1], r[2]), (r[0], r[3]), (r[1], r[3])]
    }

    /// Maximal horizontal segment on line `y` containing `[xa, xb]`.
    pub fn hsegment(&self, y: Key, xa: Key, xb: Key) -> Option<(Key, Key)> {
        segment_containing(self.hlines.get(&y)?, xa, xb)
    }

    /// Maximal vertical segment on line `x` containing `[ya, yb]`.
    pub fn vsegment(&self, x: Key, ya: Key, yb: Key) -> Option<(Key, Key)> {
        segment_containing(self.vlines.get(&x)?, ya, yb)
    }
}

fn merge_intervals(mut v: Vec<(Key, Key)>) -> Vec<(Key, Key)> {
    v.sort();
    let mut out: Vec<(Key, Key)> = Vec::with_capacity(v.len());
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn covers_after(segs: &[(Key, Key)], t: Key) -> bool {
    let i = segs.partition_point(|s| s.0 <= t);
    i > 0 && segs[i - 1].1 > t
}

fn covers_before(segs: &[(Key, Key)], t: Key) -> bool {
    let i = segs.partition_point(|s| s.0 < t);
    i > 0 && segs[i - 1].1 >= t
}

fn segment_containing(segs: &[(Key, Key)], a: Key, b: Key) -> Option<(Key, Key)> {
    let i = segs.partition_point(|s| s.0 <= a);
    if i == 0 {
        return None;
    }
    let s = segs[i - 1];
    (s.1 >= b).then_some(s)
}

fn pair_sides(
    lower: &BTreeMap<Key, Vec<(Key, Key, usize)>>,
    upper: &BTreeMap<Key, Vec<(Key, Key, usize)>>,
    out: &mut [[Vec<Adjacent>; 4]],
    lower_side: usize,
    upper_side: usize,
) {
    for (line, lows) in lower {
        let Some(ups) = upper.get(line) else { continue };
        let mut lows = lows.clone();
        let mut ups = ups.clone();
        lows.sort();
        ups.sort();
        let (mut i, mut j) = (0, 0);
        while i < lows.len() && j < ups.len() {
            let (a0, a1, ca) = lows[i];
            let (b0, b1, cb) = ups[j];
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo < hi {
                out[ca][lower_side].push(Adjacent { leaf: cb, lo, hi });
                out[cb][upper_side].push(Adjacent { leaf: ca, lo, hi });
            }
            if a1 <= b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
    }
}

/// Hierarchical T-mesh: a level-0 knot grid refined by a forest of 2×2 subdivisions.
///
/// Meshes are immutable values; every editing operation returns a new snapshot and
/// keeps the ids of all persisting cells.
#[derive(Clone, Debug)]
pub struct HierarchicalTMesh {
    x_knots: Vec<f64>,
    y_knots: Vec<f64>,
    cells: Vec<Cell>,
    /// Level-0 grid of the subdivision forest.
    roots: (usize, usize),
    domain: Rect,
    extension: Option<Extension>,
    simplified: bool,
    topo: OnceLock<Arc<Topology>>,
}

impl PartialEq for HierarchicalTMesh {
    fn eq(&self, other: &Self) -> bool {
        self.x_knots == other.x_knots
            && self.y_knots == other.y_knots
            && self.cells == other.cells
            && self.domain == other.domain
            && self.extension == other.extension
            && self.simplified == other.simplified
    }
}

fn check_knots(k: &[f64], name: &str) -> Result<()> {
    if k.len() < 2 {
        return Err(Error::InvalidInput(format!("{name} needs at least two knots")));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} contains a non-finite value")));
    }
    if k.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(format!("{name} must be strictly increasing")));
    }
    Ok(())
}

/// Tensor-product mesh with one level-0 cell per knot interval pair.
pub fn new_tensor_mesh(x_knots: &[f64], y_knots: &[f64]) -> Result<HierarchicalTMesh> {
    check_knots(x_knots, "x_knots")?;
    check_knots(y_knots, "y_knots")?;
    let nx = x_knots.len() - 1;
    let ny = y_knots.len() - 1;
    let mut cells = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            cells.push(Cell {
                rect: Rect {
                    x0: AxisCoord::knot(i as u32),
                    x1: AxisCoord::knot(i as u32 + 1),
                    y0: AxisCoord::knot(j as u32),
                    y1: AxisCoord::knot(j as u32 + 1),
                },
                level: 0,
                parent: None,
                children: None,
                active: true,
            });
        }
    }
    Ok(HierarchicalTMesh {
        x_knots: x_knots.to_vec(),
        y_knots: y_knots.to_vec(),
        cells,
        roots: (nx, ny),
        domain: Rect {
            x0: AxisCoord::knot(0),
            x1: AxisCoord::knot(nx as u32),
            y0: AxisCoord::knot(0),
            y1: AxisCoord::knot(ny as u32),
        },
        extension: None,
        simplified: false,
        topo: OnceLock::new(),
    })
}

/// Returns a snapshot in which leaf `cell` is split into four level+1 quadrants.
pub fn subdivide_cell(mesh: &HierarchicalTMesh, cell: CellId) -> Result<HierarchicalTMesh> {
    let mut out = mesh.clone();
    out.subdivide_in_place(cell)?;
    Ok(out)
}

impl HierarchicalTMesh {
    pub fn x_knots(&self) -> &[f64] {
        &self.x_knots
    }

    pub fn y_knots(&self) -> &[f64] {
        &self.y_knots
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, id: CellId) -> &Cell {
        &self.cells[id]
    }

    pub fn domain(&self) -> Rect {
        self.domain
    }

    pub fn extension(&self) -> Option<&Extension> {
        self.extension.as_ref()
    }

    pub fn is_simplified(&self) -> bool {
        self.simplified
    }

    /// True when every leaf comes from 2×2 subdivision of the level-0 grid.
    pub fn is_hierarchical(&self) -> bool {
        self.extension.is_none() && !self.simplified
    }

    /// Highest level among the leaves.
    pub fn max_level(&self) -> u32 {
        self.leaves().iter().map(|&c| self.cells[c].level).max().unwrap_or(0)
    }

    /// Cached combinatorial structure.
    pub fn topology(&self) -> Arc<Topology> {
        self.topo
            .get_or_init(|| Arc::new(Topology::build(self).expect("mesh topology is valid by construction")))
            .clone()
    }

    /// Builds the topology, reporting invalid configurations instead of panicking.
    pub fn try_topology(&self) -> Result<Arc<Topology>> {
        if let Some(t) = self.topo.get() {
            return Ok(t.clone());
        }
        let t = Arc::new(Topology::build(self)?);
        let _ = self.topo.set(t.clone());
        Ok(t)
    }

    pub fn leaves(&self) -> Vec<CellId> {
        (0..self.cells.len()).filter(|&i| self.cells[i].is_leaf()).collect()
    }

    pub fn x_real(&self, c: AxisCoord) -> f64 {
        c.real(&self.x_knots)
    }

    pub fn y_real(&self, c: AxisCoord) -> f64 {
        c.real(&self.y_knots)
    }

    pub fn x_key_real(&self, k: Key) -> f64 {
        AxisCoord::from_key(k).real(&self.x_knots)
    }

    pub fn y_key_real(&self, k: Key) -> f64 {
        AxisCoord::from_key(k).real(&self.y_knots)
    }

    pub fn real_rect(&self, r: &Rect) -> RealRect {
        RealRect::new(self.x_real(r.x0), self.x_real(r.x1), self.y_real(r.y0), self.y_real(r.y1))
    }

    pub fn real_rect_keys(&self, k: &[Key; 4]) -> RealRect {
        RealRect::new(self.x_key_real(k[0]), self.x_key_real(k[1]), self.y_key_real(k[2]), self.y_key_real(k[3]))
    }

    pub fn cell_rect(&self, id: CellId) -> RealRect {
        self.real_rect(&self.cells[id].rect)
    }

    pub fn real_point(&self, p: &Point2) -> (f64, f64) {
        (self.x_real(p.x), self.y_real(p.y))
    }

    /// Leaf cell containing the real point (closed cells; ties resolve to the first hit).
    pub fn locate(&self, x: f64, y: f64) -> Option<CellId> {
        let t = self.topology();
        let d = self.real_rect(&self.domain);
        if !d.contains(x, y) {
            return None;
        }
        let bx = knot_interval(&self.x_knots, x);
        let by = knot_interval(&self.y_knots, y);
        let bucket = &t.buckets[by * t.bucket_nx + bx];
        for &slot in bucket {
            let r = self.real_rect_keys(&t.rects[slot]);
            if r.contains(x, y) {
                return Some(t.leaves[slot]);
            }
        }
        // Rounding at a shared knot can place the point in a neighbouring bucket.
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (slot, k) in t.rects.iter().enumerate() {
            let r = self.real_rect_keys(k);
            let dx = (r.x0 - x).max(x - r.x1).max(0.0);
            let dy = (r.y0 - y).max(y - r.y1).max(0.0);
            let dd = dx.max(dy);
            if dd < best_d {
                best_d = dd;
                best = Some(t.leaves[slot]);
            }
        }
        best
    }

    fn subdivide_in_place(&mut self, cell: CellId) -> Result<()> {
        if !self.is_hierarchical() {
            return Err(Error::Precondition("only hierarchical meshes can be subdivided".into()));
        }
        let c = self.cells.get(cell).ok_or_else(|| Error::InvalidInput(format!("unknown cell {cell}")))?.clone();
        if !c.is_leaf() {
            return Err(Error::Precondition(format!("cell {cell} is not a leaf")));
        }
        if c.rect.x0.depth.max(c.rect.x1.depth).max(c.rect.y0.depth).max(c.rect.y1.depth) >= MAX_DEPTH {
            return Err(Error::Resource(format!("cell {cell} is at the maximal depth")));
        }
        let xm = AxisCoord::midpoint(c.rect.x0, c.rect.x1);
        let ym = AxisCoord::midpoint(c.rect.y0, c.rect.y1);
        let r = c.rect;
        let quads = [
            Rect { x0: r.x0, x1: xm, y0: r.y0, y1: ym },
            Rect { x0: xm, x1: r.x1, y0: r.y0, y1: ym },
            Rect { x0: r.x0, x1: xm, y0: ym, y1: r.y1 },
            Rect { x0: xm, x1: r.x1, y0: ym, y1: r.y1 },
        ];
        let base = self.cells.len();
        for q in quads {
            self.cells.push(Cell { rect: q, level: c.level + 1, parent: Some(cell), children: None, active: true });
        }
        self.cells[cell].children = Some([base, base + 1, base + 2, base + 3]);
        self.topo = OnceLock::new();
        Ok(())
    }

    /// Subdivides several leaves at once.
    pub fn subdivide_many(&self, cells: &[CellId]) -> Result<HierarchicalTMesh> {
        let mut out = self.clone();
        for &c in cells {
            out.subdivide_in_place(c)?;
        }
        Ok(out)
    }

    /// Level-0 ancestor and quadrant path of a tree cell.
    pub fn path(&self, id: CellId) -> Option<String> {
        let limit = self.extension.as_ref().map(|e| e.inner_cell_count).unwrap_or(self.cells.len());
        if id >= limit || !self.is_tree_cell(id) {
            return None;
        }
        let mut quads = Vec::new();
        let mut cur = id;
        while let Some(p) = self.cells[cur].parent {
            let ch = self.cells[p].children?;
            quads.push(ch.iter().position(|&c| c == cur)?);
            cur = p;
        }
        let (nx, _) = self.roots;
        let mut s = format!("L0:({},{})", cur % nx, cur / nx);
        for q in quads.iter().rev() {
            s.push_str(&format!("/q{q}"));
        }
        Some(s)
    }

    fn is_tree_cell(&self, id: CellId) -> bool {
        let mut cur = id;
        while let Some(p) = self.cells[cur].parent {
            cur = p;
        }
        cur < self.roots.0 * self.roots.1
    }

    /// Finds the tree cell addressed by a path string such as `L0:(1,2)/q0/q3`.
    pub fn cell_by_path(&self, path: &str) -> Result<CellId> {
        let (root, quads) = parse_path(path)?;
        let (nx, ny) = self.roots;
        if root.0 >= nx || root.1 >= ny {
            return Err(Error::InvalidInput(format!("root cell out of range in {path:?}")));
        }
        let mut cur = root.1 * nx + root.0;
        for q in quads {
            let ch = self.cells[cur]
                .children
                .ok_or_else(|| Error::InvalidInput(format!("path {path:?} descends into a leaf")))?;
            cur = ch[q];
        }
        Ok(cur)
    }

    /// Serializable description (hierarchical meshes only).
    pub fn to_json(&self) -> Result<MeshJson> {
        if !self.is_hierarchical() {
            return Err(Error::Unsupported("only unextended, unsimplified meshes have a subdivision-path form".into()));
        }
        let mut subdivisions: Vec<String> =
            (0..self.cells.len()).filter(|&i| self.cells[i].children.is_some()).filter_map(|i| self.path(i)).collect();
        subdivisions.sort();
        Ok(MeshJson { x_knots: self.x_knots.clone(), y_knots: self.y_knots.clone(), subdivisions })
    }

    pub fn from_json(j: &MeshJson) -> Result<HierarchicalTMesh> {
        let mut mesh = new_tensor_mesh(&j.x_knots, &j.y_knots)?;
        let mut paths = j.subdivisions.clone();
        paths.sort();
        paths.dedup();
        for p in &paths {
            let id = mesh.cell_by_path(p)?;
            mesh.subdivide_in_place(id)?;
        }
        Ok(mesh)
    }

    /// Leaf rectangles as plain records, usable for any mesh kind.
    pub fn leaf_records(&self) -> Vec<LeafRecord> {
        self.leaves()
            .into_iter()
            .map(|c| {
                let r = self.cell_rect(c);
                LeafRecord {
                    id: c,
                    x0: r.x0,
                    x1: r.x1,
                    y0: r.y0,
                    y1: r.y1,
                    level: self.cells[c].level,
                    path: self.path(c),
                }
            })
            .collect()
    }

    /// Classifies a grid point of the mesh.
    pub fn classify_vertex(&self, p: Point2) -> Result<VertexClass> {
        classify_vertex(self, p)
    }
}

fn knot_interval(knots: &[f64], v: f64) -> usize {
    let n = knots.len() - 1;
    let i = knots.partition_point(|&k| k <= v);
    i.saturating_sub(1).min(n - 1)
}

fn parse_path(path: &str) -> Result<((usize, usize), Vec<usize>)> {
    let bad = || Error::InvalidInput(format!("malformed cell path {path:?}"));
    let mut parts = path.split('/');
    let head = parts.next().ok_or_else(bad)?;
    let inner = head.strip_prefix("L0:(").and_then(|s| s.strip_suffix(')')).ok_or_else(bad)?;
    let (a, b) = inner.split_once(',').ok_or_else(bad)?;
    let i: usize = a.trim().parse().map_err(|_| bad())?;
    let j: usize = b.trim().parse().map_err(|_| bad())?;
    let mut quads = Vec::new();
    for q in parts {
        let d: usize = q.strip_prefix('q').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if d > 3 {
            return Err(bad());
        }
        quads.push(d);
    }
    Ok(((i, j), quads))
}

/// On-disk mesh format: level-0 knots plus sorted subdivision paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshJson {
    pub x_knots: Vec<f64>,
    pub y_knots: Vec<f64>,
    #[serde(default)]
    pub subdivisions: Vec<String>,
}

/// Flat description of one leaf cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafRecord {
    pub id: CellId,
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub level: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

pub(crate) fn fmt_point(p: &Point2) -> String {
    format!("({}, {})", p.x, p.y)
}

/// Class of a grid point, or an error when the point is not a vertex.
pub fn classify_vertex(mesh: &HierarchicalTMesh, p: Point2) -> Result<VertexClass> {
    let t = mesh.topology();
    t.vertex(p.x.key(), p.y.key())
        .map(|v| v.class)
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a vertex of the mesh", fmt_point(&p))))
}

/// All maximal segments of the mesh, horizontal ones first, each reported once.
pub fn l_edges(mesh: &HierarchicalTMesh) -> Vec<LEdge> {
    let t = mesh.topology();
    let d = t.domain;
    let mut out = Vec::new();
    for (&y, segs) in &t.hlines {
        for &(a, b) in segs {
            let inner = t.row_vertices(y, a, b);
            let boundary = y == d[2] || y == d[3];
            out.push(make_ledge(
                &t,
                Axis::Horizontal,
                (a, y),
                (b, y),
                inner.iter().map(|&x| (x, y)).collect(),
                boundary,
            ));
        }
    }
    for (&x, segs) in &t.vlines {
        for &(a, b) in segs {
            let inner = t.col_vertices(x, a, b);
            let boundary = x == d[0] || x == d[1];
            out.push(make_ledge(&t, Axis::Vertical, (x, a), (x, b), inner.iter().map(|&y| (x, y)).collect(), boundary));
        }
    }
    out
}

fn make_ledge(t: &Topology, axis: Axis, s: (Key, Key), e: (Key, Key), inner: Vec<(Key, Key)>, boundary: bool) -> LEdge {
    let class = |p: (Key, Key)| t.vertex(p.0, p.1).map(|v| v.class);
    let kind = if boundary {
        LEdgeKind::BoundaryLEdge
    } else if class(s) == Some(VertexClass::TJunction) && class(e) == Some(VertexClass::TJunction) {
        LEdgeKind::TLEdge
    } else {
        LEdgeKind::InteriorLEdge
    };
    let interior_crossing_count = inner.iter().filter(|&&p| class(p) == Some(VertexClass::CrossingVertex)).count();
    LEdge {
        axis,
        start: Point2::from_keys(s.0, s.1),
        end: Point2::from_keys(e.0, e.1),
        kind,
        interior_vertices: inner.into_iter().map(|p| Point2::from_keys(p.0, p.1)).collect(),
        interior_crossing_count,
    }
}

/// True when the vertex is a T-junction whose stem is perpendicular to `axis`.
fn passes_through(v: &VertexInfo, axis: Axis) -> bool {
    v.class == VertexClass::TJunction
        && match axis {
            Axis::Horizontal => v.arms[EAST] && v.arms[WEST],
            Axis::Vertical => v.arms[NORTH] && v.arms[SOUTH],
        }
}

/// All c-edges: segments between consecutive non-pass-through vertices with at least one
/// T-junction strictly inside.
pub fn c_edges(mesh: &HierarchicalTMesh) -> Vec<CEdge> {
    let t = mesh.topology();
    let d = t.domain;
    let mut out = Vec::new();
    let mut scan = |axis: Axis, pts: Vec<(Key, Key)>| {
        let mut start = 0;
        for i in 1..pts.len() {
            let v = t.vertex(pts[i].0, pts[i].1).expect("line vertex exists");
            if i + 1 < pts.len() && passes_through(v, axis) {
                continue;
            }
            if i > start + 1 {
                out.push(CEdge {
                    axis,
                    start: Point2::from_keys(pts[start].0, pts[start].1),
                    end: Point2::from_keys(pts[i].0, pts[i].1),
                    interior_vertices: pts[start + 1..i].iter().map(|p| Point2::from_keys(p.0, p.1)).collect(),
                });
            }
            start = i;
        }
    };
    for (&y, segs) in &t.hlines {
        if y == d[2] || y == d[3] {
            continue;
        }
        for &(a, b) in segs {
            let mut pts = vec![(a, y)];
            pts.extend(t.row_vertices(y, a, b).into_iter().map(|x| (x, y)));
            pts.push((b, y));
            scan(Axis::Horizontal, pts);
        }
    }
    for (&x, segs) in &t.vlines {
        if x == d[0] || x == d[1] {
            continue;
        }
        for &(a, b) in segs {
            let mut pts = vec![(x, a)];
            pts.extend(t.col_vertices(x, a, b).into_iter().map(|y| (x, y)));
            pts.push((x, b));
            scan(Axis::Vertical, pts);
        }
    }
    out
}

/// Extended mesh: `m` lines beyond the bottom and top boundaries, `n` beyond the left and
/// right boundaries, with every boundary vertex of the input connected to the outermost lines.
///
/// Collar spacing equals the width of the adjacent level-0 interval. Cells of the input keep
/// their ids; collar cells are appended after them.
pub fn extend_mesh(mesh: &HierarchicalTMesh, m: usize, n: usize) -> Result<HierarchicalTMesh> {
    if mesh.extension.is_some() {
        return Err(Error::Precondition("mesh is already extended".into()));
    }
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput("extension needs at least one line per side".into()));
    }
    let t = mesh.topology();
    let xk = &mesh.x_knots;
    let yk = &mesh.y_knots;
    let (nxo, nyo) = (xk.len() - 1, yk.len() - 1);
    let dxl = xk[1] - xk[0];
    let dxr = xk[nxo] - xk[nxo - 1];
    let dyb = yk[1] - yk[0];
    let dyt = yk[nyo] - yk[nyo - 1];
    let mut nxk: Vec<f64> = (0..n).rev().map(|i| xk[0] - (i + 1) as f64 * dxl).collect();
    nxk.extend_from_slice(xk);
    nxk.extend((1..=n).map(|i| xk[nxo] + i as f64 * dxr));
    let mut nyk: Vec<f64> = (0..m).rev().map(|i| yk[0] - (i + 1) as f64 * dyb).collect();
    nyk.extend_from_slice(yk);
    nyk.extend((1..=m).map(|i| yk[nyo] + i as f64 * dyt));

    let (sx, sy) = (n as i64, m as i64);
    let mut cells: Vec<Cell> = mesh.cells.iter().map(|c| Cell { rect: c.rect.shifted(sx, sy), ..c.clone() }).collect();
    let inner_cell_count = cells.len();
    let d = t.domain;

    // Boundary vertices and adjacent boundary-cell levels on each side of Ω.
    let mut left = BTreeMap::new();
    let mut right = BTreeMap::new();
    let mut bottom = BTreeMap::new();
    let mut top = BTreeMap::new();
    for (slot, r) in t.rects.iter().enumerate() {
        let lvl = mesh.cells[t.leaves[slot]].level;
        if r[0] == d[0] {
            left.insert(r[2], (r[3], lvl));
        }
        if r[1] == d[1] {
            right.insert(r[2], (r[3], lvl));
        }
        if r[2] == d[2] {
            bottom.insert(r[0], (r[1], lvl));
        }
        if r[3] == d[3] {
            top.insert(r[0], (r[1], lvl));
        }
    }
    let kx = |i: usize| AxisCoord::knot(i as u32);
    let shift_x = |k: Key| AxisCoord::from_key(k).shifted(sx);
    let shift_y = |k: Key| AxisCoord::from_key(k).shifted(sy);
    let mut push = |rect: Rect, level: u32| {
        cells.push(Cell { rect, level, parent: None, children: None, active: true });
    };
    let x_last = nxo + 2 * n;
    let y_last = nyo + 2 * m;
    for c in 0..n {
        for (&y0, &(y1, lvl)) in &left {
            push(Rect { x0: kx(c), x1: kx(c + 1), y0: shift_y(y0), y1: shift_y(y1) }, lvl);
        }
        for (&y0, &(y1, lvl)) in &right {
            push(Rect { x0: kx(nxo + n + c), x1: kx(nxo + n + c + 1), y0: shift_y(y0), y1: shift_y(y1) }, lvl);
        }
    }
    for r in 0..m {
        for (&x0, &(x1, lvl)) in &bottom {
            push(Rect { x0: shift_x(x0), x1: shift_x(x1), y0: kx(r), y1: kx(r + 1) }, lvl);
        }
        for (&x0, &(x1, lvl)) in &top {
            push(Rect { x0: shift_x(x0), x1: shift_x(x1), y0: kx(nyo + m + r), y1: kx(nyo + m + r + 1) }, lvl);
        }
    }
    for c in 0..n {
        for r in 0..m {
            for (cx, cy) in [(c, r), (nxo + n + c, r), (c, nyo + m + r), (nxo + n + c, nyo + m + r)] {
                push(Rect { x0: kx(cx), x1: kx(cx + 1), y0: kx(cy), y1: kx(cy + 1) }, 0);
            }
        }
    }
    let out = HierarchicalTMesh {
        x_knots: nxk,
        y_knots: nyk,
        cells,
        roots: mesh.roots,
        domain: Rect { x0: kx(0), x1: kx(x_last), y0: kx(0), y1: kx(y_last) },
        extension: Some(Extension {
            inner: mesh.domain.shifted(sx, sy),
            shift_x: n as u32,
            shift_y: m as u32,
            inner_cell_count,
        }),
        simplified: mesh.simplified,
        topo: OnceLock::new(),
    };
    out.try_topology()?;
    Ok(out)
}

/// Cells of an extended mesh that lie in the original domain, in original coordinates.
pub fn restrict_to_omega(ext: &HierarchicalTMesh) -> Result<HierarchicalTMesh> {
    let e = ext.extension.as_ref().ok_or_else(|| Error::Precondition("mesh is not an extended mesh".into()))?;
    let (sx, sy) = (e.shift_x as usize, e.shift_y as usize);
    let nx = ext.x_knots.len() - 1 - 2 * sx;
    let ny = ext.y_knots.len() - 1 - 2 * sy;
    let cells: Vec<Cell> = ext.cells[..e.inner_cell_count]
        .iter()
        .map(|c| Cell { rect: c.rect.shifted(-(sx as i64), -(sy as i64)), ..c.clone() })
        .collect();
    Ok(HierarchicalTMesh {
        x_knots: ext.x_knots[sx..=sx + nx].to_vec(),
        y_knots: ext.y_knots[sy..=sy + ny].to_vec(),
        cells,
        roots: ext.roots,
        domain: e.inner.shifted(-(sx as i64), -(sy as i64)),
        extension: None,
        simplified: ext.simplified,
        topo: OnceLock::new(),
    })
}

/// A T-l-edge is removable when it has at most one interior vertex and every interior
/// vertex is a crossing-vertex (no stem ends on it).
pub fn is_trivial_l_edge(mesh: &HierarchicalTMesh, e: &LEdge) -> bool {
    if e.kind != LEdgeKind::TLEdge || e.interior_crossing_count > 1 {
        return false;
    }
    let t = mesh.topology();
    e.interior_vertices
        .iter()
        .all(|p| t.vertex(p.x.key(), p.y.key()).map(|v| v.class) == Some(VertexClass::CrossingVertex))
}

/// Trivial l-edges removed in each pass of [`simplify_with_trace`].
pub type SimplifyTrace = Vec<Vec<LEdge>>;

/// Removes trivial T-l-edges until none remain.
pub fn simplify(mesh: &HierarchicalTMesh) -> HierarchicalTMesh {
    simplify_with_trace(mesh).0
}

/// [`simplify`], also returning the edges removed in each pass.
///
/// Each pass removes a maximal set of pairwise disjoint trivial edges, scanning
/// horizontal edges before vertical ones in coordinate order.
pub fn simplify_with_trace(mesh: &HierarchicalTMesh) -> (HierarchicalTMesh, SimplifyTrace) {
    let mut cur = mesh.clone();
    let mut trace = Vec::new();
    loop {
        let candidates: Vec<LEdge> = l_edges(&cur).into_iter().filter(|e| is_trivial_l_edge(&cur, e)).collect();
        let t = cur.topology();
        let mut chosen: Vec<LEdge> = Vec::new();
        let mut used = BTreeSet::new();
        for e in candidates {
            let touched: Vec<usize> = edge_sides(&t, &e).into_iter().flat_map(|(_, l, h)| [l, h]).collect();
            if chosen.iter().all(|c| !segments_meet(c, &e)) && touched.iter().all(|s| !used.contains(s)) {
                used.extend(touched);
                chosen.push(e);
            }
        }
        if chosen.is_empty() {
            break;
        }
        cur = remove_l_edges(&cur, &chosen).expect("trivial l-edges separate matching cell pairs");
        trace.push(chosen);
    }
    (cur, trace)
}

fn segments_meet(a: &LEdge, b: &LEdge) -> bool {
    let ra = Rect { x0: a.start.x, x1: a.end.x, y0: a.start.y, y1: a.end.y };
    let rb = Rect { x0: b.start.x, x1: b.end.x, y0: b.start.y, y1: b.end.y };
    ra.touches(&rb)
}

/// Leaf pairs `(start, low_slot, high_slot)` facing each other across an l-edge, ordered along it.
fn edge_sides(t: &Topology, e: &LEdge) -> Vec<(Key, usize, usize)> {
    let (line, a, b) = match e.axis {
        Axis::Horizontal => (e.start.y.key(), e.start.x.key(), e.end.x.key()),
        Axis::Vertical => (e.start.x.key(), e.start.y.key(), e.end.y.key()),
    };
    let mut low = BTreeMap::new();
    let mut high = BTreeMap::new();
    for (slot, r) in t.rects.iter().enumerate() {
        let (lo_side, hi_side, s0, s1) = match e.axis {
            Axis::Horizontal => (r[3], r[2], r[0], r[1]),
            Axis::Vertical => (r[1], r[0], r[2], r[3]),
        };
        if s0 < a || s1 > b {
            continue;
        }
        if lo_side == line {
            low.insert(s0, (s1, slot));
        }
        if hi_side == line {
            high.insert(s0, (s1, slot));
        }
    }
    low.iter()
        .filter_map(|(s0, (s1, sl))| match high.get(s0) {
            Some((h1, sh)) if h1 == s1 => Some((*s0, *sl, *sh)),
            _ => None,
        })
        .collect()
}

fn remove_l_edges(mesh: &HierarchicalTMesh, edges: &[LEdge]) -> Result<HierarchicalTMesh> {
    let t = mesh.topology();
    let mut out = mesh.clone();
    out.topo = OnceLock::new();
    out.simplified = true;
    for e in edges {
        let pairs = edge_sides(&t, e);
        if pairs.is_empty() {
            return Err(Error::Consistency("l-edge sides do not pair up".into()));
        }
        for (_, sl, sh) in pairs {
            let (cl, ch) = (t.leaves[sl], t.leaves[sh]);
            if !out.cells[cl].active || !out.cells[ch].active {
                return Err(Error::Consistency("cell merged twice in one pass".into()));
            }
            let rl = out.cells[cl].rect;
            let rh = out.cells[ch].rect;
            let rect = match e.axis {
                Axis::Horizontal => Rect { x0: rl.x0, x1: rl.x1, y0: rl.y0, y1: rh.y1 },
                Axis::Vertical => Rect { x0: rl.x0, x1: rh.x1, y0: rl.y0, y1: rl.y1 },
            };
            let level = out.cells[cl].level.min(out.cells[ch].level);
            out.cells[cl].active = false;
            out.cells[ch].active = false;
            out.cells.push(Cell { rect, level, parent: None, children: None, active: true });
        }
    }
    out.try_topology()?;
    Ok(out)
}
