//! Basis functions of the spline space, the mapping Φ, and the open-mesh basis.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnet::{center_ordinate, check_c1, reexpress, PwcOnCvr, SplineFunction};
use crate::cvr::{build_cvr, BackLink, CellClass, CvrGraph};
use crate::error::{Error, Result};
use crate::mesh::{extend_mesh, CellId, HierarchicalTMesh, RealRect, Rect};
use crate::tstructure::{branch_bordinates, PropagationContext, PropagationState, TraceEvent};

/// Tolerance of the C¹ self-check applied to every constructed basis function.
pub const BUILD_C1_TOL: f64 = 1e-9;
/// Tolerance of the Φ round-trip self-check.
pub const BUILD_PHI_TOL: f64 = 1e-10;

/// Weight at the domain-centre of every g-cell domain, indexed by g-cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightField {
    pub values: Vec<f64>,
}

impl WeightField {
    pub fn zeros(n: usize) -> Self {
        WeightField { values: vec![0.0; n] }
    }
}

/// Weight 1 on the domain of `g_cell` and 0 on every other domain.
pub fn init_weights(cvr: &CvrGraph, g_cell: usize) -> Result<WeightField> {
    if g_cell >= cvr.g_cells.len() {
        return Err(Error::InvalidInput(format!("g-cell {g_cell} out of range 0..{}", cvr.g_cells.len())));
    }
    let mut w = WeightField::zeros(cvr.g_cells.len());
    w.values[g_cell] = 1.0;
    Ok(w)
}

/// Domains (g-cell indices) expected to cover the support of one basis function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainE {
    pub basis_cell: usize,
    /// The basis domain and every domain whose rectangle touches it.
    pub s1: Vec<usize>,
    /// Every domain whose rectangle touches a member of `s1`.
    pub s2: Vec<usize>,
    /// Sorted union of `s1` and `s2`.
    pub union: Vec<usize>,
}

fn ring(cvr: &CvrGraph, around: &[usize]) -> Vec<usize> {
    let rects: Vec<Rect> = around.iter().map(|&g| cvr.g_cells[g].rect).collect();
    (0..cvr.g_cells.len()).filter(|&i| rects.iter().any(|r| r.touches(&cvr.g_cells[i].rect))).collect()
}

/// Two rings of domains around the domain carrying weight 1.
pub fn support_domain(cvr: &CvrGraph, weights: &WeightField) -> DomainE {
    let seeds: Vec<usize> = (0..weights.values.len()).filter(|&g| weights.values[g] != 0.0).collect();
    let basis_cell = seeds.first().copied().unwrap_or(0);
    if seeds.is_empty() {
        return DomainE { basis_cell, s1: Vec::new(), s2: Vec::new(), union: Vec::new() };
    }
    let s1 = ring(cvr, &seeds);
    let s2 = ring(cvr, &s1);
    let union: BTreeSet<usize> = s1.iter().chain(s2.iter()).copied().collect();
    DomainE { basis_cell, s1, s2, union: union.into_iter().collect() }
}

/// Shared, immutable data for building every basis function of one mesh.
pub struct BasisContext {
    pub prop: PropagationContext,
    /// Leaf slots of each unit. Units `0..g` are the g-cell domains; the remaining units
    /// are boundary cells and whole T-connections without a g-cell.
    unit_slots: Vec<Vec<usize>>,
    /// Units whose rectangles touch.
    unit_adjacency: Vec<Vec<usize>>,
}

impl BasisContext {
    pub fn new(cvr: Arc<CvrGraph>) -> Result<Self> {
        let prop = PropagationContext::new(cvr.clone())?;
        let t = &prop.topo;
        let mut unit_slots = Vec::with_capacity(cvr.g_cells.len());
        let mut unit_rects: Vec<Vec<Rect>> = Vec::new();
        for g in &cvr.g_cells {
            unit_slots.push(match g.link {
                BackLink::PCell(c) => vec![t.slot(c).expect("P-cell is a leaf")],
                BackLink::TConnection(i) => {
                    cvr.t_connections[i].t_cells.iter().map(|&c| t.slot(c).expect("T-cell is a leaf")).collect()
                }
            });
            unit_rects.push(vec![g.rect]);
        }
        for (s, class) in prop.classes.iter().enumerate() {
            if *class == CellClass::BoundaryCell {
                unit_slots.push(vec![s]);
                unit_rects.push(vec![Rect::from_keys(t.rects[s])]);
            }
        }
        for tc in cvr.t_connections.iter().filter(|tc| tc.g_cell.is_none()) {
            let slots: Vec<usize> = tc.t_cells.iter().map(|&c| t.slot(c).expect("T-cell is a leaf")).collect();
            unit_rects.push(slots.iter().map(|&s| Rect::from_keys(t.rects[s])).collect());
            unit_slots.push(slots);
        }
        let n = unit_rects.len();
        let bounds: Vec<Rect> = unit_rects
            .iter()
            .map(|rs| {
                let mut b = rs[0].keys();
                for r in rs {
                    let k = r.keys();
                    b = [b[0].min(k[0]), b[1].max(k[1]), b[2].min(k[2]), b[3].max(k[3])];
                }
                Rect::from_keys(b)
            })
            .collect();
        let unit_adjacency: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .filter(|&j| {
                        j != i
                            && bounds[i].touches(&bounds[j])
                            && unit_rects[i].iter().any(|a| unit_rects[j].iter().any(|b| a.touches(b)))
                    })
                    .collect()
            })
            .collect();
        Ok(BasisContext { prop, unit_slots, unit_adjacency })
    }

    pub fn cvr(&self) -> &Arc<CvrGraph> {
        &self.prop.cvr
    }

    /// Leaf slots of every unit within `rings` adjacency steps of the domain of `g_cell`.
    pub fn region_around(&self, g_cell: usize, rings: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.unit_slots.len()];
        dist[g_cell] = 0;
        let mut frontier = vec![g_cell];
        let mut out: Vec<usize> = self.unit_slots[g_cell].clone();
        for d in 1..=rings {
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in &self.unit_adjacency[u] {
                    if dist[v] == usize::MAX {
                        dist[v] = d;
                        next.push(v);
                        out.extend_from_slice(&self.unit_slots[v]);
                    }
                }
            }
            frontier = next;
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Outcome of one basis-function build.
#[derive(Clone, Debug)]
pub struct BasisBuild {
    pub function: SplineFunction,
    pub domain: DomainE,
    /// Adjacency rings of the region that succeeded; `None` for the whole mesh.
    pub rings: Option<usize>,
    /// First self-check failure when the two-ring region did not contain the support.
    pub outside_e: Option<String>,
    pub trace: Vec<TraceEvent>,
}

fn run_build(
    ctx: &BasisContext,
    weights: &WeightField,
    region: &[usize],
    tcs: &[usize],
) -> Result<(SplineFunction, Vec<TraceEvent>)> {
    let mut state = PropagationState::new(&ctx.prop, weights, region)?;
    state.closure()?;
    let present: BTreeSet<usize> = region.iter().filter_map(|&s| ctx.prop.tc_of_slot[s]).collect();
    for &tc in tcs.iter().filter(|tc| present.contains(tc)) {
        branch_bordinates(&mut state, &ctx.prop.branches[tc], Some(tc))?;
    }
    state.closure()?;
    let trace = std::mem::take(&mut state.trace);
    Ok((state.into_spline()?, trace))
}

fn verify(ctx: &BasisContext, f: &SplineFunction, g_cell: usize) -> Result<()> {
    let report = check_c1(f, BUILD_C1_TOL);
    if !report.is_clean() {
        let v = &report.violations[0];
        return Err(Error::Consistency(format!(
            "C¹ defect {} between cell {} and {:?}",
            v.defect, v.cell, v.neighbour
        )));
    }
    let phi = map_phi(ctx.cvr(), f)?;
    for (g, value) in phi.values.iter() {
        let want = if *g == g_cell { 1.0 } else { 0.0 };
        if (value - want).abs() > BUILD_PHI_TOL {
            return Err(Error::Consistency(format!("Φ of basis {g_cell} is {value} on g-cell {g}")));
        }
    }
    Ok(())
}

/// All T-connections, lowest level first, ties by T-rectangle-domain position.
fn ordered_connections(ctx: &BasisContext) -> Vec<usize> {
    let cvr = ctx.cvr();
    let mut tcs: Vec<usize> = (0..cvr.t_connections.len()).collect();
    tcs.sort_by(|&a, &b| {
        let (ta, tb) = (&cvr.t_connections[a], &cvr.t_connections[b]);
        ta.level.cmp(&tb.level).then(ta.trd.keys().cmp(&tb.trd.keys()))
    });
    tcs
}

/// Adjacency rings tried before computing over the whole mesh.
pub const MAX_RINGS: usize = 6;

/// Basis function whose Φ-image is the indicator of `g_cell`.
///
/// Ordinates are first computed on the two rings of domains around the basis domain with
/// every other cell held at zero. When the result fails its C¹ or Φ self-check the region
/// grows by one ring, and finally to the whole mesh; each widening is reported.
pub fn build_basis_function(ctx: &BasisContext, g_cell: usize) -> Result<BasisBuild> {
    let weights = init_weights(ctx.cvr(), g_cell)?;
    let domain = support_domain(ctx.cvr(), &weights);
    let tcs = ordered_connections(ctx);
    let attempt = |region: &[usize]| {
        run_build(ctx, &weights, region, &tcs).and_then(|(f, trace)| verify(ctx, &f, g_cell).map(|_| (f, trace)))
    };
    let mut failure: Option<String> = None;
    for rings in 2..=MAX_RINGS {
        match attempt(&ctx.region_around(g_cell, rings)) {
            Ok((function, trace)) => {
                return Ok(BasisBuild { function, domain, rings: Some(rings), outside_e: failure, trace })
            }
            Err(e) if e.is_internal() => {
                failure.get_or_insert_with(|| e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    let all: Vec<usize> = (0..ctx.prop.topo.leaves.len()).collect();
    let (function, trace) = attempt(&all)?;
    Ok(BasisBuild { function, domain, rings: None, outside_e: failure, trace })
}

/// Φ: centre ordinates of P-cells and of one-neighbour cells re-expressed over each
/// T-rectangle-domain.
pub fn map_phi(cvr: &CvrGraph, f: &SplineFunction) -> Result<PwcOnCvr> {
    let mut out = PwcOnCvr::default();
    for (i, g) in cvr.g_cells.iter().enumerate() {
        let v = match g.link {
            BackLink::PCell(c) => center_ordinate(&f.grid(c)),
            BackLink::TConnection(t) => {
                let tc = &cvr.t_connections[t];
                let mut value: Option<f64> = None;
                for &c in &tc.one_neighbour_cells {
                    let v = center_ordinate(&reexpress(&f.grid(c), tc.trd_real)?);
                    if let Some(prev) = value {
                        let scale = prev.abs().max(v.abs()).max(1.0);
                        if (prev - v).abs() > 1e-9 * scale {
                            return Err(Error::NotInSpace(format!(
                                "one-neighbour cells of T-connection {t} disagree: {prev} vs {v}"
                            )));
                        }
                    }
                    value.get_or_insert(v);
                }
                value.unwrap_or(0.0)
            }
        };
        out.values.insert(i, v);
    }
    Ok(out)
}

/// Report of building every basis function of a mesh.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub functions: usize,
    /// Basis functions whose support left the two-ring region.
    pub widened: Vec<Widening>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Widening {
    pub g_cell: usize,
    /// Rings that sufficed; `None` when the whole mesh was needed.
    pub rings: Option<usize>,
    pub reason: String,
}

/// One basis function per g-cell of the CVR graph.
#[derive(Clone, Debug)]
pub struct BasisSet {
    pub cvr: Arc<CvrGraph>,
    pub functions: Vec<SplineFunction>,
    pub report: BuildReport,
}

impl BasisSet {
    pub fn mesh(&self) -> &Arc<HierarchicalTMesh> {
        &self.cvr.mesh
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }
}

/// Basis of the spline space with homogeneous boundary conditions over the simplified mesh.
pub fn build_basis_set(mesh: &HierarchicalTMesh) -> Result<BasisSet> {
    build_basis_set_for(Arc::new(build_cvr(mesh)?))
}

pub fn build_basis_set_for(cvr: Arc<CvrGraph>) -> Result<BasisSet> {
    let ctx = BasisContext::new(cvr.clone())?;
    let builds: Vec<BasisBuild> =
        (0..cvr.g_cells.len()).into_par_iter().map(|g| build_basis_function(&ctx, g)).collect::<Result<_>>()?;
    let mut report = BuildReport { functions: builds.len(), widened: Vec::new() };
    let mut functions = Vec::with_capacity(builds.len());
    for (g_cell, b) in builds.into_iter().enumerate() {
        if let Some(reason) = b.outside_e {
            report.widened.push(Widening { g_cell, rings: b.rings, reason });
        }
        functions.push(b.function);
    }
    Ok(BasisSet { cvr, functions, report })
}

/// Basis of the spline space without boundary conditions: the basis over the extended
/// mesh restricted to the cells inside the original domain.
#[derive(Clone, Debug)]
pub struct OpenBasis {
    /// The mesh over Ω the basis was requested for.
    pub mesh: Arc<HierarchicalTMesh>,
    pub omega: RealRect,
    /// Basis over the extended mesh; its functions are defined beyond Ω as well.
    pub extended: BasisSet,
    /// Each function restricted to the extended-mesh cells inside Ω.
    pub functions: Vec<SplineFunction>,
    /// Extended-mesh leaf inside Ω → indices of basis functions nonzero on it.
    cell_functions: HashMap<CellId, Vec<usize>>,
}

pub fn basis_for_open_mesh(mesh: &HierarchicalTMesh) -> Result<OpenBasis> {
    let ext = extend_mesh(mesh, 2, 2)?;
    let extended = build_basis_set(&ext)?;
    let omega = mesh.real_rect(&mesh.domain());
    let emesh = extended.mesh().clone();
    let inside = |c: CellId| {
        let r = emesh.cell_rect(c);
        r.x0 >= omega.x0 && r.x1 <= omega.x1 && r.y0 >= omega.y0 && r.y1 <= omega.y1
    };
    let mut cell_functions: HashMap<CellId, Vec<usize>> = HashMap::new();
    let mut functions = Vec::with_capacity(extended.len());
    for (i, f) in extended.functions.iter().enumerate() {
        let mut r = SplineFunction::zero(emesh.clone(), false);
        for (&c, g) in &f.support {
            if inside(c) {
                r.support.insert(c, *g);
                cell_functions.entry(c).or_default().push(i);
            }
        }
        functions.push(r);
    }
    Ok(OpenBasis { mesh: Arc::new(mesh.clone()), omega, extended, functions, cell_functions })
}

impl OpenBasis {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Nonzero basis values at a point, as `(index, value)` pairs.
    ///
    /// Points outside Ω take the polynomial pieces of the nearest cell inside Ω.
    pub fn eval_all(&self, x: f64, y: f64) -> Vec<(usize, f64)> {
        let o = &self.omega;
        let (dx, dy) = (1e-12 * o.width(), 1e-12 * o.height());
        let (cx, cy) = (x.clamp(o.x0 + dx, o.x1 - dx), y.clamp(o.y0 + dy, o.y1 - dy));
        let Some(c) = self.extended.mesh().locate(cx, cy) else { return Vec::new() };
        match self.cell_functions.get(&c) {
            Some(list) => list.iter().map(|&i| (i, self.extended.functions[i].support[&c].eval(x, y))).collect(),
            None => Vec::new(),
        }
    }

    pub fn eval(&self, i: usize, x: f64, y: f64) -> f64 {
        self.eval_all(x, y).into_iter().find(|v| v.0 == i).map_or(0.0, |v| v.1)
    }

    /// Domain-centres of the g-cells of the extended mesh, in basis order.
    pub fn domain_centres(&self) -> Vec<(f64, f64)> {
        self.extended.cvr.g_cells.iter().map(|g| g.domain_centre()).collect()
    }
}

/// Largest `|Σ b_j − 1|` over an `n×n` grid of points inside every leaf of Ω.
pub fn partition_of_unity_defect(basis: &OpenBasis, n: usize) -> f64 {
    let n = n.max(1);
    basis
        .mesh
        .leaves()
        .par_iter()
        .map(|&c| {
            let r = basis.mesh.cell_rect(c);
            let mut worst = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    let x = r.x0 + (i as f64 + 0.5) / n as f64 * r.width();
                    let y = r.y0 + (j as f64 + 0.5) / n as f64 * r.height();
                    let s: f64 = basis.eval_all(x, y).iter().map(|v| v.1).sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// Smallest singular value of the collocation matrix at the domain-centres, each row
/// scaled to unit maximum norm.
pub fn collocation_min_singular_value(basis: &OpenBasis) -> f64 {
    let centres = basis.domain_centres();
    let n = basis.len();
    let mut m = DMatrix::<f64>::zeros(centres.len(), n);
    for (r, &(x, y)) in centres.iter().enumerate() {
        let row = basis.eval_all(x, y);
        let scale = row.iter().fold(0.0f64, |a, v| a.max(v.1.abs()));
        if scale > 0.0 {
            for (j, v) in row {
                m[(r, j)] = v / scale;
            }
        }
    }
    if centres.len() != n {
        return 0.0;
    }
    m.singular_values().min()
}
