//! Brute-force dimension oracle and random mesh generation.
//!
//! The oracle assembles the C¹ matching conditions of a piecewise biquadratic
//! function (nine B-ordinates per leaf) directly from polynomial identities and
//! computes the nullity of that system. Rank is computed exactly over prime
//! fields: every `f64` is a dyadic rational, so the constraint coefficients are
//! exact rationals whose images modulo a large prime preserve rank except for a
//! negligible set of primes. Two primes are used and the larger rank is kept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mesh::{new_tensor_mesh, HierarchicalTMesh, Key, Topology, EAST, NORTH};

/// Default cap on the number of leaf cells accepted by [`dim_bruteforce`].
pub const DEFAULT_MAX_LEAVES: usize = 2000;

/// Minimal field interface used to assemble constraint rows.
pub trait Field: Copy + PartialEq + std::fmt::Debug {
    fn zero() -> Self;
    fn one() -> Self;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn inv(self) -> Option<Self>;
    fn is_zero(self) -> bool;
    /// Exact image of a finite float.
    fn from_f64(v: f64) -> Self;
}

impl Field for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn sub(self, o: Self) -> Self {
        self - o
    }
    fn mul(self, o: Self) -> Self {
        self * o
    }
    fn inv(self) -> Option<Self> {
        (self != 0.0).then(|| 1.0 / self)
    }
    fn is_zero(self) -> bool {
        self == 0.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Integers modulo the prime `P` (< 2^63).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fp<const P: u64>(pub u64);

/// Mersenne prime 2^61 − 1.
pub type Fp61 = Fp<2305843009213693951>;
/// Largest prime below 2^62.
pub type Fp62 = Fp<4611686018427387847>;

impl<const P: u64> Fp<P> {
    fn pow(self, mut e: u64) -> Self {
        let mut base = self;
        let mut acc = Self(1);
        while e > 0 {
            if e & 1 == 1 {
                acc = acc.mul(base);
            }
            base = base.mul(base);
            e >>= 1;
        }
        acc
    }

    fn from_i128(v: i128) -> Self {
        Self(v.rem_euclid(P as i128) as u64)
    }
}

impl<const P: u64> Field for Fp<P> {
    fn zero() -> Self {
        Self(0)
    }
    fn one() -> Self {
        Self(1)
    }
    fn add(self, o: Self) -> Self {
        let s = self.0 + o.0;
        Self(if s >= P { s - P } else { s })
    }
    fn sub(self, o: Self) -> Self {
        Self(if self.0 >= o.0 { self.0 - o.0 } else { self.0 + P - o.0 })
    }
    fn mul(self, o: Self) -> Self {
        Self(((self.0 as u128 * o.0 as u128) % P as u128) as u64)
    }
    fn inv(self) -> Option<Self> {
        (self.0 != 0).then(|| self.pow(P - 2))
    }
    fn is_zero(self) -> bool {
        self.0 == 0
    }
    fn from_f64(v: f64) -> Self {
        assert!(v.is_finite(), "non-finite coefficient");
        if v == 0.0 {
            return Self(0);
        }
        let bits = v.to_bits();
        let sign: i128 = if bits >> 63 == 0 { 1 } else { -1 };
        let exp = ((bits >> 52) & 0x7ff) as i32;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
        let m = Self::from_i128(sign * mant as i128);
        let two = Self(2);
        if e >= 0 {
            m.mul(two.pow(e as u64))
        } else {
            m.mul(two.pow((-e) as u64).inv().expect("2 is invertible"))
        }
    }
}

/// Sparse row: `(unknown index, coefficient)` with distinct indices.
pub type SparseRow<F> = Vec<(usize, F)>;

/// Linear conditions on the nine B-ordinates of every leaf.
#[derive(Clone, Debug)]
pub struct ConstraintSystem<F: Field> {
    /// Leaf cell ids in column order; leaf `i` owns unknowns `9i..9i+9`, index `3j + k` for `b[j][k]`.
    pub cells: Vec<usize>,
    pub rows: Vec<SparseRow<F>>,
}

impl<F: Field> ConstraintSystem<F> {
    pub fn unknowns(&self) -> usize {
        9 * self.cells.len()
    }

    /// Column block of a leaf cell id.
    pub fn column_of(&self) -> HashMap<usize, usize> {
        self.cells.iter().enumerate().map(|(i, &c)| (c, 9 * i)).collect()
    }
}

impl ConstraintSystem<f64> {
    /// Largest absolute residual over rows scaled to unit max coefficient.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| {
                let scale = r.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max);
                if scale == 0.0 {
                    return 0.0;
                }
                (r.iter().map(|&(i, v)| v * x[i]).sum::<f64>() / scale).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Coefficients re-expressing a quadratic Bernstein polynomial on the parameter
/// interval `[0, 1]` over the sub-interval `[a, b]`: `new[i] = Σ_k m[i][k] old[k]`.
fn blossom_matrix<F: Field>(a: F, b: F) -> [[F; 3]; 3] {
    let one = F::one();
    let row = |s: F, t: F| {
        let (s1, t1) = (one.sub(s), one.sub(t));
        [s1.mul(t1), s1.mul(t).add(s.mul(t1)), s.mul(t)]
    };
    [row(a, a), row(a, b), row(b, b)]
}

/// Local parameter of `v` inside `[lo, hi]`.
fn local<F: Field>(v: F, lo: F, hi: F) -> F {
    v.sub(lo).mul(hi.sub(lo).inv().expect("non-degenerate interval"))
}

/// Assembles the C¹ (and optionally homogeneous boundary) conditions for the leaves of `mesh`.
pub fn assemble<F: Field>(mesh: &HierarchicalTMesh, hbc: bool) -> ConstraintSystem<F> {
    let t = mesh.topology();
    let mut order: Vec<usize> = (0..t.leaves.len()).collect();
    order.sort_by_key(|&s| (t.rects[s][2], t.rects[s][0]));
    let mut col = vec![0usize; t.leaves.len()];
    for (i, &s) in order.iter().enumerate() {
        col[s] = 9 * i;
    }
    let xr = |k: Key| F::from_f64(mesh.x_key_real(k));
    let yr = |k: Key| F::from_f64(mesh.y_key_real(k));
    let mut rows = Vec::new();
    for s in 0..t.leaves.len() {
        for adj in &t.neighbours[s][EAST] {
            push_pair(&t, &mut rows, &col, s, adj.leaf, adj.lo, adj.hi, true, &xr, &yr);
        }
        for adj in &t.neighbours[s][NORTH] {
            push_pair(&t, &mut rows, &col, s, adj.leaf, adj.lo, adj.hi, false, &xr, &yr);
        }
    }
    if hbc {
        let d = t.domain;
        for s in 0..t.leaves.len() {
            let r = t.rects[s];
            let mut zero = |j: usize, k: usize| rows.push(vec![(col[s] + 3 * j + k, F::one())]);
            for i in 0..3 {
                if r[0] == d[0] {
                    zero(0, i);
                    zero(1, i);
                }
                if r[1] == d[1] {
                    zero(2, i);
                    zero(1, i);
                }
                if r[2] == d[2] {
                    zero(i, 0);
                    zero(i, 1);
                }
                if r[3] == d[3] {
                    zero(i, 2);
                    zero(i, 1);
                }
            }
        }
    }
    ConstraintSystem { cells: order.iter().map(|&s| t.leaves[s]).collect(), rows }
}

/// Six rows tying cell `a` (west or south) to cell `b` across their shared piece `[lo, hi]`.
#[allow(clippy::too_many_arguments)]
fn push_pair<F: Field>(
    t: &Topology,
    rows: &mut Vec<SparseRow<F>>,
    col: &[usize],
    a: usize,
    b: usize,
    lo: Key,
    hi: Key,
    vertical_edge: bool,
    xr: &impl Fn(Key) -> F,
    yr: &impl Fn(Key) -> F,
) {
    let (ra, rb) = (t.rects[a], t.rects[b]);
    // Across-axis data: widths of the two cells; along-axis data: each cell's span.
    let (wa, wb, along_a, along_b, conv): (F, F, (Key, Key), (Key, Key), &dyn Fn(Key) -> F) = if vertical_edge {
        (xr(ra[1]).sub(xr(ra[0])), xr(rb[1]).sub(xr(rb[0])), (ra[2], ra[3]), (rb[2], rb[3]), yr)
    } else {
        (yr(ra[3]).sub(yr(ra[2])), yr(rb[3]).sub(yr(rb[2])), (ra[0], ra[1]), (rb[0], rb[1]), xr)
    };
    let (lo_f, hi_f) = (conv(lo), conv(hi));
    let ma =
        blossom_matrix(local(lo_f, conv(along_a.0), conv(along_a.1)), local(hi_f, conv(along_a.0), conv(along_a.1)));
    let mb =
        blossom_matrix(local(lo_f, conv(along_b.0), conv(along_b.1)), local(hi_f, conv(along_b.0), conv(along_b.1)));
    let one = F::one();
    let zero = F::zero();
    let ia = wa.inv().expect("cell width is positive");
    let ib = wb.inv().expect("cell width is positive");
    // Across-axis Bernstein weights: value and derivative at the far end of `a` and the near end of `b`.
    let val_a = [zero, zero, one];
    let der_a = [zero, zero.sub(ia), ia];
    let val_b = [one, zero, zero];
    let der_b = [zero.sub(ib), ib, zero];
    let idx = |base: usize, across: usize, along: usize| {
        if vertical_edge {
            base + 3 * across + along
        } else {
            base + 3 * along + across
        }
    };
    for (wa_row, wb_row) in [(val_a, val_b), (der_a, der_b)] {
        for i in 0..3 {
            let mut row: SparseRow<F> = Vec::with_capacity(18);
            for j in 0..3 {
                for k in 0..3 {
                    let ca = wa_row[j].mul(ma[i][k]);
                    if !ca.is_zero() {
                        row.push((idx(col[a], j, k), ca));
                    }
                    let cb = wb_row[j].mul(mb[i][k]);
                    if !cb.is_zero() {
                        row.push((idx(col[b], j, k), zero.sub(cb)));
                    }
                }
            }
            rows.push(row);
        }
    }
}

/// Rank of a sparse system over a prime field by online row reduction.
pub fn rank_mod<const P: u64>(rows: &[SparseRow<Fp<P>>]) -> usize {
    let mut pivots: HashMap<usize, Vec<(usize, Fp<P>)>> = HashMap::new();
    for r in rows {
        let mut row: Vec<(usize, Fp<P>)> = r.iter().copied().filter(|(_, v)| !v.is_zero()).collect();
        row.sort_by_key(|e| e.0);
        loop {
            let Some(&(lead, lv)) = row.first() else { break };
            match pivots.get(&lead) {
                None => {
                    let inv = lv.inv().expect("non-zero lead");
                    for e in row.iter_mut() {
                        e.1 = e.1.mul(inv);
                    }
                    pivots.insert(lead, row);
                    break;
                }
                Some(p) => row = axpy_sorted(&row, p, lv),
            }
        }
    }
    pivots.len()
}

/// `row - f * pivot` for sorted sparse rows whose leading entries cancel.
fn axpy_sorted<F: Field>(row: &[(usize, F)], pivot: &[(usize, F)], f: F) -> Vec<(usize, F)> {
    let mut out = Vec::with_capacity(row.len() + pivot.len());
    let (mut i, mut j) = (0, 0);
    while i < row.len() || j < pivot.len() {
        let take_row = j >= pivot.len() || (i < row.len() && row[i].0 < pivot[j].0);
        let take_piv = i >= row.len() || (j < pivot.len() && pivot[j].0 < row[i].0);
        if take_row {
            out.push(row[i]);
            i += 1;
        } else if take_piv {
            out.push((pivot[j].0, F::zero().sub(f.mul(pivot[j].1))));
            j += 1;
        } else {
            let v = row[i].1.sub(f.mul(pivot[j].1));
            if !v.is_zero() {
                out.push((row[i].0, v));
            }
            i += 1;
            j += 1;
        }
    }
    out
}

fn map_rows<const P: u64>(mesh: &HierarchicalTMesh, hbc: bool) -> (usize, usize) {
    let sys = assemble::<Fp<P>>(mesh, hbc);
    (sys.unknowns(), rank_mod(&sys.rows))
}

/// Dimension of the C¹ biquadratic space over the mesh, with homogeneous boundary
/// conditions when `hbc` is set, by exact rank of the constraint system.
pub fn dim_bruteforce(mesh: &HierarchicalTMesh, hbc: bool) -> Result<usize> {
    dim_bruteforce_with_limit(mesh, hbc, DEFAULT_MAX_LEAVES)
}

/// [`dim_bruteforce`] with an explicit leaf-count bound.
pub fn dim_bruteforce_with_limit(mesh: &HierarchicalTMesh, hbc: bool, max_leaves: usize) -> Result<usize> {
    let n = mesh.topology().leaves.len();
    if n > max_leaves {
        return Err(Error::Resource(format!("{n} leaf cells exceed the oracle bound of {max_leaves}")));
    }
    let ((u1, r1), (_, r2)) =
        rayon::join(|| map_rows::<2305843009213693951>(mesh, hbc), || map_rows::<4611686018427387847>(mesh, hbc));
    Ok(u1 - r1.max(r2))
}

/// Reproducible random hierarchical mesh.
///
/// The level-0 grid has between 1 and `level0_max` intervals per axis with integer
/// spacings in 1..=3; at each level every leaf is split with probability `split_prob`.
pub fn random_hierarchical_mesh(
    seed: u64,
    level0_max: usize,
    max_level: u32,
    split_prob: f64,
) -> Result<HierarchicalTMesh> {
    if level0_max == 0 {
        return Err(Error::InvalidInput("level0_max must be positive".into()));
    }
    if !(0.0..=1.0).contains(&split_prob) {
        return Err(Error::InvalidInput("split_prob must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let knots = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(1..=level0_max);
        let mut k = vec![0.0];
        for _ in 0..n {
            let step = rng.gen_range(1..=3) as f64;
            k.push(k.last().unwrap() + step);
        }
        k
    };
    let xk = knots(&mut rng);
    let yk = knots(&mut rng);
    let mut mesh = new_tensor_mesh(&xk, &yk)?;
    for level in 0..max_level {
        let picks: Vec<usize> = mesh
            .leaves()
            .into_iter()
            .filter(|&c| mesh.cell(c).level == level)
            .filter(|_| rng.gen_bool(split_prob))
            .collect();
        mesh = mesh.subdivide_many(&picks)?;
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::subdivide_cell;

    #[test]
    fn field_image_of_dyadics_is_exact() {
        let half = Fp61::from_f64(0.5);
        assert_eq!(half.mul(Fp61::from_f64(2.0)), Fp61::one());
        assert_eq!(Fp61::from_f64(-3.0).add(Fp61::from_f64(3.0)), Fp61::zero());
        assert_eq!(Fp62::from_f64(0.375).mul(Fp62::from_f64(8.0)), Fp62::from_f64(3.0));
    }

    #[test]
    fn tensor_dimensions() {
        for (cx, cy) in [(1, 1), (2, 3), (4, 2)] {
            let xk: Vec<f64> = (0..=cx).map(|i| i as f64).collect();
            let yk: Vec<f64> = (0..=cy).map(|i| (i * i) as f64 + i as f64).collect();
            let m = new_tensor_mesh(&xk, &yk).unwrap();
            assert_eq!(dim_bruteforce(&m, false).unwrap(), (cx + 2) * (cy + 2));
            let hbc = (cx as i64 - 2).max(0) * (cy as i64 - 2).max(0);
            assert_eq!(dim_bruteforce(&m, true).unwrap() as i64, hbc);
        }
    }

    #[test]
    fn single_refined_cell_space() {
        // One split cell of a 1x1 mesh: C1 biquadratics on a 2x2 grid, dimension 16.
        let m = subdivide_cell(&new_tensor_mesh(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0).unwrap();
        assert_eq!(dim_bruteforce(&m, false).unwrap(), 16);
        assert_eq!(dim_bruteforce(&m, true).unwrap(), 0);
    }

    #[test]
    fn size_bound_is_enforced() {
        let m = new_tensor_mesh(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(dim_bruteforce_with_limit(&m, true, 5), Err(Error::Resource(_))));
    }

    #[test]
    fn random_mesh_is_reproducible() {
        let a = random_hierarchical_mesh(7, 4, 3, 0.4).unwrap();
        let b = random_hierarchical_mesh(7, 4, 3, 0.4).unwrap();
        assert_eq!(a, b);
        let t = random_hierarchical_mesh(7, 4, 3, 0.0).unwrap();
        assert!(t.leaves().iter().all(|&c| t.cell(c).level == 0));
    }

    #[test]
    fn residual_of_a_global_quadratic_is_zero() {
        let m = random_hierarchical_mesh(3, 3, 2, 0.5).unwrap();
        let sys = assemble::<f64>(&m, false);
        let g = |x: f64, y: f64| 1.0 + 2.0 * x - y + 0.5 * x * y + x * x - 0.25 * y * y * x * x;
        let mut v = vec![0.0; sys.unknowns()];
        for (i, &c) in sys.cells.iter().enumerate() {
            let r = m.cell_rect(c);
            let grid = crate::bnet::BOrdGrid::from_function(r, g);
            for j in 0..3 {
                for k in 0..3 {
                    v[9 * i + 3 * j + k] = grid.b[j][k];
                }
            }
        }
        assert!(sys.residual(&v) < 1e-10, "residual {}", sys.residual(&v));
    }
}
