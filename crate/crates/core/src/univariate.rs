//! Quadratic C¹ splines over a knot vector: the one-dimensional counterpart of the
//! bivariate construction, used as a small independent check of its ingredients.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bnet::bernstein;
use crate::error::{Error, Result};

/// Strictly increasing knots `t_0 < … < t_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    knots: Vec<f64>,
}

impl KnotVector {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidInput("a knot vector needs at least two knots".into()));
        }
        if knots.iter().any(|t| !t.is_finite()) || knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!("knots {knots:?} are not strictly increasing")));
        }
        Ok(KnotVector { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of intervals `n`.
    pub fn intervals(&self) -> usize {
        self.knots.len() - 1
    }

    /// Interior knots `t_1 … t_{n-1}`.
    pub fn c_knots(&self) -> &[f64] {
        &self.knots[1..self.knots.len() - 1]
    }

    /// Two more knots at each end, spaced like the adjacent end interval.
    pub fn extend(&self) -> KnotVector {
        let k = &self.knots;
        let n = k.len();
        let (h0, h1) = (k[1] - k[0], k[n - 1] - k[n - 2]);
        let mut out = vec![k[0] - 2.0 * h0, k[0] - h0];
        out.extend_from_slice(k);
        out.extend([k[n - 1] + h1, k[n - 1] + 2.0 * h1]);
        KnotVector { knots: out }
    }

    /// Index of the interval containing `x`, clamped to the ends.
    pub fn interval_of(&self, x: f64) -> usize {
        let i = self.knots.partition_point(|&t| t <= x);
        i.clamp(1, self.knots.len() - 1) - 1
    }
}

/// Piecewise quadratic given by B-ordinates on consecutive intervals of a knot vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadSpline1D {
    pub knots: KnotVector,
    /// Index of the first interval carrying `ords[0]`.
    pub first: usize,
    /// B-ordinates `(b_0, b_1, b_2)` per interval; intervals outside the range are zero.
    pub ords: Vec<[f64; 3]>,
}

impl QuadSpline1D {
    /// B-ordinates on interval `i` (zero outside the stored range).
    pub fn interval(&self, i: usize) -> [f64; 3] {
        if i >= self.first && i < self.first + self.ords.len() {
            self.ords[i - self.first]
        } else {
            [0.0; 3]
        }
    }

    /// Support `[t_first, t_last]`.
    pub fn support(&self) -> (f64, f64) {
        let k = self.knots.knots();
        (k[self.first], k[self.first + self.ords.len()])
    }

    /// Value at `x`; zero outside the knot range.
    pub fn eval(&self, x: f64) -> f64 {
        let k = self.knots.knots();
        if x < k[0] || x > k[k.len() - 1] {
            return 0.0;
        }
        let i = self.knots.interval_of(x);
        let u = (x - k[i]) / (k[i + 1] - k[i]);
        let b = self.interval(i);
        let w = bernstein(u);
        b[0] * w[0] + b[1] * w[1] + b[2] * w[2]
    }

    /// Derivative at `x` from the interval `i`.
    pub fn derivative_on(&self, i: usize, x: f64) -> f64 {
        let k = self.knots.knots();
        let h = k[i + 1] - k[i];
        let u = (x - k[i]) / h;
        let b = self.interval(i);
        2.0 * ((b[1] - b[0]) * (1.0 - u) + (b[2] - b[1]) * u) / h
    }

    /// The same spline on `knots`, whose interval `i` is interval `i + offset` here, with
    /// zero intervals at either end dropped.
    pub fn restrict(&self, knots: &KnotVector, offset: usize) -> QuadSpline1D {
        let n = knots.intervals();
        let ords = (0..n).map(|i| self.interval(i + offset)).collect::<Vec<_>>();
        let first = ords.iter().position(|b| b.iter().any(|&v| v != 0.0)).unwrap_or(0);
        let last = ords.iter().rposition(|b| b.iter().any(|&v| v != 0.0)).map(|l| l + 1).unwrap_or(first);
        QuadSpline1D { knots: knots.clone(), first, ords: ords[first..last].to_vec() }
    }
}

/// B-ordinate at knot `t_i` that makes the two adjacent pieces C¹, given the centre
/// ordinates of the intervals on either side.
pub fn knot_ordinate(knots: &[f64], i: usize, left_centre: f64, right_centre: f64) -> f64 {
    let (a, b, c) = (knots[i - 1], knots[i], knots[i + 1]);
    left_centre + (right_centre - left_centre) * (b - a) / (c - a)
}

/// Spline of the space with vanishing value and derivative at both ends whose centre
/// ordinate on interval `i` is `weights[i - 1]` for the interior intervals.
fn spline_from_weights(knots: &KnotVector, weights: &[f64]) -> QuadSpline1D {
    let n = knots.intervals();
    let k = knots.knots();
    let centre = |i: usize| if i == 0 || i + 1 == n { 0.0 } else { weights[i - 1] };
    let mut ords = vec![[0.0; 3]; n];
    for (i, o) in ords.iter_mut().enumerate() {
        o[1] = centre(i);
        o[0] = if i == 0 { 0.0 } else { knot_ordinate(k, i, centre(i - 1), centre(i)) };
        o[2] = if i + 1 == n { 0.0 } else { knot_ordinate(k, i + 1, centre(i), centre(i + 1)) };
    }
    QuadSpline1D { knots: knots.clone(), first: 0, ords }
}

/// Basis of the space with vanishing value and derivative at both ends: one function per
/// interval between consecutive interior knots, with centre ordinate 1 on that interval.
pub fn hbc_basis(knots: &KnotVector) -> Vec<QuadSpline1D> {
    let n = knots.intervals();
    let dim = n.saturating_sub(2);
    (0..dim)
        .map(|g| {
            let mut w = vec![0.0; dim];
            w[g] = 1.0;
            let full = spline_from_weights(knots, &w);
            let first = g;
            QuadSpline1D { knots: knots.clone(), first, ords: full.ords[first..first + 3].to_vec() }
        })
        .collect()
}

/// Basis of all quadratic C¹ splines over `knots`: the boundary-constrained basis of the
/// extended knot vector restricted to `[t_0, t_n]`.
pub fn build_basis_1d(knots: &KnotVector) -> Vec<QuadSpline1D> {
    let ext = knots.extend();
    hbc_basis(&ext).into_iter().map(|f| f.restrict(knots, 2)).collect()
}

/// Basis over the extended knot vector before restriction.
pub fn build_extended_basis_1d(knots: &KnotVector) -> (KnotVector, Vec<QuadSpline1D>) {
    let ext = knots.extend();
    let b = hbc_basis(&ext);
    (ext, b)
}

/// Φ: centre ordinate of each interval between consecutive interior knots.
pub fn map_phi_1d(p: &QuadSpline1D) -> Vec<f64> {
    let n = p.knots.intervals();
    (1..n.saturating_sub(1)).map(|i| p.interval(i)[1]).collect()
}

/// Nullity of the C¹ constraint system over `knots`, optionally with vanishing value and
/// derivative at both ends, by SVD.
pub fn dim_bruteforce_1d(knots: &KnotVector, hbc: bool) -> usize {
    let n = knots.intervals();
    let k = knots.knots();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for i in 1..n {
        let (hl, hr) = (k[i] - k[i - 1], k[i + 1] - k[i]);
        let mut v = vec![0.0; 3 * n];
        v[3 * (i - 1) + 2] = 1.0;
        v[3 * i] = -1.0;
        rows.push(v);
        let mut d = vec![0.0; 3 * n];
        d[3 * (i - 1) + 1] = -1.0 / hl;
        d[3 * (i - 1) + 2] = 1.0 / hl;
        d[3 * i] = 1.0 / hr;
        d[3 * i + 1] = -1.0 / hr;
        rows.push(d);
    }
    if hbc {
        for idx in [0, 1, 3 * n - 2, 3 * n - 1] {
            let mut v = vec![0.0; 3 * n];
            v[idx] = 1.0;
            rows.push(v);
        }
    }
    if rows.is_empty() {
        return 3 * n;
    }
    let m = DMatrix::from_fn(rows.len(), 3 * n, |r, c| rows[r][c]);
    let sv = m.singular_values();
    let tol = 1e-10 * sv.max().max(f64::MIN_POSITIVE);
    3 * n - sv.iter().filter(|&&s| s > tol).count()
}

/// CSV with one row per interval of every basis function: `function,interval,b0,b1,b2`.
pub fn basis_csv(basis: &[QuadSpline1D]) -> String {
    let mut out = String::from("function,interval,b0,b1,b2\n");
    for (f, p) in basis.iter().enumerate() {
        for (j, b) in p.ords.iter().enumerate() {
            let _ = writeln!(out, "{f},{},{},{},{}", p.first + j, b[0], b[1], b[2]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_bump_on_uniform_knots() {
        let k = KnotVector::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = hbc_basis(&k);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].ords, vec![[0.0, 0.0, 0.5], [0.5, 1.0, 0.5], [0.5, 0.0, 0.0]]);
    }

    #[test]
    fn unit_bump_on_stretched_knots() {
        let k = KnotVector::new(vec![0.0, 1.0, 4.0, 5.0]).unwrap();
        let b = hbc_basis(&k);
        assert!((b[0].ords[0][2] - 0.25).abs() < 1e-15);
        assert!((b[0].ords[2][0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn dimension_matches_constraint_nullity() {
        for n in 1..8 {
            let k = KnotVector::new((0..=n).map(|i| (i * i) as f64 + i as f64).collect()).unwrap();
            assert_eq!(build_basis_1d(&k).len(), n + 2);
            assert_eq!(dim_bruteforce_1d(&k, false), n + 2);
            assert_eq!(dim_bruteforce_1d(&k, true), n.saturating_sub(2));
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let k = KnotVector::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let csv = basis_csv(&hbc_basis(&k));
        assert_eq!(csv.lines().count(), 4);
    }
}
