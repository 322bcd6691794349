mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tmesh_core::basis::{
    basis_for_open_mesh, build_basis_set_for, collocation_min_singular_value, map_phi, partition_of_unity_defect,
};
use tmesh_core::bnet::check_c1;
use tmesh_core::cvr::{build_cvr, dim_space};
use tmesh_core::fitting::{fit_adaptive, franke, FitOptions, FunctionData};
use tmesh_core::mesh::{simplify, simplify_with_trace, Axis, HierarchicalTMesh};
use tmesh_core::oracle::{assemble, dim_bruteforce, random_hierarchical_mesh};
use tmesh_core::univariate::{build_basis_1d, dim_bruteforce_1d, hbc_basis, KnotVector};

const SWEEP_SEEDS: u64 = 100;
const SWEEP_LEVEL0_MAX: usize = 5;
const SWEEP_MAX_LEVEL: u32 = 3;
const SWEEP_SPLIT_PROB: f64 = 0.4;
const DIM_SWEEP_SECONDS: f64 = 120.0;

const BASIS_MESHES: u64 = 20;
const C1_TOL: f64 = 1e-9;
const NULLSPACE_TOL: f64 = 1e-9;
const PHI_TOL: f64 = 1e-10;

const POU_TOL: f64 = 1e-9;
const POU_POINTS: usize = 10;
const MIN_SINGULAR_VALUE: f64 = 1e-10;

const TENSOR_TOL: f64 = 1e-10;

const POU_1D_TOL: f64 = 1e-12;
const ORDINATE_1D_TOL: f64 = 1e-15;

const BIQUADRATIC_TOL: f64 = 1e-9;
const FRANKE_TOL: f64 = 1e-3;
const FRANKE_SAMPLES: usize = 100;
const FRANKE_MAX_ITER: usize = 8;
const FRANKE_SECONDS: f64 = 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn sweep_mesh(seed: u64) -> HierarchicalTMesh {
    random_hierarchical_mesh(seed, SWEEP_LEVEL0_MAX, SWEEP_MAX_LEVEL, SWEEP_SPLIT_PROB).expect("random mesh")
}

fn dimension_equality() -> Outcome {
    let start = Instant::now();
    let mismatches: Vec<String> = (0..SWEEP_SEEDS)
        .into_par_iter()
        .flat_map_iter(|seed| {
            let m = sweep_mesh(seed);
            [true, false].into_iter().filter_map(move |hbc| {
                let (d, o) = (dim_space(&m, hbc).ok(), dim_bruteforce(&m, hbc).ok());
                (d.is_none() || d != o).then(|| format!("seed {seed} hbc {hbc}: {d:?} vs {o:?}"))
            })
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches.is_empty() && secs < DIM_SWEEP_SECONDS,
        format!(
            "{} meshes x 2 flags, {} mismatches, {secs:.1} s (limit {DIM_SWEEP_SECONDS} s) {mismatches:?}",
            SWEEP_SEEDS,
            mismatches.len()
        ),
    )
}

fn simplification_safety() -> Outcome {
    let bad: Vec<u64> = (0..SWEEP_SEEDS)
        .into_par_iter()
        .filter(|&seed| {
            let m = sweep_mesh(seed);
            let s = simplify(&m);
            [true, false].iter().any(|&hbc| dim_bruteforce(&s, hbc).ok() != dim_bruteforce(&m, hbc).ok())
        })
        .collect();
    let m = fig15();
    let (s, trace) = simplify_with_trace(&m);
    let passes: Vec<Vec<[f64; 4]>> = trace
        .iter()
        .map(|pass| {
            let mut v: Vec<[f64; 4]> = pass.iter().map(|e| seg(&m, &e.start, &e.end)).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        })
        .collect();
    let want = vec![vec![[1.5, 2.0, 1.5, 3.0], [2.5, 2.0, 2.5, 3.0]], vec![[1.0, 2.5, 3.0, 2.5]]];
    let axes_ok = trace.len() == 2
        && trace[0].iter().all(|e| e.axis == Axis::Vertical)
        && trace[1].iter().all(|e| e.axis == Axis::Horizontal);
    let seq_ok = passes == want && axes_ok && simplify_with_trace(&s).1.is_empty();
    outcome(
        bad.is_empty() && seq_ok,
        format!(
            "{} meshes, dimension changed on {bad:?}; example sequence {}",
            SWEEP_SEEDS,
            if seq_ok { "reproduced" } else { "differs" }
        ),
    )
}

struct BasisStats {
    functions: usize,
    c1: f64,
    outside: usize,
    residual: f64,
    phi: f64,
    errors: Vec<String>,
}

fn basis_stats(seed: u64) -> BasisStats {
    let m = sweep_mesh(seed);
    let mut st = BasisStats { functions: 0, c1: 0.0, outside: 0, residual: 0.0, phi: 0.0, errors: Vec::new() };
    let cvr = match build_cvr(&m) {
        Ok(c) => Arc::new(c),
        Err(e) => {
            st.errors.push(format!("seed {seed}: {e}"));
            return st;
        }
    };
    let set = match build_basis_set_for(cvr.clone()) {
        Ok(s) => s,
        Err(e) => {
            st.errors.push(format!("seed {seed}: {e}"));
            return st;
        }
    };
    if Ok(set.len()) != dim_bruteforce(&m, true) {
        st.errors.push(format!("seed {seed}: {} functions, oracle disagrees", set.len()));
    }
    let sys = assemble::<f64>(&cvr.mesh, true);
    let leaves = cvr.mesh.leaves();
    for (g, f) in set.functions.iter().enumerate() {
        st.functions += 1;
        st.c1 = st.c1.max(check_c1(f, C1_TOL).max_defect);
        st.outside += leaves
            .iter()
            .filter(|c| !f.support.contains_key(c))
            .filter(|&&c| {
                let r = cvr.mesh.cell_rect(c);
                samples([r.x0, r.x1, r.y0, r.y1]).any(|(x, y)| f.eval(x, y) != 0.0)
            })
            .count();
        st.residual = st.residual.max(sys.residual(&f.flatten(&sys.cells)));
        match map_phi(&cvr, f) {
            Ok(phi) => {
                for k in 0..cvr.g_cells.len() {
                    let want = if k == g { 1.0 } else { 0.0 };
                    st.phi = st.phi.max((phi.get(k) - want).abs());
                }
            }
            Err(e) => st.errors.push(format!("seed {seed} g-cell {g}: {e}")),
        }
    }
    st
}

fn basis_correctness() -> Outcome {
    let all: Vec<BasisStats> = (0..BASIS_MESHES).into_par_iter().map(basis_stats).collect();
    let n: usize = all.iter().map(|s| s.functions).sum();
    let c1 = all.iter().map(|s| s.c1).fold(0.0, f64::max);
    let outside: usize = all.iter().map(|s| s.outside).sum();
    let residual = all.iter().map(|s| s.residual).fold(0.0, f64::max);
    let phi = all.iter().map(|s| s.phi).fold(0.0, f64::max);
    let errors: Vec<&String> = all.iter().flat_map(|s| &s.errors).collect();
    outcome(
        errors.is_empty() && c1 <= C1_TOL && outside == 0 && residual <= NULLSPACE_TOL && phi <= PHI_TOL,
        format!(
            "{BASIS_MESHES} meshes, {n} functions: C1 defect {c1:.1e} (tol {C1_TOL:.0e}), nonzero off support {outside}, \
             constraint residual {residual:.1e} (tol {NULLSPACE_TOL:.0e}), indicator error {phi:.1e} (tol {PHI_TOL:.0e}) {errors:?}"
        ),
    )
}

fn partition_and_independence() -> Outcome {
    let rows: Vec<Result<(f64, f64), String>> = (0..BASIS_MESHES)
        .into_par_iter()
        .map(|seed| {
            let m = sweep_mesh(seed);
            let b = basis_for_open_mesh(&m).map_err(|e| format!("seed {seed}: {e}"))?;
            if Ok(b.len()) != dim_bruteforce(&m, false) {
                return Err(format!("seed {seed}: {} functions, oracle disagrees", b.len()));
            }
            Ok((partition_of_unity_defect(&b, POU_POINTS), collocation_min_singular_value(&b)))
        })
        .collect();
    let errors: Vec<&String> = rows.iter().filter_map(|r| r.as_ref().err()).collect();
    let ok: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    let pou = ok.iter().map(|r| r.0).fold(0.0, f64::max);
    let sv = ok.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    outcome(
        errors.is_empty() && pou <= POU_TOL && sv > MIN_SINGULAR_VALUE,
        format!(
            "{BASIS_MESHES} meshes: partition of unity defect {pou:.1e} (tol {POU_TOL:.0e}, {POU_POINTS}x{POU_POINTS} points per cell), \
             min singular value {sv:.3e} (> {MIN_SINGULAR_VALUE:.0e}) {errors:?}"
        ),
    )
}

fn tensor_reduction() -> Outcome {
    let mut worst = 0.0f64;
    let mut dims_ok = true;
    for (cx, cy) in [(1, 1), (2, 3), (4, 4), (6, 3)] {
        let m = new_nonuniform(cx, cy);
        let basis = match basis_for_open_mesh(&m) {
            Ok(b) => b,
            Err(e) => return outcome(false, format!("{cx}x{cy}: {e}")),
        };
        let want = (cx + 2) * (cy + 2);
        dims_ok &= basis.len() == want
            && dim_space(&m, false).ok() == Some(want)
            && dim_bruteforce(&m, false).ok() == Some(want);
        let em = basis.extended.mesh().clone();
        let (xk, yk) = (em.x_knots().to_vec(), em.y_knots().to_vec());
        for i in 0..basis.len() {
            let r = basis.extended.cvr.g_cells[i].real;
            let b = classical(&xk, &yk, [r.x0, r.x1, r.y0, r.y1]);
            for cell in rects_of(&m) {
                for (x, y) in samples(cell) {
                    worst = worst.max((basis.eval(i, x, y) - b(x, y)).abs());
                }
            }
        }
    }
    outcome(
        worst <= TENSOR_TOL && dims_ok,
        format!("max deviation from tensor B-splines {worst:.1e} (tol {TENSOR_TOL:.0e}, 25 points per cell), dimensions (cx+2)(cy+2): {dims_ok}"),
    )
}

fn univariate_mirror() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ordinate = 0.0f64;
    let mut pou = 0.0f64;
    let mut dims_ok = true;
    for _ in 0..200 {
        let n = rng.gen_range(1..15);
        let mut k = vec![rng.gen_range(-5.0..5.0)];
        for _ in 0..n {
            let last = *k.last().unwrap();
            k.push(last + rng.gen_range(0.05..3.0));
        }
        let kv = KnotVector::new(k.clone()).unwrap();
        if n >= 3 {
            let b = &hbc_basis(&kv)[0];
            ordinate = ordinate.max((b.interval(0)[2] - (k[1] - k[0]) / (k[2] - k[0])).abs());
        }
        let basis = build_basis_1d(&kv);
        dims_ok &= basis.len() == n + 2 && dim_bruteforce_1d(&kv, false) == n + 2;
        for i in 0..=200 {
            let x = (k[0] + (k[n] - k[0]) * i as f64 / 200.0).min(k[n]);
            let s: f64 = basis.iter().map(|p| p.eval(x)).sum();
            pou = pou.max((s - 1.0).abs());
        }
    }
    outcome(
        ordinate <= ORDINATE_1D_TOL && pou <= POU_1D_TOL && dims_ok,
        format!(
            "200 knot vectors: first knot ordinate error {ordinate:.1e} (tol {ORDINATE_1D_TOL:.0e}), \
             partition of unity defect {pou:.1e} (tol {POU_1D_TOL:.0e}), dim n+2 vs oracle: {dims_ok}"
        ),
    )
}

fn fitting() -> Outcome {
    let bq =
        FunctionData::new(|x, y| [x, y, 0.3 + x * y - 0.7 * x * x * y + 0.4 * x * x * y * y - 0.2 * y], FRANKE_SAMPLES);
    let bq_model = match fit_adaptive(&bq, FitOptions::default()) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("biquadratic: {e}")),
    };
    let bq_its = bq_model.report.iterations.len();
    let bq_err = bq_model.report.iterations.last().map_or(f64::INFINITY, |i| i.max_error);

    let data = FunctionData::new(|x, y| [x, y, franke(x, y)], FRANKE_SAMPLES);
    let start = Instant::now();
    let opts = FitOptions { tol: FRANKE_TOL, max_iter: FRANKE_MAX_ITER, level0: (4, 4) };
    let model = match fit_adaptive(&data, opts) {
        Ok(m) => m,
        Err(e) => return outcome(false, format!("Franke: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let its = &model.report.iterations;
    let err = its.last().map_or(f64::INFINITY, |i| i.max_error);
    let row = serde_json::to_value(&its[0]).unwrap();
    let schema = ["n", "dim", "max_error", "seconds"].iter().all(|k| row.get(*k).is_some_and(|v| v.is_number()));
    let table: Vec<String> =
        its.iter().map(|i| format!("({}, {}, {:.2e}, {:.2}s)", i.n, i.dim, i.max_error, i.seconds)).collect();
    outcome(
        bq_its == 1 && bq_err <= BIQUADRATIC_TOL && err <= FRANKE_TOL && its.len() <= FRANKE_MAX_ITER && secs < FRANKE_SECONDS && schema,
        format!(
            "biquadratic: {bq_its} iteration(s), error {bq_err:.1e} (tol {BIQUADRATIC_TOL:.0e}); \
             Franke {FRANKE_SAMPLES}x{FRANKE_SAMPLES}: {} iterations, error {err:.3e} (tol {FRANKE_TOL:.0e}), {secs:.1} s \
             (limit {FRANKE_SECONDS} s); report columns n/dim/max_error/seconds: {schema}; {}",
            its.len(),
            table.join(" ")
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("1 dimension equality", dimension_equality),
        ("2 simplification safety", simplification_safety),
        ("3 basis correctness", basis_correctness),
        ("4 partition of unity and independence", partition_and_independence),
        ("5 tensor-product reduction", tensor_reduction),
        ("6 univariate mirror", univariate_mirror),
        ("7 fitting", fitting),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
