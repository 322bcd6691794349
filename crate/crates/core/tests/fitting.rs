use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmesh_core::basis::basis_for_open_mesh;
use tmesh_core::fitting::{
    cell_errors, collocate_and_solve, fit_adaptive, franke, mesh_overlay_obj, parametrize, sample_surface,
    solve_sparse, FitOptions, FunctionData, SurfaceData, TriMesh, TriangleData, DENSE_LIMIT,
};
use tmesh_core::mesh::new_tensor_mesh;
use tmesh_core::Error;

fn signed_area(uv: &[[f64; 2]], t: [usize; 3]) -> f64 {
    let (a, b, c) = (uv[t[0]], uv[t[1]], uv[t[2]]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn biquadratic(x: f64, y: f64) -> [f64; 3] {
    [x, y, 0.3 + x * y - 0.7 * x * x * y + 0.4 * y * y * x * x - 0.2 * y]
}

#[test]
fn planar_grid_is_its_own_parametrization() {
    let tri = TriMesh::sample_grid(6, 6, |x, y| [x, y, 0.0]).unwrap();
    let p = parametrize(&tri).unwrap();
    for (v, uv) in tri.vertices.iter().zip(&p.uv) {
        assert!((v[0] - uv[0]).abs() <= 1e-8 && (v[1] - uv[1]).abs() <= 1e-8, "{v:?} ↦ {uv:?}");
    }
}

#[test]
fn dome_parametrization_is_orientation_preserving() {
    let tri = TriMesh::sample_grid(12, 9, |x, y| {
        let (u, v) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        [u, v, (2.0 - u * u - v * v).sqrt()]
    })
    .unwrap();
    let p = parametrize(&tri).unwrap();
    assert!(p.uv.iter().all(|q| (0.0..=1.0).contains(&q[0]) && (0.0..=1.0).contains(&q[1])));
    assert!(tri.triangles.iter().all(|&t| signed_area(&p.uv, t) > 0.0));
}

#[test]
fn single_triangle() {
    let tri = TriMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 1.0]], vec![[0, 1, 2]]).unwrap();
    assert_eq!(tri.boundary.len(), 3);
    let p = parametrize(&tri).unwrap();
    assert!(signed_area(&p.uv, [0, 1, 2]) > 0.0);
}

#[test]
fn closed_and_multi_boundary_surfaces_are_unsupported() {
    let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let tet = TriMesh::new(v, vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]]);
    assert!(matches!(tet, Err(Error::Unsupported(_))));
    let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 0.0, 0.0], [6.0, 0.0, 0.0], [5.0, 1.0, 0.0]];
    let two = TriMesh::new(v, vec![[0, 1, 2], [3, 4, 5]]);
    assert!(matches!(two, Err(Error::Unsupported(_))));
}

#[test]
fn obj_parsing_fans_polygons_and_resolves_negative_indices() {
    let text = "# square\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nf 1/1 2 3 4\n";
    let tri = TriMesh::parse_obj(text).unwrap();
    assert_eq!(tri.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    let neg = TriMesh::parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4 -3 -2 -1\n").unwrap();
    assert_eq!(neg.triangles, tri.triangles);
    let back = TriMesh::parse_obj(&tri.to_obj()).unwrap();
    assert_eq!(back.vertices, tri.vertices);
    assert_eq!(back.triangles, tri.triangles);
    assert!(matches!(TriMesh::parse_obj("v 0 0\n"), Err(Error::InvalidInput(_))));
    assert!(matches!(TriMesh::parse_obj("v 0 0 0\nf 1 2 3\n"), Err(Error::InvalidInput(_))));
}

#[test]
fn obj_file_round_trip() {
    let tri = TriMesh::sample_grid(3, 2, |x, y| [x, y, x * y]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.obj");
    std::fs::write(&path, tri.to_obj()).unwrap();
    let back = TriMesh::load_obj(&path).unwrap();
    assert_eq!(back.triangles, tri.triangles);
    assert!(TriMesh::load_obj(&dir.path().join("missing.obj")).is_err());
}

fn tridiagonal(n: usize) -> Vec<(usize, usize, f64)> {
    let mut t = Vec::new();
    for i in 0..n {
        t.push((i, i, 4.0));
        if i > 0 {
            t.push((i, i - 1, -1.0));
        }
        if i + 1 < n {
            t.push((i, i + 1, -1.0));
        }
    }
    t
}

#[test]
fn sparse_solver_on_both_paths() {
    for n in [10, DENSE_LIMIT + 100] {
        let t = tridiagonal(n);
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = vec![0.0; n];
        for &(r, c, v) in &t {
            b[r] += v * x[c];
        }
        let sol = solve_sparse(n, &t, &[b]).unwrap();
        assert!(sol[0].iter().zip(&x).all(|(a, b)| (a - b).abs() <= 1e-10));
    }
}

#[test]
fn singular_systems_are_reported() {
    let t = vec![(0, 0, 1.0), (1, 0, 1.0)];
    assert!(matches!(solve_sparse(2, &t, &[vec![1.0, 2.0]]), Err(Error::Numeric(_))));
}

#[test]
fn constant_data_gives_constant_control_points() {
    let m = new_tensor_mesh(&[0.0, 0.5, 1.0], &[0.0, 0.3, 1.0]).unwrap();
    let basis = basis_for_open_mesh(&m).unwrap();
    let data = FunctionData::new(|_, _| [1.0, -2.0, 0.5], 8);
    let control = collocate_and_solve(&basis, &data).unwrap();
    for p in control {
        assert!((p[0] - 1.0).abs() <= 1e-10 && (p[1] + 2.0).abs() <= 1e-10 && (p[2] - 0.5).abs() <= 1e-10);
    }
}

#[test]
fn biquadratic_data_is_reproduced_in_one_iteration() {
    let data = FunctionData::new(biquadratic, 40);
    let model = fit_adaptive(&data, FitOptions::default()).unwrap();
    assert!(model.report.converged);
    assert_eq!(model.report.iterations.len(), 1);
    assert!(model.report.iterations[0].max_error <= 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (x, y) = (rng.gen::<f64>(), rng.gen::<f64>());
        let (s, f) = (model.surface.eval(x, y), biquadratic(x, y));
        assert!((0..3).all(|d| (s[d] - f[d]).abs() <= 1e-9), "({x}, {y})");
    }
    assert!(cell_errors(&model.mesh, &model.surface, &data).values().all(|&e| e <= 1e-9));
}

#[test]
fn triangulated_data_error_falls_with_refinement() {
    let tri = TriMesh::sample_grid(16, 16, biquadratic).unwrap();
    let param = parametrize(&tri).unwrap();
    let data = TriangleData::new(tri, param);
    assert_eq!(data.samples().len(), 17 * 17);
    let model = fit_adaptive(&data, FitOptions { tol: 1e-6, max_iter: 3, ..FitOptions::default() }).unwrap();
    let its = &model.report.iterations;
    assert_eq!(its.len(), 3);
    assert!(its.windows(2).all(|w| w[1].max_error < w[0].max_error && w[1].dim > w[0].dim));
    assert!(!model.report.converged);
    assert!(!model.report.warnings.is_empty());
}

#[test]
fn franke_fit_reports_every_iteration() {
    let data = FunctionData::new(|x, y| [x, y, franke(x, y)], 40);
    let opts = FitOptions { tol: 1e-2, max_iter: 8, level0: (4, 4) };
    let model = fit_adaptive(&data, opts).unwrap();
    let its = &model.report.iterations;
    assert!(!its.is_empty() && its.len() <= 8);
    for (k, it) in its.iter().enumerate() {
        assert_eq!(it.n, k + 1);
        assert!(it.dim > 0 && it.seconds >= 0.0 && it.leaves > 0);
    }
    assert!(its.windows(2).all(|w| w[1].dim >= w[0].dim));
    assert_eq!(model.report.converged, its.last().unwrap().max_error <= opts.tol);
    for w in its.windows(2) {
        if w[1].max_error >= w[0].max_error {
            let tag = format!("at iteration {}:", w[1].n);
            assert!(model.report.warnings.iter().any(|m| m.contains(&tag)), "unwarned stall {tag}");
        }
    }
    let json = serde_json::to_value(&model.report).unwrap();
    assert!(json["iterations"][0]["max_error"].is_number());
}

#[test]
fn invalid_tolerance_is_rejected() {
    let data = FunctionData::new(biquadratic, 4);
    let r = fit_adaptive(&data, FitOptions { tol: 0.0, ..FitOptions::default() });
    assert!(matches!(r, Err(Error::InvalidInput(_))));
}

#[test]
fn sampled_surface_and_overlay() {
    let data = FunctionData::new(|x, y| [x, y, 2.0], 10);
    let model = fit_adaptive(&data, FitOptions::default()).unwrap();
    let s = sample_surface(&model, 12).unwrap();
    assert_eq!(s.vertices.len(), 144);
    assert!(s.vertices.iter().all(|v| (v[2] - 2.0).abs() <= 1e-10));
    let overlay = mesh_overlay_obj(&model.mesh, 0.0);
    assert_eq!(overlay.lines().filter(|l| l.starts_with("v ")).count(), 4 * model.mesh.leaves().len());
}
