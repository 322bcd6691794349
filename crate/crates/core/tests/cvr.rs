mod common;

use common::*;
use proptest::prelude::*;
use tmesh_core::basis::init_weights;
use tmesh_core::cvr::{
    build_cvr, build_cvr_with, classify_cells, dim_space, t_connections, BackLink, CellClass, CvrOptions, GCellKind,
};
use tmesh_core::mesh::new_tensor_mesh;
use tmesh_core::oracle::{dim_bruteforce, random_hierarchical_mesh};
use tmesh_core::Error;

fn raw(m: &tmesh_core::mesh::HierarchicalTMesh) -> tmesh_core::cvr::CvrGraph {
    build_cvr_with(m, CvrOptions { simplify: false }).unwrap()
}

#[test]
fn correspondence_example_cell_classes() {
    let m = fig5();
    let t = m.topology();
    let classes = classify_cells(&t);
    let class = |r| classes[t.slot(leaf_with(&m, r)).unwrap()];
    assert_eq!(class([1.5, 2.0, 2.0, 2.5]), CellClass::PCell);
    assert_eq!(class([2.0, 3.0, 1.0, 2.0]), CellClass::PCell);
    for r in [[1.0, 1.5, 2.0, 2.5], [1.0, 1.5, 2.5, 3.0], [1.5, 2.0, 2.5, 3.0]] {
        assert_eq!(class(r), CellClass::TCell);
    }
    assert_eq!(class([0.0, 1.0, 2.0, 3.0]), CellClass::BoundaryCell);
}

#[test]
fn correspondence_example_t_connection() {
    let m = fig5();
    let tcs = t_connections(&m);
    let mut want = vec![
        leaf_with(&m, [1.0, 1.5, 2.0, 2.5]),
        leaf_with(&m, [1.0, 1.5, 2.5, 3.0]),
        leaf_with(&m, [1.5, 2.0, 2.5, 3.0]),
    ];
    want.sort_unstable();
    let tc = tcs
        .iter()
        .find(|tc| {
            let mut c = tc.t_cells.clone();
            c.sort_unstable();
            c == want
        })
        .expect("three-cell T-connection");
    let r = tc.trd_real;
    assert_eq!([r.x0, r.x1, r.y0, r.y1], [1.0, 2.0, 2.0, 3.0]);
    assert_eq!(tc.domain_centre, (1.5, 2.5));
    assert!(tc.one_neighbour_cells.contains(&leaf_with(&m, [0.0, 1.0, 2.0, 3.0])));
    assert!(tc.one_neighbour_cells.contains(&leaf_with(&m, [1.0, 2.0, 3.0, 4.0])));
    assert!(tc.one_neighbour_cells.iter().all(|&c| m.cell(c).level == tc.level));
    assert_eq!(tc.level, 0);
}

#[test]
fn correspondence_example_graph() {
    let m = fig5();
    let g = raw(&m);
    let p0 = leaf_with(&m, [1.5, 2.0, 2.0, 2.5]);
    let pg = g.g_cells.iter().position(|c| c.link == BackLink::PCell(p0)).expect("g-cell of the P-cell");
    assert_eq!(g.g_cells[pg].kind, GCellKind::PGCell);
    let tg = g
        .g_cells
        .iter()
        .position(|c| {
            c.kind == GCellKind::TGCell && [c.real.x0, c.real.x1, c.real.y0, c.real.y1] == [1.0, 2.0, 2.0, 3.0]
        })
        .expect("g-cell of the T-connection");
    let BackLink::TConnection(i) = g.g_cells[tg].link else { panic!("T-g-cell links a T-connection") };
    assert_eq!(g.t_connections[i].g_cell, Some(tg));
    let w = init_weights(&g, tg).unwrap();
    assert_eq!(w.values.iter().filter(|&&v| v != 0.0).count(), 1);
    assert_eq!(w.values[tg], 1.0);
    assert!(matches!(init_weights(&g, g.g_cells.len()), Err(Error::InvalidInput(_))));
}

#[test]
fn correspondence_example_dimension_matches_the_oracle() {
    let m = fig5();
    let d = dim_bruteforce(&m, true).unwrap();
    assert_eq!(raw(&m).g_cells.len(), d);
    assert_eq!(dim_space(&m, true).unwrap(), d);
    assert_eq!(dim_space(&m, false).unwrap(), dim_bruteforce(&m, false).unwrap());
}

#[test]
fn tensor_graph_has_one_g_cell_per_interior_p_cell() {
    for (cx, cy) in [(3, 3), (4, 3), (5, 5)] {
        let g = build_cvr(&tensor(cx, cy)).unwrap();
        assert_eq!(g.g_cells.len(), (cx - 2) * (cy - 2));
        assert!(g.g_cells.iter().all(|c| c.kind == GCellKind::PGCell));
    }
}

#[test]
fn tensor_full_space_dimension() {
    for (cx, cy) in [(1, 1), (1, 4), (3, 2), (6, 5)] {
        assert_eq!(dim_space(&tensor(cx, cy), false).unwrap(), (cx + 2) * (cy + 2));
    }
}

#[test]
fn no_crossing_vertices_means_no_g_cells() {
    let m = new_tensor_mesh(&[0.0, 1.0, 3.0], &[0.0, 2.0, 3.0]).unwrap();
    assert!(build_cvr(&m).unwrap().g_cells.is_empty());
    assert_eq!(dim_space(&m, true).unwrap(), 0);
}

#[test]
fn graph_export_lists_every_g_cell() {
    let m = fig1_level2();
    let g = build_cvr(&m).unwrap();
    let j = g.to_json();
    assert_eq!(j.g_cells.len(), g.g_cells.len());
    assert!(j.g_cells.iter().enumerate().all(|(i, c)| c.id == i && !c.cells.is_empty()));
    let text = serde_json::to_string(&j).unwrap();
    assert_eq!(serde_json::from_str::<tmesh_core::cvr::CvrJson>(&text).unwrap(), j);
}

#[test]
fn three_level_example_dimensions() {
    for m in [fig1_level1(), fig1_level2()] {
        assert_eq!(dim_space(&m, true).unwrap(), dim_bruteforce(&m, true).unwrap());
        assert_eq!(dim_space(&m, false).unwrap(), dim_bruteforce(&m, false).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn graph_dimension_equals_constraint_nullity(seed in 0u64..100_000) {
        let m = random_hierarchical_mesh(seed, 4, 3, 0.4).unwrap();
        prop_assert_eq!(dim_space(&m, true).unwrap(), dim_bruteforce(&m, true).unwrap());
        prop_assert_eq!(dim_space(&m, false).unwrap(), dim_bruteforce(&m, false).unwrap());
    }

    #[test]
    fn every_bounded_t_connection_has_its_own_g_cell(seed in 0u64..100_000) {
        let m = random_hierarchical_mesh(seed, 4, 3, 0.4).unwrap();
        let g = build_cvr(&m).unwrap();
        for (i, tc) in g.t_connections.iter().enumerate() {
            if let Some(k) = tc.g_cell {
                prop_assert_eq!(g.g_cells[k].link, BackLink::TConnection(i));
            }
        }
        let linked = g.t_connections.iter().filter(|t| t.g_cell.is_some()).count();
        let t_kind = g.g_cells.iter().filter(|c| c.kind == GCellKind::TGCell).count();
        prop_assert_eq!(linked, t_kind);
    }
}
