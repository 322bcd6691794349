use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use tmesh_core::basis::{
    basis_for_open_mesh, build_basis_set, collocation_min_singular_value, partition_of_unity_defect, BUILD_C1_TOL,
};
use tmesh_core::bnet::check_c1;
use tmesh_core::cvr::{build_cvr_with, dim_space, CvrOptions};
use tmesh_core::fitting::{
    fit_adaptive, franke, mesh_overlay_obj, parametrize, sample_surface, FitOptions, FunctionData, TriMesh,
    TriangleData,
};
use tmesh_core::mesh::{extend_mesh, simplify_with_trace, HierarchicalTMesh, MeshJson};
use tmesh_core::oracle::{dim_bruteforce, random_hierarchical_mesh};
use tmesh_core::univariate::{basis_csv, build_basis_1d, dim_bruteforce_1d, KnotVector};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "TMESH_THREADS";

const POU_TOL: f64 = 1e-9;
const SV_TOL: f64 = 1e-10;

#[derive(Parser, Debug)]
#[command(name = "tmesh", version, about = "Quadratic C1 splines on hierarchical T-meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dimension of the spline space from the CVR graph.
    Dim(DimArgs),
    /// Export the CVR graph.
    Cvr(CvrArgs),
    /// Build the basis, export it and report its properties.
    Basis(BasisArgs),
    /// Remove trivial l-edges.
    Simplify(SimplifyArgs),
    /// Adaptive surface fitting.
    Fit(FitArgs),
    /// Reproducible random hierarchical mesh.
    RandomMesh(RandomMeshArgs),
    /// Triangulated samples of an analytic surface over the unit square.
    Sample(SampleArgs),
    /// Univariate basis over a knot vector, as CSV.
    Basis1d(Basis1dArgs),
}

#[derive(Args, Debug, Serialize)]
struct DimArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Space with vanishing value and derivative on the boundary.
    #[arg(long)]
    hbc: bool,
    /// Cross-check against the rank of the C1 constraint system.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args, Debug, Serialize)]
struct CvrArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Build the graph on the extended mesh (full space rather than boundary-constrained).
    #[arg(long)]
    extended: bool,
    #[arg(long)]
    no_simplify: bool,
}

#[derive(Args, Debug, Serialize)]
struct BasisArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    hbc: bool,
    /// Run the property checks and fail on any violation.
    #[arg(long)]
    check: bool,
    /// Write the basis functions as JSON.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SimplifyArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    /// Open triangulated surface (OBJ).
    #[arg(long = "in", conflicts_with = "function")]
    input: Option<PathBuf>,
    /// Analytic data instead of a triangulation, sampled on a grid.
    #[arg(long, value_enum)]
    function: Option<Surface>,
    /// Grid intervals per side for analytic data samples.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 8)]
    max_iter: usize,
    /// Level-0 grid, `NXxNY`.
    #[arg(long, default_value = "4x4")]
    level0: String,
    /// Resolution of the sampled output surface.
    #[arg(long, default_value_t = 100)]
    res: usize,
    #[arg(long, default_value = "fit_out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct RandomMeshArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    level0_max: usize,
    #[arg(long, default_value_t = 3)]
    max_level: u32,
    #[arg(long, default_value_t = 0.4)]
    split_prob: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SampleArgs {
    #[arg(long, value_enum, default_value_t = Surface::Franke)]
    function: Surface,
    /// Grid intervals per side.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct Basis1dArgs {
    /// Comma-separated strictly increasing knots.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    knots: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Surface {
    Franke,
    Biquadratic,
}

impl Surface {
    fn point(self, x: f64, y: f64) -> [f64; 3] {
        match self {
            Surface::Franke => [x, y, franke(x, y)],
            Surface::Biquadratic => [x, y, 0.5 + x * y - 0.8 * x * x * y + 0.3 * x * y * y - 0.6 * x * x * y * y],
        }
    }
}

/// Validated run settings, embedded in every report.
#[derive(Debug, Serialize)]
struct RunConfig {
    subcommand: &'static str,
    args: Value,
    threads: Option<usize>,
}

impl RunConfig {
    fn new(subcommand: &'static str, args: &impl Serialize) -> Result<Self> {
        Ok(RunConfig { subcommand, args: serde_json::to_value(args)?, threads: threads_from_env()? })
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be positive");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn load_mesh(path: &Path) -> Result<HierarchicalTMesh> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let json: MeshJson = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(HierarchicalTMesh::from_json(&json)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn mesh_summary(mesh: &HierarchicalTMesh) -> Value {
    json!({ "leaves": mesh.leaves().len(), "max_level": mesh.max_level() })
}

/// Outcome of a subcommand: `false` when a reported check failed.
type Outcome = Result<bool>;

fn dim(a: DimArgs) -> Outcome {
    let cfg = RunConfig::new("dim", &a)?;
    let mesh = load_mesh(&a.mesh)?;
    let d = dim_space(&mesh, a.hbc)?;
    let mut report = json!({ "config": cfg, "mesh": mesh_summary(&mesh), "dim": d });
    let mut ok = true;
    if a.oracle {
        let o = dim_bruteforce(&mesh, a.hbc)?;
        ok = o == d;
        report["oracle_dim"] = json!(o);
        report["match"] = json!(ok);
    }
    emit(None, &report)?;
    Ok(ok)
}

fn cvr(a: CvrArgs) -> Outcome {
    let cfg = RunConfig::new("cvr", &a)?;
    let mesh = load_mesh(&a.mesh)?;
    let target = if a.extended { extend_mesh(&mesh, 2, 2)? } else { mesh.clone() };
    let g = build_cvr_with(&target, CvrOptions { simplify: !a.no_simplify })?;
    let report = json!({
        "config": cfg,
        "mesh": mesh_summary(&target),
        "dim": g.g_cells.len(),
        "t_connections": g.t_connections.len(),
        "cvr": g.to_json(),
    });
    emit(a.out.as_deref(), &report)?;
    Ok(true)
}

fn basis(a: BasisArgs) -> Outcome {
    let cfg = RunConfig::new("basis", &a)?;
    let mesh = load_mesh(&a.mesh)?;
    let (set, open) = if a.hbc {
        (build_basis_set(&mesh)?, None)
    } else {
        let o = basis_for_open_mesh(&mesh)?;
        (o.extended.clone(), Some(o))
    };
    let mut checks = Vec::new();
    if a.check {
        let worst = set.functions.iter().map(|f| check_c1(f, BUILD_C1_TOL).max_defect).fold(0.0, f64::max);
        checks.push(json!({ "name": "c1", "value": worst, "tol": BUILD_C1_TOL, "pass": worst <= BUILD_C1_TOL }));
        if let Some(o) = &open {
            let pou = partition_of_unity_defect(o, 10);
            checks.push(json!({ "name": "partition_of_unity", "value": pou, "tol": POU_TOL, "pass": pou <= POU_TOL }));
            let sv = collocation_min_singular_value(o);
            checks.push(
                json!({ "name": "collocation_min_singular_value", "value": sv, "tol": SV_TOL, "pass": sv > SV_TOL }),
            );
        }
    }
    let ok = checks.iter().all(|c| c["pass"] == json!(true));
    for c in &checks {
        eprintln!(
            "{} {} = {:e}",
            if c["pass"] == json!(true) { "PASS" } else { "FAIL" },
            c["name"].as_str().unwrap_or(""),
            c["value"].as_f64().unwrap_or(f64::NAN)
        );
    }
    if let Some(path) = &a.export {
        let functions: Vec<Value> =
            set.functions.iter().enumerate().map(|(i, f)| json!({ "g_cell": i, "support": f.export() })).collect();
        write(path, &(serde_json::to_string(&json!({ "config": cfg, "functions": functions }))? + "\n"))?;
    }
    let report = json!({
        "config": cfg,
        "mesh": mesh_summary(set.mesh()),
        "dim": set.len(),
        "build": set.report,
        "checks": checks,
    });
    emit(None, &report)?;
    Ok(ok)
}

fn simplify_cmd(a: SimplifyArgs) -> Outcome {
    let cfg = RunConfig::new("simplify", &a)?;
    let mesh = load_mesh(&a.mesh)?;
    let (s, trace) = simplify_with_trace(&mesh);
    let report = json!({
        "config": cfg,
        "before": mesh_summary(&mesh),
        "after": mesh_summary(&s),
        "passes": trace.iter().map(|p| p.len()).collect::<Vec<_>>(),
        "leaves": s.leaf_records(),
    });
    emit(a.out.as_deref(), &report)?;
    Ok(true)
}

fn parse_level0(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once(['x', 'X']).with_context(|| format!("level0 `{s}` is not of the form NXxNY"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn fit(a: FitArgs) -> Outcome {
    let cfg = RunConfig::new("fit", &a)?;
    if !(a.tol > 0.0) {
        bail!("tolerance must be positive");
    }
    let opts = FitOptions { tol: a.tol, max_iter: a.max_iter, level0: parse_level0(&a.level0)? };
    let model = match (&a.input, a.function) {
        (Some(path), None) => {
            let tri = TriMesh::load_obj(path)?;
            let param = parametrize(&tri)?;
            fit_adaptive(&TriangleData::new(tri, param), opts)?
        }
        (None, Some(s)) => fit_adaptive(&FunctionData::new(move |x, y| s.point(x, y), a.samples), opts)?,
        _ => bail!("give exactly one of --in and --function"),
    };
    let dir = &a.out_dir;
    for it in &model.report.iterations {
        write(&dir.join(format!("mesh_{:02}.json", it.n)), &(serde_json::to_string_pretty(&it.mesh)? + "\n"))?;
    }
    write(&dir.join("mesh.json"), &(serde_json::to_string_pretty(&model.mesh.to_json()?)? + "\n"))?;
    write(&dir.join("surface.obj"), &sample_surface(&model, a.res)?.to_obj())?;
    write(&dir.join("mesh_overlay.obj"), &mesh_overlay_obj(&model.mesh, 0.0))?;
    let iterations: Vec<Value> = model
        .report
        .iterations
        .iter()
        .map(|it| {
            json!({
                "n": it.n, "dim": it.dim, "max_error": it.max_error, "seconds": it.seconds,
                "leaves": it.leaves, "max_level": it.max_level, "refined": it.refined,
                "expanded": it.expanded, "widened": it.widened,
            })
        })
        .collect();
    let report = json!({
        "config": cfg,
        "options": model.report.options,
        "iterations": iterations,
        "converged": model.report.converged,
        "warnings": model.report.warnings,
        "mesh": mesh_summary(&model.mesh),
    });
    write(&dir.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    for w in &model.report.warnings {
        eprintln!("warning: {w}");
    }
    emit(None, &report)?;
    Ok(true)
}

fn random_mesh(a: RandomMeshArgs) -> Outcome {
    let mesh = random_hierarchical_mesh(a.seed, a.level0_max, a.max_level, a.split_prob)?;
    emit(a.out.as_deref(), &serde_json::to_value(mesh.to_json()?)?)?;
    Ok(true)
}

fn sample(a: SampleArgs) -> Outcome {
    let f = a.function;
    write(&a.out, &TriMesh::sample_grid(a.n, a.n, |x, y| f.point(x, y))?.to_obj())?;
    Ok(true)
}

fn basis1d(a: Basis1dArgs) -> Outcome {
    let knots = KnotVector::new(a.knots.clone())?;
    let basis = build_basis_1d(&knots);
    let oracle = dim_bruteforce_1d(&knots, false);
    let csv = basis_csv(&basis);
    match &a.out {
        Some(p) => write(p, &csv)?,
        None => print!("{csv}"),
    }
    eprintln!("dim {} oracle {}", basis.len(), oracle);
    Ok(basis.len() == oracle)
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Dim(a) => dim(a),
        Command::Cvr(a) => cvr(a),
        Command::Basis(a) => basis(a),
        Command::Simplify(a) => simplify_cmd(a),
        Command::Fit(a) => fit(a),
        Command::RandomMesh(a) => random_mesh(a),
        Command::Sample(a) => sample(a),
        Command::Basis1d(a) => basis1d(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: consistency check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e.downcast_ref::<tmesh_core::Error>().is_some_and(|e| e.is_internal());
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}
