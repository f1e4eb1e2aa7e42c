//! Command-line driver: refinement, evaluation, the Green's identity test,
//! scaling benchmarks, scattering solves and the two calibration sweeps.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::association::{Side, Verdict};
use crate::expansions::{p2l_acc, SourceBatch};
use crate::geometry::{build_panels_with, gauss_legendre, legendre_values, Affine, BuildOptions, Discretization, FourierCurve};
use crate::layerpot::{
    bounding_box, greens_identity_errors, interior_points, point_field, preset, weighted_rel_l2, write_field_csv,
    EvalOptions, Evaluator, Grid, Kind, PRESETS,
};
use crate::qbxfmm::{Densities, FmmOptions, FmmPlan};
use crate::refinement::{brute, lookup_qhat, prepare, refine_to_conditions, DEFAULT_MAX_ROUNDS};
use crate::solver::{solve_scatter, GmresOptions, Incident, ScatterProblem};
use crate::{Error, Point, Result, C64};

/// Exit code when a run finishes but misses a requested tolerance.
pub const EXIT_TOLERANCE: i32 = 1;
/// Exit code for runtime errors (parse failures, pipeline errors).
pub const EXIT_ERROR: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "qbxfmm", version, about = "FMM-accelerated QBX for 2D Helmholtz layer potentials")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Discretize and refine a geometry until the admissibility conditions hold.
    Refine(RefineArgs),
    /// Evaluate a layer potential on a grid or target list.
    Evaluate(EvaluateArgs),
    /// Green's identity accuracy test with interior point sources.
    GreenTest(GreenArgs),
    /// Timing sweep of the QBX-FMM against a plain point FMM.
    Bench(BenchArgs),
    /// Exterior Dirichlet scattering solve.
    Scatter(ScatterArgs),
    /// Empirical source quadrature order per (q, eps).
    CalibrateQhat(QhatArgs),
    /// Empirical extra FMM order for a QBX order.
    CalibratePadd(PaddArgs),
}

/// Geometry and accuracy settings shared by most subcommands.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Fourier coefficient table (`j re1 im1 re2 im2` per line); default: the built-in fish.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Copies of the curve, one `angle scale x y` line each.
    #[arg(long)]
    pub placements: Option<PathBuf>,
    /// Named accuracy preset: e4, e7, e10 or e13.
    #[arg(long)]
    pub profile: Option<String>,
    /// Density nodes per panel (overrides the profile).
    #[arg(long)]
    pub q: Option<usize>,
    /// QBX order (overrides the profile).
    #[arg(long)]
    pub p: Option<usize>,
    /// Tolerance (overrides the profile).
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, default_value_t = 12.43)]
    pub omega: f64,
    /// any, exterior or interior.
    #[arg(long, default_value = "exterior")]
    pub side: String,
    #[arg(long, default_value_t = crate::association::DEFAULT_EPS_ASSOC)]
    pub eps_assoc: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Main output file (CSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON report (default: stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[command(flatten)]
    pub common: Common,
    /// Also recheck every condition with the quadratic-cost checkers.
    #[arg(long)]
    pub brute_check: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// slp, dlp or combined.
    #[arg(long, default_value = "combined")]
    pub kind: String,
    /// Density: `ones` or `plane` (exp(i omega x)).
    #[arg(long, default_value = "ones")]
    pub density: String,
    /// "xmin,xmax,ymin,ymax,nx,ny".
    #[arg(long)]
    pub grid: Option<String>,
    /// Target file with one `x y` per line.
    #[arg(long)]
    pub targets: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GreenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Volume targets: `grid` (default), `none`, or a file with `x y` lines.
    #[arg(long, default_value = "grid")]
    pub targets: String,
    /// Volume grid; default is the geometry's box enlarged by half its size, 100 x 100.
    #[arg(long)]
    pub grid: Option<String>,
    /// Interior point sources generating the test field.
    #[arg(long, default_value_t = 5)]
    pub charges: usize,
    /// Exit with failure when an error exceeds this.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Skip the plain point-FMM timing rerun.
    #[arg(long)]
    pub no_point_fmm: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Smallest source count of the sweep.
    #[arg(long, default_value_t = 2500)]
    pub n_min: usize,
    /// Number of sizes; each doubles the previous.
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
    /// Timed repetitions per size (the fastest is kept).
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
}

#[derive(Args, Debug)]
pub struct ScatterArgs {
    #[command(flatten)]
    pub common: Common,
    /// Plane wave direction "d1,d2" (normalized).
    #[arg(long, default_value = "-2,1")]
    pub direction: String,
    /// Use the field of interior point sources as a known exact solution.
    #[arg(long)]
    pub manufactured: bool,
    /// Probe error tolerance for the manufactured solution.
    #[arg(long, default_value_t = 1e-4)]
    pub probe_tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub gmres_tol: f64,
    #[arg(long, default_value_t = 200)]
    pub restart: usize,
    #[arg(long, default_value_t = 2000)]
    pub max_iters: usize,
    /// Solve on the refined panels without the extra uniform split.
    #[arg(long)]
    pub no_subdivide: bool,
    /// Total field grid "xmin,xmax,ymin,ymax,nx,ny" written to --field.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub field: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QhatArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8, 16])]
    pub qs: Vec<usize>,
    #[arg(long = "eps-list", value_delimiter = ',', default_values_t = [1e-3, 1e-6, 1e-9, 1e-12])]
    pub eps_list: Vec<f64>,
    #[arg(long, default_value_t = 5.0)]
    pub omega: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PaddArgs {
    /// QBX order; density order and tolerance come from the matching profile.
    #[arg(long, default_value_t = 4)]
    pub p: usize,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub geometries: usize,
    /// Largest extra order tried.
    #[arg(long, default_value_t = 30)]
    pub max_padd: usize,
    #[arg(long, default_value_t = 5.0)]
    pub omega: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("QBXFMM_LOG", "warn")).try_init();
    let threads = cli.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    match pool.install(|| run(&cli.command)) {
        Ok(true) => 0,
        Ok(false) => EXIT_TOLERANCE,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

/// Runs one subcommand; `Ok(false)` when a requested tolerance was missed.
pub fn run(cmd: &Command) -> Result<bool> {
    match cmd {
        Command::Refine(a) => cmd_refine(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::GreenTest(a) => cmd_green_test(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Scatter(a) => cmd_scatter(a),
        Command::CalibrateQhat(a) => cmd_calibrate_qhat(a),
        Command::CalibratePadd(a) => cmd_calibrate_padd(a),
    }
}

/// Resolved accuracy settings.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Settings {
    pub q: usize,
    pub p: usize,
    pub eps: f64,
    pub omega: f64,
}

impl Common {
    pub fn settings(&self) -> Result<Settings> {
        let base = match &self.profile {
            Some(name) => preset(name)?,
            None => PRESETS[1],
        };
        let s = Settings {
            q: self.q.unwrap_or(base.q),
            p: self.p.unwrap_or(base.p),
            eps: self.eps.unwrap_or(base.eps),
            omega: self.omega,
        };
        if !(s.omega > 0.0) {
            return Err(Error::Domain(format!("omega must be positive, got {}", s.omega)));
        }
        Ok(s)
    }

    pub fn side(&self) -> Result<Side> {
        self.side.parse()
    }

    pub fn curves(&self) -> Result<Vec<FourierCurve>> {
        let base = match &self.curve {
            Some(path) => FourierCurve::parse_table(&read(path)?)?,
            None => FourierCurve::fish(),
        };
        match &self.placements {
            None => Ok(vec![base]),
            Some(path) => parse_placements(&read(path)?)?.iter().map(|m| base.transformed(m)).collect(),
        }
    }

    /// Refined discretization with centers on the requested side(s).
    pub fn discretization(&self) -> Result<Discretization> {
        let s = self.settings()?;
        let sides: Vec<i8> = match self.side()? {
            Side::Exterior => vec![1],
            Side::Interior => vec![-1],
            Side::Any => vec![1, -1],
        };
        let (d, report) = prepare(&self.curves()?, s.q, s.eps, s.omega, &sides)?;
        log::info!("{} panels after {} refinement rounds", d.n_panels(), report.iterations);
        Ok(d)
    }

    fn eval_options(&self) -> Result<EvalOptions> {
        let s = self.settings()?;
        Ok(EvalOptions { eps_assoc: self.eps_assoc, ..EvalOptions::new(s.omega, s.eps, s.p, self.side()?) })
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Lines `angle scale x y`; `#` starts a comment.
pub fn parse_placements(text: &str) -> Result<Vec<Affine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("placement line {}: {e}", i + 1)))?;
        if v.len() != 4 {
            return Err(Error::Parse(format!("placement line {}: expected `angle scale x y`", i + 1)));
        }
        out.push(Affine::rotate_scale_translate(v[0], v[1], [v[2], v[3]]));
    }
    if out.is_empty() {
        return Err(Error::Parse("no placements".into()));
    }
    Ok(out)
}

/// Lines `x y`; `#` starts a comment.
pub fn parse_points(text: &str) -> Result<Vec<Point>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|w| !w.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("target line {}: {e}", i + 1)))?;
        if v.len() != 2 {
            return Err(Error::Parse(format!("target line {}: expected `x y`", i + 1)));
        }
        out.push([v[0], v[1]]);
    }
    Ok(out)
}

fn parse_direction(s: &str) -> Result<Point> {
    let v: Vec<f64> = s
        .split(',')
        .map(|w| w.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse(format!("direction '{s}' is not d1,d2")))?;
    if v.len() != 2 || v[0].hypot(v[1]) == 0.0 {
        return Err(Error::Parse(format!("direction '{s}' is not a nonzero d1,d2")));
    }
    let n = v[0].hypot(v[1]);
    Ok([v[0] / n, v[1] / n])
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    match path {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Grid around the geometry, enlarged by half its extent on each side.
fn default_grid(d: &Discretization, n: usize) -> Grid {
    let (lo, hi) = bounding_box(&d.density_points());
    let (wx, wy) = (hi[0] - lo[0], hi[1] - lo[1]);
    Grid { xmin: lo[0] - 0.5 * wx, xmax: hi[0] + 0.5 * wx, ymin: lo[1] - 0.5 * wy, ymax: hi[1] + 0.5 * wy, nx: n, ny: n }
}

/// Random interior charges, well away from the curves.
pub fn interior_charges(d: &Discretization, n: usize, seed: u64) -> Result<(Vec<Point>, Vec<C64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = bounding_box(&d.density_points());
    let margin = 0.25 * (hi[0] - lo[0]).min(hi[1] - lo[1]);
    let points = interior_points(d, n, margin, &mut rng)?;
    let charges = (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    Ok((points, charges))
}

#[derive(Serialize)]
struct RefineReport {
    settings: Settings,
    n_curves: usize,
    n_panels: usize,
    n_density: usize,
    n_source: usize,
    qhat: usize,
    rounds: usize,
    history: Vec<[usize; 4]>,
    passed: [bool; 4],
    brute_passed: Option<[bool; 4]>,
}

pub fn cmd_refine(a: &RefineArgs) -> Result<bool> {
    let c = &a.common;
    let s = c.settings()?;
    let qhat = lookup_qhat(s.q, s.eps)?;
    let curves = c.curves()?;
    let d0 = build_panels_with(&curves, &BuildOptions { qhat, ..BuildOptions::new(s.q, s.eps) })?;
    let (d, rep) = refine_to_conditions(&d0, s.omega, DEFAULT_MAX_ROUNDS)?;
    let brute_passed = a.brute_check.then(|| {
        let flags = brute::all(&d, s.omega);
        std::array::from_fn(|i| flags[i].is_empty())
    });
    if let Some(path) = &c.out {
        d.write_csv(create(path)?)?;
    }
    let ok = rep.all_pass() && brute_passed.is_none_or(|b| b.iter().all(|&x| x));
    write_json(
        c.report.as_deref(),
        &RefineReport {
            settings: s,
            n_curves: curves.len(),
            n_panels: d.n_panels(),
            n_density: d.n_density(),
            n_source: d.n_source(),
            qhat,
            rounds: rep.iterations,
            history: rep.history.clone(),
            passed: rep.passed,
            brute_passed,
        },
    )?;
    Ok(ok)
}

#[derive(Serialize)]
struct EvaluateReport {
    settings: Settings,
    kind: Kind,
    n_targets: usize,
    n_direct: usize,
    n_qbx: usize,
    n_failed: usize,
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<bool> {
    let c = &a.common;
    let s = c.settings()?;
    let kind: Kind = a.kind.parse()?;
    let d = c.discretization()?;
    let targets = match (&a.grid, &a.targets) {
        (Some(g), None) => g.parse::<Grid>()?.points(),
        (None, Some(path)) => parse_points(&read(path)?)?,
        (None, None) => default_grid(&d, 100).points(),
        (Some(_), Some(_)) => return Err(Error::Parse("give either --grid or --targets".into())),
    };
    let density: Vec<C64> = match a.density.as_str() {
        "ones" => vec![C64::new(1.0, 0.0); d.n_density()],
        "plane" => d.density_points().iter().map(|x| C64::new(0.0, s.omega * x[0]).exp()).collect(),
        other => return Err(Error::Parse(format!("unknown density '{other}' (ones, plane)"))),
    };
    let ev = Evaluator::new(&d, &targets, EvalOptions { allow_failed: true, ..c.eval_options()? })?;
    let values = ev.evaluate(kind, &density)?;
    let verdicts = &ev.association().verdicts;
    if let Some(path) = &c.out {
        write_field_csv(create(path)?, &targets, &values, verdicts)?;
    }
    let n_failed = ev.association().failed().len();
    write_json(
        c.report.as_deref(),
        &EvaluateReport {
            settings: s,
            kind,
            n_targets: targets.len(),
            n_direct: verdicts.iter().filter(|v| **v == Verdict::Direct).count(),
            n_qbx: ev.association().n_qbx(),
            n_failed,
        },
    )?;
    Ok(n_failed == 0)
}

#[derive(Serialize)]
struct GreenOutput {
    settings: Settings,
    seed: u64,
    charges: usize,
    boundary_error: f64,
    volume_error: Option<f64>,
    n_panels: usize,
    n_density: usize,
    n_source: usize,
    n_volume: usize,
    n_volume_qbx: usize,
    p_fmm: Vec<usize>,
    p_add: usize,
    tol: Option<f64>,
    passed: bool,
}

#[derive(Serialize)]
struct Timings {
    t_qbx: f64,
    t_fmm: Option<f64>,
    ratio: Option<f64>,
}

/// Plain point FMM over the source grid with the given targets; returns seconds.
pub fn time_point_fmm(d: &Discretization, targets: &[Point], omega: f64, eps: f64) -> Result<f64> {
    let start = Instant::now();
    let strengths: Vec<C64> = d.source_weights().iter().map(|&w| C64::new(w, 0.0)).collect();
    let plan = FmmPlan::new(&d.source_points(), &d.source_normals(), targets, &[], FmmOptions::point(omega, eps))?;
    plan.run(Densities { slp: Some(&strengths), dlp: None })?;
    Ok(start.elapsed().as_secs_f64())
}

pub fn cmd_green_test(a: &GreenArgs) -> Result<bool> {
    let c = &a.common;
    let s = c.settings()?;
    let d = c.discretization()?;
    let (points, charges) = interior_charges(&d, a.charges, c.seed)?;
    let volume: Vec<Point> = match a.targets.as_str() {
        "none" => Vec::new(),
        "grid" => {
            let g = match &a.grid {
                Some(g) => g.parse()?,
                None => default_grid(&d, 100),
            };
            g.points().into_par_iter().filter(|&x| d.side_of(x) > 0).collect()
        }
        path => parse_points(&read(Path::new(path))?)?,
    };
    let opts = EvalOptions { side: Side::Exterior, ..c.eval_options()? };
    let r = greens_identity_errors(&d, &points, &charges, &volume, &opts)?;
    let passed = a.tol.is_none_or(|t| r.boundary_error <= t && r.volume_error.is_none_or(|v| v <= t));
    if let Some(path) = &c.out {
        write_field_csv(create(path)?, &volume, &r.volume_values, &r.volume_verdicts)?;
    }
    let t_fmm = if a.no_point_fmm {
        None
    } else {
        let mut all = d.density_points();
        all.extend_from_slice(&volume);
        Some(time_point_fmm(&d, &all, s.omega, s.eps)?)
    };
    let timings = Timings { t_qbx: r.seconds, t_fmm, ratio: t_fmm.map(|t| r.seconds / t) };
    match &c.report {
        Some(p) => {
            let tp = p.with_extension("timings.json");
            write_json(Some(&tp), &timings)?;
        }
        None => eprintln!("t_qbx = {:.3} s, t_fmm = {:?} s", timings.t_qbx, timings.t_fmm),
    }
    write_json(
        c.report.as_deref(),
        &GreenOutput {
            settings: s,
            seed: c.seed,
            charges: a.charges,
            boundary_error: r.boundary_error,
            volume_error: r.volume_error,
            n_panels: r.n_panels,
            n_density: r.n_density,
            n_source: r.n_source,
            n_volume: r.n_volume,
            n_volume_qbx: r.n_volume_qbx,
            p_fmm: r.p_fmm,
            p_add: r.p_add,
            tol: a.tol,
            passed,
        },
    )?;
    Ok(passed)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub n_source: usize,
    pub n_density: usize,
    pub t_qbx: f64,
    pub t_fmm: f64,
    pub ratio: f64,
}

/// Geometry for the sweep: the curves resolved coarsely, refined for
/// `omega`, then split uniformly until at least `n_min` source nodes.
pub fn bench_geometry(curves: &[FourierCurve], q: usize, eps: f64, omega: f64, n_min: usize) -> Result<Discretization> {
    let qhat = lookup_qhat(q, eps)?;
    let d0 = build_panels_with(curves, &BuildOptions { qhat, ..BuildOptions::new(q, 1e-2) })?;
    let (mut d, _) = refine_to_conditions(&d0, omega, DEFAULT_MAX_ROUNDS)?;
    while 2 * d.n_source() <= n_min {
        d = d.uniform_split();
    }
    Ok(d)
}

/// Times on-surface QBX evaluation and a point FMM on the same nodes for
/// `steps` geometries, each with twice the panels of the previous.
pub fn bench_sweep(d0: &Discretization, s: Settings, steps: usize, repeats: usize) -> Result<Vec<BenchRow>> {
    if steps == 0 {
        return Err(Error::Domain("empty benchmark sweep".into()));
    }
    let mut d = d0.clone();
    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps {
        if step > 0 {
            d = d.uniform_split();
        }
        let nodes = d.density_points();
        let density: Vec<C64> = nodes.iter().map(|x| C64::new(0.0, s.omega * x[0]).exp()).collect();
        let mut t_qbx = f64::INFINITY;
        let mut t_fmm = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            let opts = EvalOptions { check_conditions: false, ..EvalOptions::new(s.omega, s.eps, s.p, Side::Exterior) };
            let ev = Evaluator::new(&d, &nodes, opts)?;
            ev.evaluate(Kind::Slp, &density)?;
            t_qbx = t_qbx.min(start.elapsed().as_secs_f64());
            t_fmm = t_fmm.min(time_point_fmm(&d, &nodes, s.omega, s.eps)?);
        }
        log::info!("n_s = {}: t_qbx {t_qbx:.3} s, t_fmm {t_fmm:.3} s", d.n_source());
        rows.push(BenchRow { n_source: d.n_source(), n_density: d.n_density(), t_qbx, t_fmm, ratio: t_qbx / t_fmm });
    }
    Ok(rows)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<bool> {
    let c = &a.common;
    let s = c.settings()?;
    if a.steps == 0 {
        return Err(Error::Domain("empty benchmark sweep".into()));
    }
    let d = bench_geometry(&c.curves()?, s.q, s.eps, s.omega, a.n_min)?;
    let rows = bench_sweep(&d, s, a.steps, a.repeats)?;
    if let Some(path) = &c.out {
        let mut w = create(path)?;
        writeln!(w, "n_source,n_density,t_qbx,t_fmm,ratio")?;
        for r in &rows {
            writeln!(w, "{},{},{:.6},{:.6},{:.4}", r.n_source, r.n_density, r.t_qbx, r.t_fmm, r.ratio)?;
        }
    }
    write_json(c.report.as_deref(), &serde_json::json!({ "settings": s, "rows": rows }))?;
    Ok(true)
}

#[derive(Serialize)]
struct ScatterReport {
    settings: Settings,
    n_curves: usize,
    iterations: usize,
    final_residual: f64,
    density_resolution: f64,
    n_density: usize,
    probe_error: Option<f64>,
    passed: bool,
}

pub fn cmd_scatter(a: &ScatterArgs) -> Result<bool> {
    let c = &a.common;
    let s = c.settings()?;
    let curves = c.curves()?;
    let (d, _) = prepare(&curves, s.q, s.eps, s.omega, &[1])?;
    let (incident, exact) = if a.manufactured {
        let (points, charges) = interior_charges(&d, 3, c.seed)?;
        let neg = charges.iter().map(|q| -q).collect();
        (Incident::PointSources { points: points.clone(), charges: neg }, Some((points, charges)))
    } else {
        (Incident::PlaneWave { direction: parse_direction(&a.direction)? }, None)
    };
    let problem = ScatterProblem {
        discretization: d,
        omega: s.omega,
        incident: incident.clone(),
        eps: s.eps,
        p: s.p,
        gmres: GmresOptions { tol: a.gmres_tol, restart: a.restart, max_iters: a.max_iters },
        extra_subdivision: !a.no_subdivide,
    };
    let sol = solve_scatter(&problem)?;
    let final_residual = *sol.residuals.last().unwrap_or(&0.0);
    let probe_error = match &exact {
        Some((points, charges)) => {
            let probes = probe_circle(&sol.discretization, 100);
            let got = sol.scattered(&probes)?;
            let want: Vec<C64> = probes.iter().map(|&x| point_field(s.omega, points, charges, x)).collect();
            Some(weighted_rel_l2(&got, &want, None))
        }
        None => None,
    };
    if let Some(path) = &c.out {
        let mut w = create(path)?;
        writeln!(w, "panel,node,x,y,Re sigma,Im sigma")?;
        let q = sol.discretization.q;
        for (i, (x, v)) in sol.discretization.density_points().iter().zip(&sol.density).enumerate() {
            writeln!(w, "{},{},{:.17e},{:.17e},{:.17e},{:.17e}", i / q, i % q, x[0], x[1], v.re, v.im)?;
        }
    }
    if let Some(path) = &a.field {
        let g: Grid = match &a.grid {
            Some(g) => g.parse()?,
            None => default_grid(&sol.discretization, 200),
        };
        let pts = g.points();
        let opts = EvalOptions { allow_failed: true, ..EvalOptions::new(s.omega, s.eps, s.p, Side::Exterior) };
        let ev = Evaluator::new(&sol.discretization, &pts, opts)?;
        let sc = ev.evaluate(Kind::Combined, &sol.density)?;
        let total: Vec<C64> = pts
            .iter()
            .zip(&sc)
            .map(|(&x, u)| if sol.discretization.side_of(x) > 0 { u + incident.value(s.omega, x) } else { C64::new(0.0, 0.0) })
            .collect();
        write_field_csv(create(path)?, &pts, &total, &ev.association().verdicts)?;
    }
    let passed = final_residual <= a.gmres_tol && probe_error.is_none_or(|e| e <= a.probe_tol);
    write_json(
        c.report.as_deref(),
        &ScatterReport {
            settings: s,
            n_curves: curves.len(),
            iterations: sol.iterations,
            final_residual,
            density_resolution: sol.density_resolution,
            n_density: sol.n_density,
            probe_error,
            passed,
        },
    )?;
    Ok(passed)
}

/// `n` points on a circle enclosing the geometry with room to spare.
pub fn probe_circle(d: &Discretization, n: usize) -> Vec<Point> {
    let (lo, hi) = bounding_box(&d.density_points());
    let c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let r = 0.75 * (hi[0] - lo[0]).hypot(hi[1] - lo[1]);
    (0..n)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / n as f64;
            [c[0] + r * a.cos(), c[1] + r * a.sin()]
        })
        .collect()
}

/// Reference source order for the q-hat calibration.
pub const QHAT_REFERENCE_ORDER: usize = 160;
/// Largest source order the calibration tries.
pub const QHAT_MAX: usize = 128;

/// QBX order paired with a density order in the profiles (`q` itself if unlisted).
pub fn paired_order(q: usize) -> usize {
    PRESETS.iter().find(|p| p.q == q).map_or(q, |p| p.p)
}

/// Single-layer QBX coefficients of density `P_n` on a unit-length panel
/// (flat, or an arc of the unit circle), at centers a quarter panel length
/// off the density nodes on `side`, with `qhat` source points.
pub fn unit_panel_coeffs(omega: f64, curved: bool, q: usize, qhat: usize, n: usize, p: usize, side: f64) -> Vec<Vec<C64>> {
    // t in [-1, 1] maps to arclength t / 2
    let at = |t: f64| -> (Point, Point) {
        if curved {
            let a = 0.5 * t;
            ([a.sin(), 1.0 - a.cos()], [-a.sin(), a.cos()])
        } else {
            ([0.5 * t, 0.0], [0.0, 1.0])
        }
    };
    let dens = gauss_legendre(q);
    let src = gauss_legendre(qhat);
    let mut pts = Vec::with_capacity(qhat);
    let mut nrm = Vec::with_capacity(qhat);
    let mut str_ = Vec::with_capacity(qhat);
    let mut leg = vec![0.0; n + 1];
    for (&t, &w) in src.nodes.iter().zip(&src.weights) {
        let (x, nv) = at(t);
        pts.push(x);
        nrm.push(nv);
        legendre_values(n + 1, t, &mut leg);
        str_.push(C64::new(leg[n] * w * 0.5, 0.0));
    }
    let batch = SourceBatch { points: &pts, normals: &nrm, slp: Some(&str_), dlp: None };
    dens.nodes
        .iter()
        .map(|&t| {
            let (x, nv) = at(t);
            let c = [x[0] + side * 0.25 * nv[0], x[1] + side * 0.25 * nv[1]];
            let mut out = vec![C64::new(0.0, 0.0); 2 * p + 1];
            p2l_acc(omega, c, 1.0, p, &batch, &mut out);
            out
        })
        .collect()
}

/// Smallest source order (in steps of 4) whose coefficients agree with the
/// reference rule to `eps`, relative to each center's largest coefficient.
pub fn calibrate_qhat(q: usize, eps: f64, omega: f64) -> usize {
    let p = paired_order(q);
    let configs = [(false, 1.0), (true, 1.0), (true, -1.0)];
    let mut worst = q;
    for &(curved, side) in &configs {
        for n in 0..q {
            let reference = unit_panel_coeffs(omega, curved, q, QHAT_REFERENCE_ORDER, n, p, side);
            let mut qhat = q;
            loop {
                let trial = unit_panel_coeffs(omega, curved, q, qhat, n, p, side);
                let err = trial
                    .iter()
                    .zip(&reference)
                    .map(|(a, r)| {
                        let scale = r.iter().map(|v| v.norm()).fold(0.0, f64::max);
                        a.iter().zip(r).map(|(x, y)| (x - y).norm() / scale).fold(0.0, f64::max)
                    })
                    .fold(0.0, f64::max);
                if err <= eps || qhat >= QHAT_MAX {
                    break;
                }
                qhat += 4;
            }
            worst = worst.max(qhat);
        }
    }
    worst
}

#[derive(Serialize)]
pub struct QhatTable {
    pub omega: f64,
    pub eps: Vec<f64>,
    pub rows: Vec<(usize, Vec<usize>)>,
}

pub fn cmd_calibrate_qhat(a: &QhatArgs) -> Result<bool> {
    if a.qs.is_empty() || a.eps_list.is_empty() {
        return Err(Error::Domain("empty calibration sweep".into()));
    }
    let rows: Vec<(usize, Vec<usize>)> = a
        .qs
        .par_iter()
        .map(|&q| (q, a.eps_list.iter().map(|&e| calibrate_qhat(q, e, a.omega)).collect()))
        .collect();
    write_json(a.report.as_deref(), &QhatTable { omega: a.omega, eps: a.eps_list.clone(), rows })?;
    Ok(true)
}

/// Random radial test curve `r = 5 + sum_{j<=12} delta_j sin(j theta)`, `|delta_j| <= 0.2`.
pub fn random_radial_curve<R: Rng>(rng: &mut R) -> Result<FourierCurve> {
    let deltas = (0..12).map(|_| rng.gen_range(-0.2..0.2)).collect();
    FourierCurve::radial(5.0, deltas)
}

#[derive(Clone, Debug, Serialize)]
pub struct PaddRow {
    pub geometry: usize,
    pub n_panels: usize,
    /// Error with a generous extra order; the floor any `p_add` can reach.
    pub reference_error: f64,
    /// Smallest extra order meeting the target, if any.
    pub p_add: Option<usize>,
    /// Error with the tabulated extra order.
    pub table_error: f64,
    pub table_passes: bool,
}

/// Green's identity at exterior points a tenth of a panel off every node,
/// evaluated with a fixed extra FMM order.
pub fn near_boundary_error(d: &Discretization, points: &[Point], charges: &[C64], omega: f64, eps: f64, p: usize, p_add: usize) -> Result<f64> {
    let mut targets = Vec::with_capacity(d.n_density());
    for pan in &d.panels {
        for (x, n) in pan.nodes.iter().zip(&pan.normals) {
            targets.push([x[0] + 0.1 * pan.h * n[0], x[1] + 0.1 * pan.h * n[1]]);
        }
    }
    let opts = EvalOptions { p_add: Some(p_add), ..EvalOptions::new(omega, eps, p, Side::Exterior) };
    let r = greens_identity_errors(d, points, charges, &targets, &opts)?;
    Ok(r.volume_error.unwrap_or(0.0))
}

/// Per random geometry: smallest extra order meeting `eps` (or twice the
/// converged error if the discretization itself is coarser than `eps`).
pub fn calibrate_padd(p: usize, q: usize, eps: f64, omega: f64, n_geoms: usize, max_padd: usize, seed: u64) -> Result<Vec<PaddRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = crate::qbxfmm::lookup_padd(p);
    let mut rows = Vec::with_capacity(n_geoms);
    for g in 0..n_geoms {
        let curve = random_radial_curve(&mut rng)?;
        let (d, _) = prepare(&[curve], q, eps, omega, &[1])?;
        let (points, charges) = interior_charges(&d, 3, rng.gen())?;
        let err = |pa: usize| near_boundary_error(&d, &points, &charges, omega, eps, p, pa);
        let reference_error = err(max_padd)?;
        let target = eps.max(2.0 * reference_error);
        let mut found = None;
        for pa in 0..=max_padd {
            if err(pa)? <= target {
                found = Some(pa);
                break;
            }
        }
        let table_error = err(table)?;
        log::info!("geometry {g}: p_add {found:?}, table error {table_error:.3e}");
        rows.push(PaddRow {
            geometry: g,
            n_panels: d.n_panels(),
            reference_error,
            p_add: found,
            table_error,
            table_passes: table_error <= target,
        });
    }
    Ok(rows)
}

pub fn cmd_calibrate_padd(a: &PaddArgs) -> Result<bool> {
    let base = PRESETS.iter().find(|pr| pr.p == a.p).copied().unwrap_or(PRESETS[1]);
    let q = a.q.unwrap_or(base.q);
    let eps = a.eps.unwrap_or(base.eps);
    if a.geometries == 0 {
        return Err(Error::Domain("empty calibration sweep".into()));
    }
    let rows = calibrate_padd(a.p, q, eps, a.omega, a.geometries, a.max_padd, a.seed)?;
    let needed = rows.iter().map(|r| r.p_add.unwrap_or(usize::MAX)).max().unwrap_or(0);
    let all_pass = rows.iter().all(|r| r.table_passes);
    write_json(
        a.report.as_deref(),
        &serde_json::json!({
            "p": a.p, "q": q, "eps": eps, "omega": a.omega,
            "table_p_add": crate::qbxfmm::lookup_padd(a.p),
            "max_needed": needed, "table_suffices": all_pass, "rows": rows,
        }),
    )?;
    Ok(all_pass)
}
