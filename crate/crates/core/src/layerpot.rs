//! Single-, double- and combined-layer potentials at arbitrary targets,
//! including one-sided limits on the curve, and the Green's identity check.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::association::{associate, AssocOptions, Side, TargetAssociation, Verdict, DEFAULT_EPS_ASSOC, DEFAULT_EPS_GAP};
use crate::expansions::{eval_local, scale_for};
use crate::geometry::Discretization;
use crate::qbxfmm::{Densities, FmmOptions, FmmPlan, DEFAULT_N_MAX};
use crate::refinement::check_all;
use crate::specfun::h0_h1;
use crate::{Error, Point, Result, C64};

const I4: C64 = C64 { re: 0.0, im: 0.25 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Slp,
    Dlp,
    /// `D + i omega S`.
    Combined,
}

impl std::str::FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slp" | "single" => Ok(Kind::Slp),
            "dlp" | "double" => Ok(Kind::Dlp),
            "combined" => Ok(Kind::Combined),
            _ => Err(Error::Parse(format!("unknown layer potential '{s}' (slp, dlp, combined)"))),
        }
    }
}

/// A named accuracy setting: tolerance, density order and QBX order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub eps: f64,
    pub q: usize,
    pub p: usize,
}

pub const PRESETS: [Preset; 4] = [
    Preset { name: "e4", eps: 5e-4, q: 2, p: 2 },
    Preset { name: "e7", eps: 5e-7, q: 4, p: 4 },
    Preset { name: "e10", eps: 5e-10, q: 8, p: 6 },
    Preset { name: "e13", eps: 5e-13, q: 16, p: 8 },
];

pub fn preset(name: &str) -> Result<Preset> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .copied()
        .ok_or_else(|| Error::Parse(format!("unknown profile '{name}' (e4, e7, e10, e13)")))
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub omega: f64,
    pub eps: f64,
    /// QBX order.
    pub p: usize,
    pub side: Side,
    pub p_add: Option<usize>,
    pub eps_assoc: f64,
    pub eps_gap: f64,
    pub n_max: usize,
    /// Reject discretizations that violate the admissibility conditions.
    pub check_conditions: bool,
    /// Return NaN at unserved targets instead of failing.
    pub allow_failed: bool,
}

impl EvalOptions {
    pub fn new(omega: f64, eps: f64, p: usize, side: Side) -> Self {
        EvalOptions {
            omega,
            eps,
            p,
            side,
            p_add: None,
            eps_assoc: DEFAULT_EPS_ASSOC,
            eps_gap: DEFAULT_EPS_GAP,
            n_max: DEFAULT_N_MAX,
            check_conditions: true,
            allow_failed: false,
        }
    }
}

/// One evaluation request.
#[derive(Clone, Copy, Debug)]
pub struct LayerPotentialJob<'a> {
    pub kind: Kind,
    pub discretization: &'a Discretization,
    pub density: &'a [C64],
    pub targets: &'a [Point],
    pub side: Side,
    pub eps: f64,
    pub p: usize,
    pub omega: f64,
}

/// Evaluates a single job; see [`Evaluator`] for repeated evaluation.
pub fn evaluate(job: &LayerPotentialJob) -> Result<Vec<C64>> {
    let opts = EvalOptions::new(job.omega, job.eps, job.p, job.side);
    Evaluator::new(job.discretization, job.targets, opts)?.evaluate(job.kind, job.density)
}

/// Targets associated and FMM planned once; densities applied many times.
pub struct Evaluator<'a> {
    d: &'a Discretization,
    opts: EvalOptions,
    targets: Vec<Point>,
    assoc: TargetAssociation,
    /// Target ids handed to the FMM as ordinary targets.
    direct: Vec<usize>,
    /// Center ids whose coefficients the FMM forms.
    centers: Vec<usize>,
    /// `(slot in centers, target)` for QBX targets.
    qbx: Vec<(usize, usize)>,
    plan: FmmPlan,
    source_points: Vec<Point>,
    source_weights: Vec<f64>,
    pub plan_seconds: f64,
}

impl<'a> Evaluator<'a> {
    pub fn new(d: &'a Discretization, targets: &[Point], opts: EvalOptions) -> Result<Self> {
        if opts.check_conditions {
            let report = check_all(d, opts.omega)?;
            if !report.all_pass() {
                let names: Vec<String> =
                    (0..4).filter(|&i| !report.passed[i]).map(|i| format!("condition {}", i + 1)).collect();
                return Err(Error::Precondition(format!("discretization violates {}", names.join(", "))));
            }
        }
        let start = Instant::now();
        let ao = AssocOptions { side: opts.side, eps_assoc: opts.eps_assoc, eps_gap: opts.eps_gap };
        let assoc = associate(d, targets, &ao)?;
        let failed = assoc.failed();
        if !failed.is_empty() && !opts.allow_failed {
            return Err(Error::Association(failed));
        }
        let direct: Vec<usize> =
            assoc.verdicts.iter().enumerate().filter(|(_, v)| **v == Verdict::Direct).map(|(i, _)| i).collect();
        let pairs = assoc.by_center();
        let mut centers: Vec<usize> = pairs.iter().map(|&(c, _)| c).collect();
        centers.dedup();
        let qbx = pairs.iter().map(|&(c, t)| (centers.binary_search(&c).unwrap(), t)).collect();
        let fmm_targets: Vec<Point> = direct.iter().map(|&i| targets[i]).collect();
        let fmm_centers: Vec<(Point, f64)> =
            centers.iter().map(|&c| (d.centers[c].location, d.centers[c].radius)).collect();
        let fo = FmmOptions { p_add: opts.p_add, n_max: opts.n_max, ..FmmOptions::new(opts.omega, opts.eps, opts.p) };
        let source_points = d.source_points();
        let plan = FmmPlan::new(&source_points, &d.source_normals(), &fmm_targets, &fmm_centers, fo)?;
        let plan_seconds = start.elapsed().as_secs_f64();
        Ok(Evaluator {
            d,
            opts,
            targets: targets.to_vec(),
            assoc,
            direct,
            centers,
            qbx,
            plan,
            source_points,
            source_weights: d.source_weights(),
            plan_seconds,
        })
    }

    pub fn association(&self) -> &TargetAssociation {
        &self.assoc
    }

    pub fn plan(&self) -> &FmmPlan {
        &self.plan
    }

    pub fn targets(&self) -> &[Point] {
        &self.targets
    }

    pub fn n_sources(&self) -> usize {
        self.source_points.len()
    }

    /// Layer potential of `kind` with `density` on the density grid.
    pub fn evaluate(&self, kind: Kind, density: &[C64]) -> Result<Vec<C64>> {
        match kind {
            Kind::Slp => self.evaluate_pair(Some(density), None),
            Kind::Dlp => self.evaluate_pair(None, Some(density)),
            Kind::Combined => {
                let coupled: Vec<C64> = density.iter().map(|s| s * C64::new(0.0, self.opts.omega)).collect();
                self.evaluate_pair(Some(&coupled), Some(density))
            }
        }
    }

    /// `S[slp] + D[dlp]`; either density may be absent.
    pub fn evaluate_pair(&self, slp: Option<&[C64]>, dlp: Option<&[C64]>) -> Result<Vec<C64>> {
        let weighted = |f: &[C64]| -> Result<Vec<C64>> {
            Ok(self.d.oversample(f)?.iter().zip(&self.source_weights).map(|(v, w)| v * w).collect())
        };
        let s = slp.map(weighted).transpose()?;
        let m = dlp.map(weighted).transpose()?;
        let out = self.plan.run(Densities { slp: s.as_deref(), dlp: m.as_deref() })?;
        let mut values = vec![C64::new(f64::NAN, f64::NAN); self.targets.len()];
        for (slot, &t) in self.direct.iter().enumerate() {
            values[t] = out.potentials[slot];
        }
        let omega = self.opts.omega;
        let p = self.opts.p;
        let at: Vec<(usize, C64)> = self
            .qbx
            .par_iter()
            .map(|&(slot, t)| {
                let c = &self.d.centers[self.centers[slot]];
                let v = eval_local(omega, c.location, scale_for(omega, c.radius), p, out.center_coeffs(slot), self.targets[t]);
                (t, v)
            })
            .collect();
        for (t, v) in at {
            values[t] = v;
        }
        Ok(values)
    }
}

/// `sum_j c_j (i/4) H_0(omega |x - y_j|)`.
pub fn point_field(omega: f64, points: &[Point], charges: &[C64], x: Point) -> C64 {
    points.iter().zip(charges).map(|(y, c)| c * h0_h1(omega * crate::dist(x, *y)).0).sum::<C64>() * I4
}

/// Derivative of [`point_field`] along `normal` at `x`.
pub fn point_field_normal_derivative(omega: f64, points: &[Point], charges: &[C64], x: Point, normal: Point) -> C64 {
    points
        .iter()
        .zip(charges)
        .map(|(y, c)| {
            let d = crate::sub(x, *y);
            let r = crate::norm(d);
            let h1 = h0_h1(omega * r).1;
            -c * h1 * (omega * (d[0] * normal[0] + d[1] * normal[1]) / r)
        })
        .sum::<C64>()
        * I4
}

/// `sqrt(sum w |a - b|^2 / sum w |b|^2)`, 0 when both vanish.
pub fn weighted_rel_l2(a: &[C64], b: &[C64], w: Option<&[f64]>) -> f64 {
    let wt = |i: usize| w.map_or(1.0, |w| w[i]);
    let num: f64 = a.iter().zip(b).enumerate().map(|(i, (x, y))| wt(i) * (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().enumerate().map(|(i, y)| wt(i) * y.norm_sqr()).sum();
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}

#[derive(Clone, Debug, Serialize)]
pub struct GreenReport {
    /// Weighted error at the density nodes (exterior limit).
    pub boundary_error: f64,
    /// Error at volume targets, if any were given.
    pub volume_error: Option<f64>,
    pub n_panels: usize,
    pub n_density: usize,
    pub n_source: usize,
    pub n_volume: usize,
    pub n_volume_qbx: usize,
    pub p_fmm: Vec<usize>,
    pub p_add: usize,
    #[serde(skip)]
    pub seconds: f64,
    /// Computed field at the volume targets.
    #[serde(skip)]
    pub volume_values: Vec<C64>,
    #[serde(skip)]
    pub volume_verdicts: Vec<Verdict>,
}

/// Checks `u = D[u] - S[du/dn]` for the field `u` of interior point sources.
///
/// Boundary targets are the density nodes; `volume` targets must lie outside.
pub fn greens_identity_errors(
    d: &Discretization,
    points: &[Point],
    charges: &[C64],
    volume: &[Point],
    opts: &EvalOptions,
) -> Result<GreenReport> {
    if points.len() != charges.len() {
        return Err(Error::Shape("point sources and charges differ in length".into()));
    }
    let start = Instant::now();
    let omega = opts.omega;
    let nodes = d.density_points();
    let normals = d.density_normals();
    let u: Vec<C64> = nodes.par_iter().map(|&x| point_field(omega, points, charges, x)).collect();
    let dudn: Vec<C64> = nodes
        .par_iter()
        .zip(normals.par_iter())
        .map(|(&x, &n)| -point_field_normal_derivative(omega, points, charges, x, n))
        .collect();
    let mut all = nodes.clone();
    all.extend_from_slice(volume);
    let o = EvalOptions { side: Side::Exterior, ..opts.clone() };
    let ev = Evaluator::new(d, &all, o)?;
    let got = ev.evaluate_pair(Some(&dudn), Some(&u))?;
    let nd = nodes.len();
    let boundary_error = weighted_rel_l2(&got[..nd], &u, Some(&d.density_weights()));
    let volume_error = if volume.is_empty() {
        None
    } else {
        let exact: Vec<C64> = volume.par_iter().map(|&x| point_field(omega, points, charges, x)).collect();
        Some(weighted_rel_l2(&got[nd..], &exact, None))
    };
    let n_volume_qbx = ev.association().verdicts[nd..].iter().filter(|v| matches!(v, Verdict::Qbx(_))).count();
    Ok(GreenReport {
        boundary_error,
        volume_error,
        n_panels: d.n_panels(),
        n_density: nd,
        n_source: d.n_source(),
        n_volume: volume.len(),
        n_volume_qbx,
        p_fmm: ev.plan().p_fmm.clone(),
        p_add: ev.plan().p_add,
        seconds: start.elapsed().as_secs_f64(),
        volume_values: got[nd..].to_vec(),
        volume_verdicts: ev.association().verdicts[nd..].to_vec(),
    })
}

/// Random points inside the curves, at least `margin` from every source node.
pub fn interior_points<R: Rng>(d: &Discretization, n: usize, margin: f64, rng: &mut R) -> Result<Vec<Point>> {
    let nodes = d.source_points();
    let (lo, hi) = bounding_box(&nodes);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n.max(1) * 10_000 {
        if out.len() == n {
            break;
        }
        let x = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])];
        if d.side_of(x) < 0 && nodes.iter().all(|y| crate::dist(x, *y) >= margin) {
            out.push(x);
        }
    }
    if out.len() < n {
        return Err(Error::Geometry(format!("found only {} of {n} interior points with margin {margin}", out.len())));
    }
    Ok(out)
}

pub fn bounding_box(points: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

/// A tensor grid `nx x ny` over `[xmin, xmax] x [ymin, ymax]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Grid {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub nx: usize,
    pub ny: usize,
}

impl std::str::FromStr for Grid {
    type Err = Error;

    /// `"xmin,xmax,ymin,ymax,nx,ny"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::Parse(format!("grid '{s}' is not xmin,xmax,ymin,ymax,nx,ny"));
        if parts.len() != 6 {
            return Err(bad());
        }
        let f = |i: usize| parts[i].parse::<f64>().map_err(|_| bad());
        let u = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
        let g = Grid { xmin: f(0)?, xmax: f(1)?, ymin: f(2)?, ymax: f(3)?, nx: u(4)?, ny: u(5)? };
        if g.nx == 0 || g.ny == 0 || !(g.xmax >= g.xmin && g.ymax >= g.ymin) {
            return Err(bad());
        }
        Ok(g)
    }
}

impl Grid {
    /// Points in row-major order (x fastest).
    pub fn points(&self) -> Vec<Point> {
        let step = |a: f64, b: f64, n: usize, i: usize| if n == 1 { 0.5 * (a + b) } else { a + (b - a) * i as f64 / (n - 1) as f64 };
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            for i in 0..self.nx {
                out.push([step(self.xmin, self.xmax, self.nx, i), step(self.ymin, self.ymax, self.ny, j)]);
            }
        }
        out
    }
}

/// `x,y,Re u,Im u,flag` with flag one of `direct`, `qbx`, `failed`.
pub fn write_field_csv<W: Write>(mut w: W, points: &[Point], values: &[C64], verdicts: &[Verdict]) -> Result<()> {
    writeln!(w, "x,y,Re u,Im u,flag")?;
    for ((x, v), f) in points.iter().zip(values).zip(verdicts) {
        let flag = match f {
            Verdict::Direct => "direct",
            Verdict::Qbx(_) => "qbx",
            Verdict::Failed => "failed",
        };
        writeln!(w, "{:.17e},{:.17e},{:.17e},{:.17e},{flag}", x[0], x[1], v.re, v.im)?;
    }
    Ok(())
}
