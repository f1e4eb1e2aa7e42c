//! Exterior Dirichlet scattering: the combined-field boundary integral
//! equation on the density grid, solved matrix-free with restarted GMRES.

use rayon::prelude::*;
use serde::Serialize;

use crate::association::Side;
use crate::geometry::Discretization;
use crate::layerpot::{point_field, EvalOptions, Evaluator, Kind};
use crate::refinement::{refine_to_conditions, DEFAULT_MAX_ROUNDS};
use crate::{Error, Point, Result, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GmresOptions {
    /// Relative residual target.
    pub tol: f64,
    pub restart: usize,
    pub max_iters: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        GmresOptions { tol: 1e-5, restart: 200, max_iters: 2000 }
    }
}

#[derive(Clone, Debug)]
pub struct GmresResult {
    pub x: Vec<C64>,
    pub iterations: usize,
    /// Relative residual after each iteration, starting with the initial one.
    pub residuals: Vec<f64>,
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm2(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Restarted GMRES with modified Gram-Schmidt and Givens rotations, from a
/// zero initial guess.
pub fn gmres<F>(mut apply: F, b: &[C64], opts: &GmresOptions) -> Result<GmresResult>
where
    F: FnMut(&[C64]) -> Result<Vec<C64>>,
{
    let n = b.len();
    let bnorm = norm2(b);
    let mut x = vec![ZERO; n];
    if bnorm == 0.0 {
        return Ok(GmresResult { x, iterations: 0, residuals: vec![0.0] });
    }
    let m = opts.restart.max(1);
    let mut residuals = vec![1.0];
    let mut iterations = 0;
    let mut r = b.to_vec();
    loop {
        let beta = norm2(&r);
        let mut basis: Vec<Vec<C64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut hess: Vec<Vec<C64>> = Vec::new();
        let mut cs: Vec<(f64, C64)> = Vec::new();
        let mut g = vec![C64::new(beta, 0.0)];
        let mut done = false;
        for j in 0..m {
            let mut w = apply(&basis[j])?;
            let mut col = vec![ZERO; j + 2];
            for (i, v) in basis.iter().enumerate() {
                let hij = dot(v, &w);
                col[i] = hij;
                for (wk, vk) in w.iter_mut().zip(v) {
                    *wk -= hij * vk;
                }
            }
            let wn = norm2(&w);
            col[j + 1] = C64::new(wn, 0.0);
            for (i, &(c, s)) in cs.iter().enumerate() {
                let (a, bb) = (col[i], col[i + 1]);
                col[i] = c * a + s * bb;
                col[i + 1] = -s.conj() * a + c * bb;
            }
            let (a, bb) = (col[j], col[j + 1]);
            let den = (a.norm_sqr() + bb.norm_sqr()).sqrt();
            let (c, s) = if den == 0.0 {
                (1.0, ZERO)
            } else if a.norm() == 0.0 {
                (0.0, C64::new(1.0, 0.0))
            } else {
                let c = a.norm() / den;
                (c, (a / a.norm()) * bb.conj() / den)
            };
            col[j] = c * a + s * bb;
            col[j + 1] = ZERO;
            cs.push((c, s));
            let gj = g[j];
            g[j] = c * gj;
            g.push(-s.conj() * gj);
            hess.push(col);
            iterations += 1;
            let rel = g[j + 1].norm() / bnorm;
            residuals.push(rel);
            if rel <= opts.tol || wn == 0.0 || iterations >= opts.max_iters {
                done = rel <= opts.tol || wn == 0.0;
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }
        // back substitution on the triangular factor
        let k = hess.len();
        let mut y = vec![ZERO; k];
        for i in (0..k).rev() {
            let mut acc = g[i];
            for l in i + 1..k {
                acc -= hess[l][i] * y[l];
            }
            y[i] = acc / hess[i][i];
        }
        for (l, yl) in y.iter().enumerate() {
            for (xi, vi) in x.iter_mut().zip(&basis[l]) {
                *xi += yl * vi;
            }
        }
        if done {
            return Ok(GmresResult { x, iterations, residuals });
        }
        if iterations >= opts.max_iters {
            return Err(Error::NoConvergence { iterations, residuals });
        }
        let ax = apply(&x)?;
        r = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    }
}

/// Matrix-free boundary operator `sigma -> sigma/2 + D* sigma + i omega S* sigma`,
/// evaluated as the exterior one-sided limit of `D + i omega S` at the nodes.
pub struct BoundaryOperator<'a> {
    evaluator: Evaluator<'a>,
    pub applications: usize,
}

impl<'a> BoundaryOperator<'a> {
    pub fn new(d: &'a Discretization, omega: f64, eps: f64, p: usize) -> Result<Self> {
        let opts = EvalOptions::new(omega, eps, p, Side::Exterior);
        Ok(BoundaryOperator { evaluator: Evaluator::new(d, &d.density_points(), opts)?, applications: 0 })
    }

    pub fn apply(&mut self, sigma: &[C64]) -> Result<Vec<C64>> {
        self.applications += 1;
        self.evaluator.evaluate(Kind::Combined, sigma)
    }
}

/// One application of the boundary operator.
pub fn apply_operator(d: &Discretization, omega: f64, eps: f64, p: usize, sigma: &[C64]) -> Result<Vec<C64>> {
    BoundaryOperator::new(d, omega, eps, p)?.apply(sigma)
}

#[derive(Clone, Debug)]
pub enum Incident {
    /// `exp(i omega direction . x)`; the direction must have unit length.
    PlaneWave { direction: Point },
    /// Field of point sources `sum c_j (i/4) H_0(omega |x - y_j|)`.
    PointSources { points: Vec<Point>, charges: Vec<C64> },
}

impl Incident {
    pub fn value(&self, omega: f64, x: Point) -> C64 {
        match self {
            Incident::PlaneWave { direction } => C64::new(0.0, omega * (direction[0] * x[0] + direction[1] * x[1])).exp(),
            Incident::PointSources { points, charges } => point_field(omega, points, charges, x),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Incident::PlaneWave { direction } if (crate::norm(*direction) - 1.0).abs() > 1e-12 => {
                Err(Error::Domain(format!("plane wave direction {direction:?} is not a unit vector")))
            }
            Incident::PointSources { points, charges } if points.len() != charges.len() => {
                Err(Error::Shape("point sources and charges differ in length".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScatterProblem {
    pub discretization: Discretization,
    pub omega: f64,
    pub incident: Incident,
    pub eps: f64,
    /// QBX order.
    pub p: usize,
    pub gmres: GmresOptions,
    /// Split every panel once before solving.
    pub extra_subdivision: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScatterSolution {
    #[serde(skip)]
    pub discretization: Discretization,
    #[serde(skip)]
    pub density: Vec<C64>,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    /// Resolution metric of the density.
    pub density_resolution: f64,
    pub n_density: usize,
    pub omega: f64,
    pub eps: f64,
    pub p: usize,
}

impl ScatterSolution {
    /// Scattered field `D[sigma] + i omega S[sigma]` at exterior targets.
    pub fn scattered(&self, targets: &[Point]) -> Result<Vec<C64>> {
        let opts = EvalOptions::new(self.omega, self.eps, self.p, Side::Exterior);
        Evaluator::new(&self.discretization, targets, opts)?.evaluate(Kind::Combined, &self.density)
    }
}

/// Solves for the density whose combined field cancels the incident field on the curves.
pub fn solve_scatter(problem: &ScatterProblem) -> Result<ScatterSolution> {
    problem.incident.validate()?;
    let d = if problem.extra_subdivision {
        refine_to_conditions(&problem.discretization.uniform_split(), problem.omega, DEFAULT_MAX_ROUNDS)?.0
    } else {
        problem.discretization.clone()
    };
    let rhs: Vec<C64> = d.density_points().par_iter().map(|&x| -problem.incident.value(problem.omega, x)).collect();
    let mut op = BoundaryOperator::new(&d, problem.omega, problem.eps, problem.p)?;
    let res = gmres(|s| op.apply(s), &rhs, &problem.gmres)?;
    log::info!("GMRES converged in {} iterations ({} operator applications)", res.iterations, op.applications);
    let density_resolution = d.resolution_metric(&res.x)?;
    Ok(ScatterSolution {
        n_density: d.n_density(),
        discretization: d,
        density: res.x,
        iterations: res.iterations,
        residuals: res.residuals,
        density_resolution,
        omega: problem.omega,
        eps: problem.eps,
        p: problem.p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansions::{eval_local, p2l_acc, scale_for, SourceBatch};
    use crate::geometry::{build_panels_with, BuildOptions, FourierCurve};
    use crate::layerpot::{interior_points, weighted_rel_l2};
    use crate::refinement::{lookup_qhat, refine_to_conditions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prepared(curve: FourierCurve, q: usize, eps: f64, omega: f64) -> Discretization {
        let qhat = lookup_qhat(q, eps).unwrap();
        let d = build_panels_with(&[curve], &BuildOptions { qhat, ..BuildOptions::new(q, eps) }).unwrap();
        refine_to_conditions(&d, omega, 50).unwrap().0
    }

    fn random_vec(n: usize, seed: u64) -> Vec<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn gmres_solves_small_dense_systems() {
        let n = 30;
        let mut a = random_vec(n * n, 1);
        for i in 0..n {
            a[i * n + i] += C64::new(8.0, 0.0);
        }
        let b = random_vec(n, 2);
        let matvec = |x: &[C64]| -> Result<Vec<C64>> { Ok((0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()) };
        for restart in [5, 50] {
            let r = gmres(matvec, &b, &GmresOptions { tol: 1e-12, restart, max_iters: 500 }).unwrap();
            let ax = matvec(&r.x).unwrap();
            assert!(weighted_rel_l2(&ax, &b, None) < 1e-11);
            // within one cycle the residual never increases
            for w in r.residuals.windows(2).take(restart.min(r.residuals.len() - 1)) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }
        let capped = gmres(matvec, &b, &GmresOptions { tol: 1e-14, restart: 3, max_iters: 4 });
        match capped {
            Err(Error::NoConvergence { iterations, residuals }) => {
                assert_eq!(iterations, 4);
                assert_eq!(residuals.len(), 5);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
        assert_eq!(gmres(matvec, &vec![ZERO; n], &GmresOptions::default()).unwrap().iterations, 0);
    }

    #[test]
    fn operator_matches_dense_assembly() {
        let omega = 3.0;
        let mut d = build_panels_with(
            &[FourierCurve::circle(1.0, [0.0, 0.0]).unwrap()],
            &BuildOptions { qhat: 24, ..BuildOptions::new(4, 1e-2) },
        )
        .unwrap();
        while d.n_panels() < 16 {
            d = d.uniform_split();
        }
        assert_eq!(d.n_density(), 64);
        let n = d.n_density();
        let p = 8;
        // column j: unit density at node j, QBX coefficients by direct sums
        let pts = d.source_points();
        let nrm = d.source_normals();
        let wts = d.source_weights();
        let nodes = d.density_points();
        let mut dense = vec![ZERO; n * n];
        for j in 0..n {
            let mut e = vec![ZERO; n];
            e[j] = C64::new(1.0, 0.0);
            let dl: Vec<C64> = d.oversample(&e).unwrap().iter().zip(&wts).map(|(v, w)| v * w).collect();
            let sl: Vec<C64> = dl.iter().map(|v| v * C64::new(0.0, omega)).collect();
            let batch = SourceBatch { points: &pts, normals: &nrm, slp: Some(&sl), dlp: Some(&dl) };
            for i in 0..n {
                let c = &d.centers[d.center_index(i / 4, i % 4, 1).unwrap()];
                let s = scale_for(omega, c.radius);
                let mut coef = vec![ZERO; 2 * p + 1];
                p2l_acc(omega, c.location, s, p, &batch, &mut coef);
                dense[i * n + j] = eval_local(omega, c.location, s, p, &coef, nodes[i]);
            }
        }
        let sigma = random_vec(n, 5);
        let want: Vec<C64> = (0..n).map(|i| (0..n).map(|j| dense[i * n + j] * sigma[j]).sum()).collect();
        let got = apply_operator(&d, omega, 1e-13, p, &sigma).unwrap();
        assert!(weighted_rel_l2(&got, &want, None) < 1e-10);
        assert!(apply_operator(&d, omega, 1e-13, p, &vec![ZERO; n]).unwrap().iter().all(|v| *v == ZERO));
    }

    #[test]
    fn manufactured_exterior_solution() {
        let omega = 12.43;
        let d = prepared(FourierCurve::fish(), 4, 5e-7, omega);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let src = interior_points(&d, 2, 0.02, &mut rng).unwrap();
        let charges = vec![C64::new(1.0, 0.5), C64::new(-0.4, 1.0)];
        // the incident field is minus the known exterior field, so the scattered field reproduces it
        let neg: Vec<C64> = charges.iter().map(|c| -c).collect();
        let problem = ScatterProblem {
            discretization: d,
            omega,
            incident: Incident::PointSources { points: src.clone(), charges: neg },
            eps: 5e-7,
            p: 4,
            gmres: GmresOptions::default(),
            extra_subdivision: false,
        };
        let sol = solve_scatter(&problem).unwrap();
        assert!(*sol.residuals.last().unwrap() <= 1e-5);
        let probes: Vec<Point> = (0..100)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / 100.0;
                let r = 0.3 + 0.2 * (k % 3) as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        let got = sol.scattered(&probes).unwrap();
        let want: Vec<C64> = probes.iter().map(|&x| point_field(omega, &src, &charges, x)).collect();
        let e = weighted_rel_l2(&got, &want, None);
        assert!(e <= 1e-4, "{e:e}");
    }

    #[test]
    fn plane_wave_direction_must_be_unit() {
        let d = prepared(FourierCurve::circle(0.5, [0.0, 0.0]).unwrap(), 4, 1e-6, 2.0);
        let problem = ScatterProblem {
            discretization: d,
            omega: 2.0,
            incident: Incident::PlaneWave { direction: [1.0, 1.0] },
            eps: 1e-6,
            p: 4,
            gmres: GmresOptions::default(),
            extra_subdivision: false,
        };
        assert!(matches!(solve_scatter(&problem), Err(Error::Domain(_))));
    }
}
