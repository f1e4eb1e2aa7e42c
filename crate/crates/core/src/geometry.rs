//! Closed smooth curves and their Gauss-Legendre panel discretization.
//!
//! Each panel carries two grids: `q` density nodes (where unknowns live) and
//! `qhat` source nodes (the oversampled quadrature used for sums), both at
//! Gauss-Legendre points in the arclength parameter of the exact curve.

use crate::{Error, Point, Result, C64};
use rayon::prelude::*;
use std::f64::consts::TAU;
use std::io::Write;

/// Gauss-Legendre rule on [-1, 1], nodes ascending.
#[derive(Clone, Debug)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `P_0(x)..P_{n-1}(x)`.
pub fn legendre_values(n: usize, x: f64, out: &mut [f64]) {
    if n == 0 {
        return;
    }
    out[0] = 1.0;
    if n > 1 {
        out[1] = x;
    }
    for k in 2..n {
        let kf = k as f64;
        out[k] = ((2.0 * kf - 1.0) * x * out[k - 1] - (kf - 1.0) * out[k - 2]) / kf;
    }
}

pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let (pn, pnm1) = if n == 1 { (x, 1.0) } else { (p1, p0) };
            dp = nf * (x * pn - pnm1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Rule { nodes, weights }
}

/// Lagrange interpolation matrix (row-major, `to.len() x from.len()`) from
/// values at `from` nodes to values at `to` nodes.
pub fn interp_matrix(from: &[f64], to: &[f64]) -> Vec<f64> {
    let n = from.len();
    let bw: Vec<f64> = (0..n)
        .map(|j| 1.0 / (0..n).filter(|&k| k != j).map(|k| from[j] - from[k]).product::<f64>())
        .collect();
    let mut m = vec![0.0; to.len() * n];
    for (i, &x) in to.iter().enumerate() {
        let row = &mut m[i * n..(i + 1) * n];
        if let Some(j) = from.iter().position(|&f| f == x) {
            row[j] = 1.0;
            continue;
        }
        let terms: Vec<f64> = (0..n).map(|j| bw[j] / (x - from[j])).collect();
        let total: f64 = terms.iter().sum();
        for j in 0..n {
            row[j] = terms[j] / total;
        }
    }
    m
}

/// Affine map `x -> matrix * x + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub matrix: [[f64; 2]; 2],
    pub offset: Point,
}

impl Affine {
    pub fn identity() -> Self {
        Affine { matrix: [[1.0, 0.0], [0.0, 1.0]], offset: [0.0, 0.0] }
    }

    /// Rotation by `angle`, uniform scaling, then translation.
    pub fn rotate_scale_translate(angle: f64, scale: f64, offset: Point) -> Self {
        let (s, c) = angle.sin_cos();
        Affine { matrix: [[scale * c, -scale * s], [scale * s, scale * c]], offset }
    }

    #[inline]
    pub fn apply_vec(&self, v: Point) -> Point {
        let m = &self.matrix;
        [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
    }

    #[inline]
    pub fn apply(&self, p: Point) -> Point {
        let v = self.apply_vec(p);
        [v[0] + self.offset[0], v[1] + self.offset[1]]
    }

    pub fn then(&self, outer: &Affine) -> Affine {
        let a = &outer.matrix;
        let b = &self.matrix;
        let mut m = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Affine { matrix: m, offset: outer.apply(self.offset) }
    }
}

#[derive(Clone, Debug)]
pub enum Shape {
    /// `x_i(t) = Re sum_j coeffs_xi[j] e^{2 pi i j t}`.
    Fourier { coeffs_x1: Vec<C64>, coeffs_x2: Vec<C64> },
    /// `r(theta) = r0 + sum_j deltas[j-1] sin(j theta)`, `theta = 2 pi t`.
    Radial { r0: f64, deltas: Vec<f64> },
}

/// Position and first two parameter derivatives.
#[derive(Clone, Copy, Debug)]
pub struct CurvePoint {
    pub pos: Point,
    pub d1: Point,
    pub d2: Point,
}

/// A closed curve `t in [0, 1)`, always traversed counterclockwise.
#[derive(Clone, Debug)]
pub struct FourierCurve {
    pub shape: Shape,
    pub transform: Affine,
    reversed: bool,
}

const FISH_TABLE: &str = "\
0 -3.03e-02 0.00e+00 -1.56e-02 0.00e+00
1 -1.00e-01 2.34e-02 -1.01e-02 -4.92e-02
2 1.28e-02 2.16e-03 -1.50e-03 1.37e-02
3 -9.40e-03 3.98e-03 2.23e-04 -5.08e-03
4 3.18e-03 -1.92e-03 -7.06e-03 -2.70e-03
5 -3.42e-03 3.37e-03 -9.79e-03 2.51e-03
6 -2.13e-03 -3.87e-03 -3.70e-03 4.34e-03
7 -4.24e-03 -3.45e-03 -2.36e-03 -1.83e-03
8 -1.61e-03 -2.24e-03 2.46e-03 -8.88e-04
9 -1.32e-03 1.85e-03 2.16e-03 -1.10e-04
10 -4.06e-04 2.52e-04 -1.92e-03 -6.47e-04
11 5.58e-04 6.41e-04 -1.07e-03 -1.74e-04
12 -1.29e-04 1.88e-04 -4.82e-05 -1.37e-04
13 -8.71e-04 1.47e-03 -1.60e-03 -4.67e-05
14 -5.12e-04 -1.51e-04 4.71e-04 -3.93e-04
15 4.31e-04 -4.82e-04 6.10e-04 2.67e-04
16 -3.51e-04 -5.28e-04 -5.65e-04 8.88e-04
17 -7.72e-04 -2.93e-04 -5.04e-04 -2.83e-04
18 -3.65e-04 -2.33e-04 1.37e-04 -4.91e-04
19 8.68e-04 3.97e-04 9.03e-05 9.22e-05
20 1.50e-04 1.72e-04 -2.04e-04 -4.82e-05
21 -2.22e-04 -1.72e-04 -3.64e-04 -2.16e-04
22 -3.09e-04 2.04e-05 -3.61e-04 3.53e-05
23 -1.92e-04 2.53e-04 -1.04e-04 -1.73e-05
24 -3.36e-04 -1.48e-04 7.34e-05 1.40e-04
25 -1.16e-04 -6.38e-04 8.94e-05 -1.08e-04
26 -2.24e-04 -1.73e-04 8.66e-05 -2.07e-05
27 -5.47e-05 2.16e-04 3.60e-05 -1.05e-04
28 9.47e-05 3.04e-04 -3.38e-04 4.25e-06
29 1.87e-04 7.48e-05 -5.85e-05 -7.12e-05
30 -6.42e-05 2.08e-05 -1.01e-04 -4.42e-05
31 -2.33e-04 2.49e-05 -3.08e-05 6.74e-05
32 -1.47e-04 7.06e-05 7.47e-05 3.94e-05
33 3.51e-05 -1.69e-04 -3.73e-05 -4.19e-06
34 4.50e-05 -1.88e-04 -1.20e-04 3.74e-05
35 -9.51e-05 -1.18e-04 -1.00e-05 -7.77e-05
36 -8.54e-05 7.05e-05 -7.14e-05 -6.35e-05
37 9.22e-05 9.62e-05 -1.57e-05 -7.09e-05
38 1.07e-04 5.55e-05 2.40e-05 -1.28e-04
39 -5.84e-05 -5.48e-05 -8.74e-05 1.17e-04
40 -1.58e-04 -4.45e-05 -9.08e-05 1.12e-05
41 -1.31e-04 -2.73e-05 3.18e-05 -4.73e-05
42 -6.19e-06 -2.10e-05 1.22e-04 4.18e-05
43 -8.43e-06 -7.75e-05 -2.89e-05 3.22e-05
44 -5.35e-05 -2.64e-05 -1.11e-04 -3.66e-05
45 -2.68e-06 1.33e-05 -3.82e-05 -6.75e-05
46 4.99e-05 1.14e-04 -4.55e-05 -1.41e-05
47 6.65e-06 4.98e-05 -2.83e-05 -5.38e-05
48 -2.05e-05 -6.93e-05 -2.80e-05 -1.56e-05
49 -2.32e-05 -6.10e-05 2.21e-05 1.22e-05
50 -2.31e-05 3.32e-05 5.11e-05 4.80e-05
";

impl FourierCurve {
    pub fn fourier(coeffs_x1: Vec<C64>, coeffs_x2: Vec<C64>) -> Result<Self> {
        Self::finish(Shape::Fourier { coeffs_x1, coeffs_x2 }, Affine::identity())
    }

    pub fn radial(r0: f64, deltas: Vec<f64>) -> Result<Self> {
        Self::finish(Shape::Radial { r0, deltas }, Affine::identity())
    }

    pub fn circle(radius: f64, center: Point) -> Result<Self> {
        Self::radial(radius, vec![])?.transformed(&Affine { matrix: Affine::identity().matrix, offset: center })
    }

    /// The fish-shaped test boundary.
    pub fn fish() -> Self {
        Self::parse_table(FISH_TABLE).expect("built-in table")
    }

    /// Parses lines `j Re x1 Im x1 Re x2 Im x2`; `#` starts a comment.
    pub fn parse_table(text: &str) -> Result<Self> {
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|w| w.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 5 || vals[0] < 0.0 || vals[0].fract() != 0.0 {
                return Err(Error::Parse(format!("line {}: expected `j re1 im1 re2 im2`", lineno + 1)));
            }
            let j = vals[0] as usize;
            if x1.len() <= j {
                x1.resize(j + 1, C64::new(0.0, 0.0));
                x2.resize(j + 1, C64::new(0.0, 0.0));
            }
            x1[j] = C64::new(vals[1], vals[2]);
            x2[j] = C64::new(vals[3], vals[4]);
        }
        if x1.is_empty() {
            return Err(Error::Parse("no coefficients".into()));
        }
        Self::fourier(x1, x2)
    }

    pub fn transformed(&self, map: &Affine) -> Result<Self> {
        Self::finish(self.shape.clone(), self.transform.then(map))
    }

    fn finish(shape: Shape, transform: Affine) -> Result<Self> {
        let finite = match &shape {
            Shape::Fourier { coeffs_x1, coeffs_x2 } => {
                coeffs_x1.iter().chain(coeffs_x2).all(|c| c.re.is_finite() && c.im.is_finite())
            }
            Shape::Radial { r0, deltas } => r0.is_finite() && deltas.iter().all(|d| d.is_finite()),
        };
        if !finite || transform.matrix.iter().flatten().chain(&transform.offset).any(|v| !v.is_finite()) {
            return Err(Error::Geometry("non-finite curve data".into()));
        }
        let mut c = FourierCurve { shape, transform, reversed: false };
        let n = 4 * c.modes() + 256;
        let mut area = 0.0;
        let mut perim = 0.0;
        for i in 0..n {
            let a = c.eval(i as f64 / n as f64).pos;
            let b = c.eval((i + 1) as f64 / n as f64).pos;
            area += 0.5 * (a[0] * b[1] - a[1] * b[0]);
            perim += crate::dist(a, b);
        }
        if !(area.abs() > 1e-10 * perim * perim) {
            return Err(Error::Geometry("curve does not enclose a region (open or degenerate)".into()));
        }
        if let Shape::Radial { r0, deltas } = &c.shape {
            if *r0 - deltas.iter().map(|d| d.abs()).sum::<f64>() <= 0.0 {
                return Err(Error::Geometry("radial curve passes through its center".into()));
            }
        }
        c.reversed = area < 0.0;
        Ok(c)
    }

    fn modes(&self) -> usize {
        match &self.shape {
            Shape::Fourier { coeffs_x1, coeffs_x2 } => coeffs_x1.len().max(coeffs_x2.len()),
            Shape::Radial { deltas, .. } => deltas.len() + 1,
        }
    }

    fn eval_raw(&self, t: f64) -> CurvePoint {
        match &self.shape {
            Shape::Fourier { coeffs_x1, coeffs_x2 } => {
                let unit = C64::from_polar(1.0, TAU * t);
                let mut z = C64::new(1.0, 0.0);
                let mut out = [[0.0; 2]; 3];
                for j in 0..coeffs_x1.len().max(coeffs_x2.len()) {
                    let w = TAU * j as f64;
                    let dz = C64::new(0.0, w) * z;
                    let ddz = -w * w * z;
                    for (i, cs) in [coeffs_x1, coeffs_x2].iter().enumerate() {
                        if let Some(c) = cs.get(j) {
                            out[0][i] += (c * z).re;
                            out[1][i] += (c * dz).re;
                            out[2][i] += (c * ddz).re;
                        }
                    }
                    z *= unit;
                }
                CurvePoint { pos: out[0], d1: out[1], d2: out[2] }
            }
            Shape::Radial { r0, deltas } => {
                let th = TAU * t;
                let (mut r, mut dr, mut ddr) = (*r0, 0.0, 0.0);
                for (j, d) in deltas.iter().enumerate() {
                    let jf = (j + 1) as f64;
                    let (s, c) = (jf * th).sin_cos();
                    r += d * s;
                    dr += d * jf * c;
                    ddr -= d * jf * jf * s;
                }
                let (s, c) = th.sin_cos();
                CurvePoint {
                    pos: [r * c, r * s],
                    d1: [TAU * (dr * c - r * s), TAU * (dr * s + r * c)],
                    d2: [
                        TAU * TAU * (ddr * c - 2.0 * dr * s - r * c),
                        TAU * TAU * (ddr * s + 2.0 * dr * c - r * s),
                    ],
                }
            }
        }
    }

    /// Position and `t`-derivatives in counterclockwise orientation.
    pub fn eval(&self, t: f64) -> CurvePoint {
        let (u, sign) = if self.reversed { (1.0 - t, -1.0) } else { (t, 1.0) };
        let raw = self.eval_raw(u);
        let m = &self.transform;
        let d1 = m.apply_vec(raw.d1);
        CurvePoint { pos: m.apply(raw.pos), d1: [sign * d1[0], sign * d1[1]], d2: m.apply_vec(raw.d2) }
    }

    #[inline]
    pub fn speed(&self, t: f64) -> f64 {
        crate::norm(self.eval(t).d1)
    }

    /// Arclength of `[t0, t1]` by 32-point Gauss quadrature.
    pub fn arclength(&self, t0: f64, t1: f64) -> f64 {
        let rule = arclength_rule();
        let half = 0.5 * (t1 - t0);
        let mid = 0.5 * (t1 + t0);
        rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * self.speed(mid + half * x)).sum::<f64>() * half
    }

    /// The parameter `t in [t0, t1]` where the arclength from `t0` equals `s`.
    pub fn param_at_arclength(&self, t0: f64, t1: f64, s: f64, total: f64) -> f64 {
        let (mut lo, mut hi) = (t0, t1);
        let mut t = t0 + (t1 - t0) * (s / total).clamp(0.0, 1.0);
        let tol = (1e-13 * (t1 - t0)).max(4.0 * f64::EPSILON * t.abs().max(1e-300));
        for _ in 0..60 {
            let f = self.arclength(t0, t) - s;
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            if f == 0.0 {
                break;
            }
            let mut tn = t - f / self.speed(t);
            if !(tn >= lo && tn <= hi) {
                tn = 0.5 * (lo + hi);
            }
            let step = (tn - t).abs();
            t = tn;
            if step <= tol {
                break;
            }
        }
        t
    }
}

fn arclength_rule() -> &'static Rule {
    static RULE: std::sync::OnceLock<Rule> = std::sync::OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(32))
}

/// One Gauss-Legendre panel on the exact curve.
#[derive(Clone, Debug)]
pub struct Panel {
    pub curve: usize,
    pub t0: f64,
    pub t1: f64,
    pub h: f64,
    /// Legendre coefficients of x1 and x2 in the panel's arclength variable.
    pub legendre_coeffs: [Vec<f64>; 2],
    pub nodes: Vec<Point>,
    pub normals: Vec<Point>,
    pub weights: Vec<f64>,
    pub node_params: Vec<f64>,
    pub source_nodes: Vec<Point>,
    pub source_normals: Vec<Point>,
    pub source_weights: Vec<f64>,
    pub source_params: Vec<f64>,
    pub center_of_mass: Point,
    /// Half side of an axis-aligned square about the center of mass holding the panel.
    pub radius: f64,
    pub prev: usize,
    pub next: usize,
}

/// An expansion center `c = x + side (h/2) n` of a density node.
#[derive(Clone, Copy, Debug)]
pub struct QbxCenter {
    pub location: Point,
    pub radius: f64,
    pub panel: usize,
    pub node: usize,
    pub side: i8,
}

#[derive(Clone, Debug)]
pub struct Discretization {
    pub curves: Vec<FourierCurve>,
    pub panels: Vec<Panel>,
    pub q: usize,
    pub qhat: usize,
    /// Sides that carry centers; +1 is the exterior.
    pub sides: Vec<i8>,
    pub centers: Vec<QbxCenter>,
    /// Row-major `qhat x q` interpolation from density to source nodes.
    pub interp: Vec<f64>,
    pub density_rule: Rule,
    pub source_rule: Rule,
}

/// Options for [`build_panels_with`].
#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub q: usize,
    pub qhat: usize,
    pub eps: f64,
    pub sides: Vec<i8>,
    pub max_depth: usize,
}

impl BuildOptions {
    pub fn new(q: usize, eps: f64) -> Self {
        BuildOptions { q, qhat: q, eps, sides: vec![1], max_depth: 30 }
    }
}

fn n_tail(q: usize) -> usize {
    match q {
        0..=4 => 1,
        5..=8 => 2,
        _ => 3,
    }
}

/// Relative tail energy of a coefficient vector scaled by `h`, before the square root.
fn tail_ratio(coeffs: &[C64], h: f64) -> f64 {
    let full: f64 = coeffs.iter().map(|c| c.norm_sqr()).sum();
    if full.sqrt() < 1e-300 {
        return 0.0;
    }
    let nt = n_tail(coeffs.len()).min(coeffs.len());
    let tail: f64 = coeffs[coeffs.len() - nt..].iter().map(|c| c.norm_sqr()).sum();
    // tails at roundoff level are exact zeros smeared by the transform
    if tail <= 1e-28 * full {
        return 0.0;
    }
    tail / full * h
}

fn legendre_table(rule: &Rule) -> Vec<f64> {
    let n = rule.nodes.len();
    let mut tab = vec![0.0; n * n];
    for (j, &x) in rule.nodes.iter().enumerate() {
        legendre_values(n, x, &mut tab[j * n..(j + 1) * n]);
    }
    tab
}

/// Legendre coefficients from values at the Gauss nodes of `rule`.
pub fn legendre_coeffs<T>(rule: &Rule, values: &[T]) -> Vec<T>
where
    T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T> + Default,
{
    let n = rule.nodes.len();
    let tab = legendre_table(rule);
    (0..n)
        .map(|m| {
            let mut acc = T::default();
            for j in 0..n {
                acc = acc + values[j] * (rule.weights[j] * tab[j * n + m]);
            }
            acc * ((2 * m + 1) as f64 / 2.0)
        })
        .collect()
}

/// Parameters at the Gauss nodes of `rule` in arclength on `[t0, t1]`.
fn arclength_nodes(curve: &FourierCurve, t0: f64, t1: f64, h: f64, rule: &Rule) -> Vec<f64> {
    rule.nodes.iter().map(|x| curve.param_at_arclength(t0, t1, 0.5 * h * (1.0 + x), h)).collect()
}

/// Resolution of the curve point and its `t`-derivative on `[t0, t1]`, with
/// both coordinates of each treated as one vector-valued function.
fn panel_resolution(curve: &FourierCurve, t0: f64, t1: f64, rule: &Rule) -> f64 {
    let h = curve.arclength(t0, t1);
    let ts = arclength_nodes(curve, t0, t1, h, rule);
    let pts: Vec<CurvePoint> = ts.iter().map(|&t| curve.eval(t)).collect();
    let q = rule.nodes.len();
    let nt = n_tail(q);
    let mut worst = 0.0f64;
    for deriv in 0..2 {
        let (mut tail, mut full) = (0.0, 0.0);
        for comp in 0..2 {
            let vals: Vec<f64> = pts.iter().map(|p| if deriv == 0 { p.pos[comp] } else { p.d1[comp] }).collect();
            let a = legendre_coeffs(rule, &vals);
            full += a.iter().map(|v| v * v).sum::<f64>();
            tail += a[q - nt..].iter().map(|v| v * v).sum::<f64>();
        }
        if full > 1e-300 {
            worst = worst.max(tail / full * h);
        }
    }
    worst.sqrt()
}

fn make_panel(curve: &FourierCurve, curve_id: usize, t0: f64, t1: f64, rule: &Rule, srule: &Rule) -> Panel {
    let h = curve.arclength(t0, t1);
    let grid = |r: &Rule| {
        let ts = arclength_nodes(curve, t0, t1, h, r);
        let mut pts = Vec::with_capacity(ts.len());
        let mut nrm = Vec::with_capacity(ts.len());
        for &t in &ts {
            let cp = curve.eval(t);
            let sp = crate::norm(cp.d1);
            pts.push(cp.pos);
            nrm.push([cp.d1[1] / sp, -cp.d1[0] / sp]);
        }
        let w: Vec<f64> = r.weights.iter().map(|w| 0.5 * h * w).collect();
        (pts, nrm, w, ts)
    };
    let (nodes, normals, weights, node_params) = grid(rule);
    let (source_nodes, source_normals, source_weights, source_params) = grid(srule);
    let xs: Vec<f64> = nodes.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = nodes.iter().map(|p| p[1]).collect();
    let legendre = [legendre_coeffs(rule, &xs), legendre_coeffs(rule, &ys)];
    let mut com = [0.0, 0.0];
    for (p, w) in nodes.iter().zip(&weights) {
        com[0] += w * p[0] / h;
        com[1] += w * p[1] / h;
    }
    let samples = 129;
    let mut rad = 0.0f64;
    let mut gap = 0.0f64;
    let mut last = curve.eval(t0).pos;
    for i in 0..samples {
        let p = curve.eval(t0 + (t1 - t0) * i as f64 / (samples - 1) as f64).pos;
        rad = rad.max((p[0] - com[0]).abs()).max((p[1] - com[1]).abs());
        gap = gap.max(crate::dist(p, last));
        last = p;
    }
    Panel {
        curve: curve_id,
        t0,
        t1,
        h,
        legendre_coeffs: legendre,
        nodes,
        normals,
        weights,
        node_params,
        source_nodes,
        source_normals,
        source_weights,
        source_params,
        center_of_mass: com,
        radius: rad + 0.51 * gap + 1e-14 * h,
        prev: 0,
        next: 0,
    }
}

/// Discretizes `curves` with panels of order `q` resolved to `eps`.
pub fn build_panels(curves: &[FourierCurve], q: usize, eps: f64) -> Result<Discretization> {
    build_panels_with(curves, &BuildOptions::new(q, eps))
}

pub fn build_panels_with(curves: &[FourierCurve], opts: &BuildOptions) -> Result<Discretization> {
    if ![2, 4, 8, 16].contains(&opts.q) {
        return Err(Error::Unsupported(format!("panel order q={} (expected 2, 4, 8 or 16)", opts.q)));
    }
    if !(opts.eps > 0.0 && opts.eps < 1.0) {
        return Err(Error::Domain(format!("eps must lie in (0, 1), got {}", opts.eps)));
    }
    if curves.is_empty() {
        return Err(Error::Geometry("no curves".into()));
    }
    let rule = gauss_legendre(opts.q);
    let mut specs: Vec<(usize, f64, f64)> = Vec::new();
    for (ci, c) in curves.iter().enumerate() {
        let n0 = (c.modes() / 2).max(4);
        let mut pending: Vec<(f64, f64, usize)> =
            (0..n0).map(|i| (i as f64 / n0 as f64, (i + 1) as f64 / n0 as f64, 0)).collect();
        let mut done: Vec<(f64, f64)> = Vec::new();
        while !pending.is_empty() {
            let verdicts: Vec<f64> =
                pending.par_iter().map(|&(t0, t1, _)| panel_resolution(c, t0, t1, &rule)).collect();
            let mut next = Vec::new();
            for (&(t0, t1, depth), res) in pending.iter().zip(verdicts) {
                if res <= opts.eps {
                    done.push((t0, t1));
                } else if depth >= opts.max_depth {
                    return Err(Error::Resolution(format!(
                        "curve {ci}: panel [{t0}, {t1}] unresolved ({res:e}) at depth {depth}"
                    )));
                } else {
                    let h = c.arclength(t0, t1);
                    let tm = c.param_at_arclength(t0, t1, 0.5 * h, h);
                    next.push((t0, tm, depth + 1));
                    next.push((tm, t1, depth + 1));
                }
            }
            pending = next;
        }
        done.sort_by(|a, b| a.0.total_cmp(&b.0));
        specs.extend(done.into_iter().map(|(a, b)| (ci, a, b)));
    }
    Discretization::from_specs(curves.to_vec(), &specs, opts.q, opts.qhat.max(opts.q), opts.sides.clone())
}

impl Discretization {
    fn from_specs(
        curves: Vec<FourierCurve>,
        specs: &[(usize, f64, f64)],
        q: usize,
        qhat: usize,
        sides: Vec<i8>,
    ) -> Result<Self> {
        let density_rule = gauss_legendre(q);
        let source_rule = gauss_legendre(qhat);
        let panels: Vec<Panel> = specs
            .par_iter()
            .map(|&(c, t0, t1)| make_panel(&curves[c], c, t0, t1, &density_rule, &source_rule))
            .collect();
        Ok(Self::assemble(curves, panels, q, qhat, sides, density_rule, source_rule))
    }

    fn assemble(
        curves: Vec<FourierCurve>,
        mut panels: Vec<Panel>,
        q: usize,
        qhat: usize,
        sides: Vec<i8>,
        density_rule: Rule,
        source_rule: Rule,
    ) -> Self {
        let n = panels.len();
        let mut start = 0;
        while start < n {
            let c = panels[start].curve;
            let mut end = start;
            while end < n && panels[end].curve == c {
                end += 1;
            }
            for k in start..end {
                panels[k].prev = if k == start { end - 1 } else { k - 1 };
                panels[k].next = if k + 1 == end { start } else { k + 1 };
            }
            start = end;
        }
        let mut centers = Vec::with_capacity(sides.len() * n * q);
        for &side in &sides {
            for (k, p) in panels.iter().enumerate() {
                let r = 0.5 * p.h;
                for j in 0..q {
                    let x = p.nodes[j];
                    let nv = p.normals[j];
                    let s = side as f64 * r;
                    centers.push(QbxCenter {
                        location: [x[0] + s * nv[0], x[1] + s * nv[1]],
                        radius: r,
                        panel: k,
                        node: j,
                        side,
                    });
                }
            }
        }
        let interp = interp_matrix(&density_rule.nodes, &source_rule.nodes);
        Discretization { curves, panels, q, qhat, sides, centers, interp, density_rule, source_rule }
    }

    pub fn n_panels(&self) -> usize {
        self.panels.len()
    }

    /// Number of density unknowns `N q`.
    pub fn n_density(&self) -> usize {
        self.panels.len() * self.q
    }

    /// Number of source nodes `N qhat`.
    pub fn n_source(&self) -> usize {
        self.panels.len() * self.qhat
    }

    pub fn total_length(&self) -> f64 {
        self.panels.iter().map(|p| p.h).sum()
    }

    /// Index of the center of density node `(k, j)` on `side`, if that side carries centers.
    pub fn center_index(&self, panel: usize, node: usize, side: i8) -> Option<usize> {
        let s = self.sides.iter().position(|&v| v == side)?;
        Some((s * self.panels.len() + panel) * self.q + node)
    }

    pub fn density_points(&self) -> Vec<Point> {
        self.panels.iter().flat_map(|p| p.nodes.iter().copied()).collect()
    }

    pub fn density_normals(&self) -> Vec<Point> {
        self.panels.iter().flat_map(|p| p.normals.iter().copied()).collect()
    }

    pub fn density_weights(&self) -> Vec<f64> {
        self.panels.iter().flat_map(|p| p.weights.iter().copied()).collect()
    }

    pub fn source_points(&self) -> Vec<Point> {
        self.panels.iter().flat_map(|p| p.source_nodes.iter().copied()).collect()
    }

    pub fn source_normals(&self) -> Vec<Point> {
        self.panels.iter().flat_map(|p| p.source_normals.iter().copied()).collect()
    }

    pub fn source_weights(&self) -> Vec<f64> {
        self.panels.iter().flat_map(|p| p.source_weights.iter().copied()).collect()
    }

    /// Same panels with a different source order.
    pub fn with_source_order(&self, qhat: usize) -> Self {
        let specs: Vec<_> = self.panels.iter().map(|p| (p.curve, p.t0, p.t1)).collect();
        Self::from_specs(self.curves.clone(), &specs, self.q, qhat.max(self.q), self.sides.clone())
            .expect("rebuilding existing panels")
    }

    /// Same panels with centers on the given sides.
    pub fn with_sides(&self, sides: &[i8]) -> Self {
        Self::assemble(
            self.curves.clone(),
            self.panels.clone(),
            self.q,
            self.qhat,
            sides.to_vec(),
            self.density_rule.clone(),
            self.source_rule.clone(),
        )
    }

    /// Interpolates density-grid values to the source grid.
    pub fn oversample(&self, values: &[C64]) -> Result<Vec<C64>> {
        if values.len() != self.n_density() {
            return Err(Error::Shape(format!("expected {} density values, got {}", self.n_density(), values.len())));
        }
        let (q, qh) = (self.q, self.qhat);
        let mut out = vec![C64::new(0.0, 0.0); self.n_source()];
        for (k, chunk) in out.chunks_mut(qh).enumerate() {
            let v = &values[k * q..(k + 1) * q];
            for (i, o) in chunk.iter_mut().enumerate() {
                let row = &self.interp[i * q..(i + 1) * q];
                *o = row.iter().zip(v).map(|(a, b)| b * a).sum();
            }
        }
        Ok(out)
    }

    /// `sqrt(max_k (tail energy / total energy) h_k)` over the Legendre
    /// coefficients of `f` on each panel.
    pub fn resolution_metric(&self, f: &[C64]) -> Result<f64> {
        if f.len() != self.n_density() {
            return Err(Error::Shape(format!("expected {} density values, got {}", self.n_density(), f.len())));
        }
        let q = self.q;
        let worst = self
            .panels
            .iter()
            .enumerate()
            .map(|(k, p)| tail_ratio(&legendre_coeffs(&self.density_rule, &f[k * q..(k + 1) * q]), p.h))
            .fold(0.0, f64::max);
        Ok(worst.sqrt())
    }

    /// Splits every listed panel at its arclength midpoint.
    pub fn split_panels(&self, which: &[usize]) -> Self {
        let mut flag = vec![false; self.panels.len()];
        for &k in which {
            flag[k] = true;
        }
        let mut fresh: Vec<(usize, f64, f64)> = Vec::new();
        let mut order: Vec<std::result::Result<usize, usize>> = Vec::new();
        for (k, p) in self.panels.iter().enumerate() {
            if flag[k] {
                let c = &self.curves[p.curve];
                let tm = c.param_at_arclength(p.t0, p.t1, 0.5 * p.h, p.h);
                order.push(Err(fresh.len()));
                fresh.push((p.curve, p.t0, tm));
                order.push(Err(fresh.len()));
                fresh.push((p.curve, tm, p.t1));
            } else {
                order.push(Ok(k));
            }
        }
        let built: Vec<Panel> = fresh
            .par_iter()
            .map(|&(c, t0, t1)| make_panel(&self.curves[c], c, t0, t1, &self.density_rule, &self.source_rule))
            .collect();
        let panels = order
            .into_iter()
            .map(|o| match o {
                Ok(k) => self.panels[k].clone(),
                Err(i) => built[i].clone(),
            })
            .collect();
        Self::assemble(
            self.curves.clone(),
            panels,
            self.q,
            self.qhat,
            self.sides.clone(),
            self.density_rule.clone(),
            self.source_rule.clone(),
        )
    }

    pub fn split_panel(&self, k: usize) -> Result<Self> {
        if k >= self.panels.len() {
            return Err(Error::Domain(format!("panel {k} out of range")));
        }
        Ok(self.split_panels(&[k]))
    }

    /// Splits every panel once.
    pub fn uniform_split(&self) -> Self {
        let all: Vec<usize> = (0..self.panels.len()).collect();
        self.split_panels(&all)
    }

    /// Point on the exact curve of panel `k` at parameter `t`.
    pub fn panel_point(&self, k: usize, t: f64) -> Point {
        let p = &self.panels[k];
        self.curves[p.curve].eval(t).pos
    }

    /// Distance from `x` to panel `k` and the parameter of the closest point.
    ///
    /// Starts at the nearest node, runs Newton on the squared distance and
    /// never returns more than the best node or endpoint distance.
    pub fn distance_to_panel(&self, k: usize, x: Point) -> (f64, f64) {
        let p = &self.panels[k];
        let curve = &self.curves[p.curve];
        let mut best = (f64::INFINITY, p.t0);
        for (pt, &t) in p.source_nodes.iter().zip(&p.source_params).chain(p.nodes.iter().zip(&p.node_params)) {
            let d = crate::dist(*pt, x);
            if d < best.0 {
                best = (d, t);
            }
        }
        for t in [p.t0, p.t1] {
            let d = crate::dist(curve.eval(t).pos, x);
            if d < best.0 {
                best = (d, t);
            }
        }
        let mut t = best.1;
        for _ in 0..30 {
            let cp = curve.eval(t);
            let r = crate::sub(cp.pos, x);
            let g = r[0] * cp.d1[0] + r[1] * cp.d1[1];
            let dg = cp.d1[0] * cp.d1[0] + cp.d1[1] * cp.d1[1] + r[0] * cp.d2[0] + r[1] * cp.d2[1];
            if !(dg > 0.0) {
                break;
            }
            let tn = (t - g / dg).clamp(p.t0, p.t1);
            let step = (tn - t).abs();
            t = tn;
            if step <= 1e-15 * (p.t1 - p.t0).max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let d = crate::dist(curve.eval(t).pos, x);
        if d < best.0 {
            best = (d, t);
        }
        best
    }

    /// `+1` outside every curve, `-1` inside one, `0` on a curve (to 1e-14 relative).
    ///
    /// Near a panel the sign of the offset along the normal at the closest
    /// point decides; elsewhere the winding number on the source grid.
    pub fn side_of(&self, x: Point) -> i8 {
        let mut best = (f64::INFINITY, 0usize, 0.0);
        for (k, p) in self.panels.iter().enumerate() {
            let m = p.center_of_mass;
            if (x[0] - m[0]).abs().max((x[1] - m[1]).abs()) <= p.radius + p.h {
                let (d, t) = self.distance_to_panel(k, x);
                if d < best.0 {
                    best = (d, k, t);
                }
            }
        }
        if best.0 <= 0.5 * self.panels.get(best.1).map_or(0.0, |p| p.h) {
            let p = &self.panels[best.1];
            if best.0 <= 1e-14 * p.h {
                return 0;
            }
            let cp = self.curves[p.curve].eval(best.2);
            let off = crate::sub(x, cp.pos);
            let along = off[0] * cp.d1[1] - off[1] * cp.d1[0];
            return if along > 0.0 { 1 } else { -1 };
        }
        let mut wind = 0.0;
        for p in &self.panels {
            for ((y, n), w) in p.source_nodes.iter().zip(&p.source_normals).zip(&p.source_weights) {
                let r = crate::sub(*y, x);
                wind += w * (n[0] * r[0] + n[1] * r[1]) / (r[0] * r[0] + r[1] * r[1]);
            }
        }
        if wind / TAU > 0.5 {
            -1
        } else {
            1
        }
    }

    /// CSV dump of density nodes: `panel,node,x,y,nx,ny,weight`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "panel,node,x,y,nx,ny,weight")?;
        for (k, p) in self.panels.iter().enumerate() {
            for j in 0..self.q {
                writeln!(
                    w,
                    "{k},{j},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                    p.nodes[j][0], p.nodes[j][1], p.normals[j][0], p.normals[j][1], p.weights[j]
                )?;
            }
        }
        Ok(())
    }
}
